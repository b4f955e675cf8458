#include "bwm/eval.hpp"
#include "bwm/fixture.hpp"
#include "bwm/infer.hpp"
#include "bwm/io.hpp"
#include "bwm/raster.hpp"
#include "bwm/service.hpp"

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace bwm;

namespace {

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_png(const fs::path& path, const Image& img) {
  const auto bytes = encode_png(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<PatientTrajectory> split_subjects(const std::vector<PatientTrajectory>& cohort,
                                              const CohortManifestInfo& info, const std::string& split) {
  if (split == "all") return cohort;
  const auto& ids = split == "train" ? info.train_ids : info.val_ids;
  if (ids.empty()) throw std::runtime_error("cohort manifest has no '" + split + "' split");
  return select_subjects(cohort, ids);
}

long tumor_voxels(const SegMask& m) {
  long n = 0;
  for (long v = 0; v < m.shape.voxels(); ++v) n += m.label(v) > 0;
  return n;
}

int gen_cohort(std::uint64_t seed, int subjects, int grid, double ratio, const fs::path& out) {
  CohortConfig cfg = fixture_cohort_config();
  cfg.subjects = subjects;
  cfg.grid = Shape3{grid, grid, grid};
  validate(cfg);
  const auto cohort = generate_cohort(seed, cfg);
  const auto split = split_cohort(cohort, ratio, seed);
  CohortManifestInfo info;
  info.seed = seed;
  info.config = cfg;
  for (const auto& s : split.train) info.train_ids.push_back(s.subject_id);
  for (const auto& s : split.val) info.val_ids.push_back(s.subject_id);
  save_cohort(out, cohort, info);
  std::printf("wrote %zu subjects (%zu train, %zu val) to %s\n", cohort.size(), split.train.size(), split.val.size(),
              out.c_str());
  return 0;
}

int train_cmd(const std::string& config, const fs::path& cohort_dir, const fs::path& out, const std::string& log_path,
              const std::string& resume, int save_every) {
  CohortManifestInfo info;
  const auto cohort = load_cohort(cohort_dir, &info);
  const auto subjects = info.train_ids.empty() ? cohort : select_subjects(cohort, info.train_ids);
  if (subjects.empty()) throw std::runtime_error("no training subjects in " + cohort_dir.string());

  TrainState<float> st = [&] {
    if (!resume.empty()) {
      auto s = load_checkpoint<float>(resume);
      if (!config.empty()) {
        // The model shape is fixed by the checkpoint; only the schedule may move.
        const RunConfig rc = load_run_config(config);
        s.config = rc.train;
      }
      return s;
    }
    const RunConfig rc = config.empty() ? fixture_run_config() : load_run_config(config);
    auto codec = fit_codec(subjects, rc.model.patch, rc.model.latent_channels);
    const auto data = prepare_dataset(subjects, codec);
    return init_state(rc, std::move(codec), data);
  }();
  const auto grid = subjects.front().timepoints.front().volume.shape;
  if (!(grid == st.model.config().volume))
    throw std::runtime_error("cohort grid " + grid.str() + " does not match model volume " +
                             st.model.config().volume.str());
  const auto data = prepare_dataset(subjects, st.codec);

  std::ofstream log;
  if (!log_path.empty()) {
    log.open(log_path, std::ios::app);
    if (!log) throw std::runtime_error("cannot open log " + log_path);
  }
  std::printf("training %zu subjects, %zu examples, steps %d -> %d\n", subjects.size(), data.examples.size(), st.step,
              st.config.steps);
  const auto t0 = std::chrono::steady_clock::now();
  train(st, data, [&](const StepLog& s) {
    const std::string line = format_log(s);
    if (log) log << line << "\n" << std::flush;
    if (st.config.log_every > 0 && s.step % st.config.log_every == 0) {
      std::printf("%s  (%.0fs)\n", line.c_str(),
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      std::fflush(stdout);
    }
    if (save_every > 0 && s.step % save_every == 0) save_checkpoint(out, st);
  });
  save_checkpoint(out, st);
  std::printf("saved %s at step %d\n", out.c_str(), st.step);
  return 0;
}

int eval_cmd(const fs::path& ckpt, const fs::path& cohort_dir, const std::string& split, const fs::path& report,
             const EvalOptions& opt) {
  const auto st = load_checkpoint<float>(ckpt);
  CohortManifestInfo info;
  const auto cohort = load_cohort(cohort_dir, &info);
  const auto subjects = split_subjects(cohort, info, split);
  const auto rep = evaluate(st.model, st.codec, subjects, opt);
  fs::create_directories(report);
  auto j = rep.to_json();
  j["split"] = split;
  j["checkpoint"] = ckpt.string();
  j["temperature"] = opt.temperature;
  j["seed"] = opt.seed;
  write_file(report / "report.json", j.dump(2) + "\n");
  const std::string text = rep.to_text();
  write_file(report / "report.txt", text);
  std::cout << text;
  return 0;
}

int rollout_cmd(const fs::path& ckpt, std::string cohort_dir, const std::string& subject, int timepoint,
                const std::string& actions_text, const fs::path& out, std::uint64_t seed, double temperature,
                int steps) {
  if (cohort_dir.empty())
    if (const char* env = std::getenv("BWM_COHORT")) cohort_dir = env;
  if (cohort_dir.empty()) throw std::runtime_error("no cohort: pass --cohort or set BWM_COHORT");
  const auto actions = parse_actions(actions_text);
  const auto st = load_checkpoint<float>(ckpt);
  const auto cohort = load_cohort(cohort_dir);
  const PatientTrajectory* traj = nullptr;
  for (const auto& s : cohort)
    if (s.subject_id == subject) traj = &s;
  if (!traj) throw std::runtime_error("unknown subject '" + subject + "'");
  const int n = static_cast<int>(traj->timepoints.size());
  if (timepoint < 0 || timepoint >= n)
    throw std::runtime_error("timepoint " + std::to_string(timepoint) + " outside [0, " + std::to_string(n - 1) + "]");
  const auto& tp = traj->timepoints[static_cast<std::size_t>(timepoint)];
  const std::vector<TreatmentPlan> history(traj->plans.begin(), traj->plans.begin() + timepoint);

  const auto start = st.codec.encode(tp.volume);
  const auto result =
      rollout(st.model, st.codec, start, tp.day, traj->demographics, history, actions, seed, steps, &tp.volume,
              temperature);

  fs::create_directories(out);
  const Shape3 sh = tp.volume.shape;
  const int mid = sh.depth / 2;
  nlohmann::json manifest;
  manifest["subject"] = subject;
  manifest["timepoint"] = timepoint;
  manifest["start_day"] = tp.day;
  manifest["seed"] = seed;
  manifest["temperature"] = temperature;
  manifest["volume_shape"] = {Volume::kChannels, sh.depth, sh.height, sh.width};
  manifest["mask_shape"] = {SegMask::kClasses, sh.depth, sh.height, sh.width};
  manifest["steps"] = nlohmann::json::array();
  for (std::size_t k = 0; k < result.size(); ++k) {
    const auto& s = result[k];
    const std::string stem = "step" + std::to_string(k + 1);
    write_f32_grid(out / (stem + "_volume.f32"), s.state.volume.data);
    write_f32_grid(out / (stem + "_mask.f32"), s.state.mask.data);
    write_png(out / (stem + "_overlay.png"), render_slice(s.state.volume, 1, Axis::axial, mid, &s.state.mask));
    write_png(out / (stem + "_mask.png"), render_mask(s.state.mask, Axis::axial, mid));
    nlohmann::json step = {{"action", s.action.plan.key()},
                           {"interval_days", s.action.interval_days},
                           {"day", s.day},
                           {"day_offset", s.day - tp.day},
                           {"seed", seed + k},
                           {"tumor_voxels", tumor_voxels(s.state.mask)},
                           {"volume", stem + "_volume.f32"},
                           {"mask", stem + "_mask.f32"},
                           {"overlay", stem + "_overlay.png"},
                           {"mask_image", stem + "_mask.png"},
                           {"overlay_slice", {{"axis", "axial"}, {"index", mid}, {"channel", "T1CE"}}}};
    step["suggestion"] = s.suggestion ? nlohmann::json(s.suggestion->key()) : nlohmann::json(nullptr);
    manifest["steps"].push_back(std::move(step));
    std::printf("step %zu  %-10s +%3dd  day %4d  tumor %ld voxels  next %s\n", k + 1, s.action.plan.key().c_str(),
                s.action.interval_days, s.day, tumor_voxels(s.state.mask),
                s.suggestion ? s.suggestion->key().c_str() : "-");
  }
  write_file(out / "manifest.json", manifest.dump(2) + "\n");
  return 0;
}

int serve_cmd(const std::string& host, int port, const ServiceOptions& opt) {
  auto service = SandboxService::from_env(opt);
  httplib::Server server;
  service->mount(server);
  std::printf("listening on %s:%d\n", host.c_str(), port);
  std::fflush(stdout);
  if (!server.listen(host, port)) throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Brain tumour world model: synthetic cohort, training, evaluation, rollouts and the sandbox service"};
  app.require_subcommand(1);

  std::uint64_t seed = 7;
  int subjects = 8, grid = 32;
  double ratio = 0.8;
  std::string out, cohort, config, log, resume, ckpt, split = "val", report, subject, actions, host = "127.0.0.1";
  int save_every = 0, timepoint = 0, port = 8080, sampler_steps = 0, max_pairs = -1;
  double temperature = 1.0;

  auto* gen = app.add_subcommand("gen-cohort", "generate a synthetic cohort directory");
  gen->add_option("--seed", seed, "cohort seed")->capture_default_str();
  gen->add_option("--subjects", subjects, "number of subjects")->capture_default_str();
  gen->add_option("--grid", grid, "cubic grid edge in voxels")->capture_default_str();
  gen->add_option("--train-ratio", ratio, "fraction of subjects in the train split")->capture_default_str();
  gen->add_option("--out", out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "train a model on the cohort's train split");
  tr->add_option("--config", config, "key = value run config (default: the fixture config)");
  tr->add_option("--cohort", cohort, "cohort directory")->required();
  tr->add_option("--out", out, "checkpoint path")->required();
  tr->add_option("--log", log, "append per-step log lines here");
  tr->add_option("--resume", resume, "continue from this checkpoint");
  tr->add_option("--save-every", save_every, "also checkpoint every N steps");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint and write JSON and text reports");
  ev->add_option("--ckpt", ckpt, "checkpoint")->required();
  ev->add_option("--cohort", cohort, "cohort directory")->required();
  ev->add_option("--split", split, "train, val or all")->check(CLI::IsMember({"train", "val", "all"}))->capture_default_str();
  ev->add_option("--report", report, "report directory")->required();
  ev->add_option("--seed", seed, "sampling seed")->capture_default_str();
  ev->add_option("--temperature", temperature, "initial-noise scale, 0 = deterministic")->capture_default_str();
  ev->add_option("--sampler-steps", sampler_steps, "Euler steps (0: checkpoint default)");
  ev->add_option("--max-pairs", max_pairs, "cap on generation pairs (< 0: all)");

  auto* ro = app.add_subcommand("rollout", "chain generated futures under a list of actions");
  ro->add_option("--ckpt", ckpt, "checkpoint")->required();
  ro->add_option("--cohort", cohort, "cohort directory (default: $BWM_COHORT)");
  ro->add_option("--subject", subject, "subject id")->required();
  ro->add_option("--timepoint", timepoint, "start timepoint index")->capture_default_str();
  ro->add_option("--actions", actions, "e.g. \"SUR+CRT:92,AM:60\"")->required();
  ro->add_option("--out", out, "output directory")->required();
  ro->add_option("--seed", seed, "sampling seed")->capture_default_str();
  ro->add_option("--temperature", temperature, "initial-noise scale, 0 = deterministic")->capture_default_str();
  ro->add_option("--sampler-steps", sampler_steps, "Euler steps (0: checkpoint default)");

  auto* sv = app.add_subcommand("serve", "HTTP sandbox over $BWM_COHORT and $BWM_CHECKPOINT");
  sv->add_option("--port", port, "port")->capture_default_str();
  sv->add_option("--host", host, "bind address")->capture_default_str();
  sv->add_option("--temperature", temperature, "initial-noise scale for what-if jobs")->capture_default_str();
  sv->add_option("--sampler-steps", sampler_steps, "Euler steps (0: checkpoint default)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return gen_cohort(seed, subjects, grid, ratio, out);
    if (*tr) return train_cmd(config, cohort, out, log, resume, save_every);
    if (*ev) {
      EvalOptions opt;
      opt.seed = seed;
      opt.temperature = temperature;
      opt.sampler_steps = sampler_steps;
      opt.max_pairs = max_pairs;
      return eval_cmd(ckpt, cohort, split, report, opt);
    }
    if (*ro) return rollout_cmd(ckpt, cohort, subject, timepoint, actions, out, seed, temperature, sampler_steps);
    if (*sv) {
      ServiceOptions opt;
      opt.sampler_steps = sampler_steps;
      opt.temperature = temperature;
      return serve_cmd(host, port, opt);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
