// One PASS/FAIL line per acceptance criterion; exit status 0 iff all pass.
//
//   bwm_acceptance                 everything (trains three fixture models)
//   bwm_acceptance --no-fixture    property criteria only

#include "support/properties.hpp"

#include "bwm/fixture.hpp"

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>

using namespace bwm;
using Clock = std::chrono::steady_clock;

namespace {

// Pinned thresholds and budgets.
constexpr double kMaskBudgetS = 30;
constexpr double kGradBudgetS = 120;
constexpr double kFixtureBudgetS = 30 * 60;
constexpr int kMaxSteps = 5000;
constexpr double kTrainPlanAcc = 95.0;
constexpr double kTrainNmse = 5.0;
constexpr double kCounterfactualShare = 0.8;
constexpr double kMinPearson = 0.6;
// Generation is scored at the deterministic sample (zero initial noise): the
// metrics are squared errors, which the conditional mean minimises.
constexpr double kTemperature = 0.0;

int failures = 0;

void report(const char* name, bool pass, const std::string& detail) {
  std::printf("[%s] %s: %s\n", pass ? "PASS" : "FAIL", name, detail.c_str());
  std::fflush(stdout);
  failures += !pass;
}

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string secs(double s) {
  char b[32];
  std::snprintf(b, sizeof b, " (%.1fs)", s);
  return b;
}

template <typename F>
void timed(const char* name, double budget, F&& check) {
  const auto t0 = Clock::now();
  const props::Check c = check();
  const double s = since(t0);
  report(name, c.pass && s < budget, c.detail + secs(s) + (s < budget ? "" : " over budget"));
}

double mean_nmse(const EvalReport& r) { return (r.mean_nmse(0) + r.mean_nmse(1) + r.mean_nmse(2)) / 3; }

TrainState<float> train_fixture(const Fixture& fx, const Dataset<float>& data, TrainMode mode, int steps) {
  RunConfig run = fx.run;
  run.train.mode = mode;
  run.train.steps = steps;
  auto st = init_state(run, fx.codec, data);
  const auto t0 = Clock::now();
  train(st, data, [&](const StepLog& s) {
    if (s.step % 1000 == 0) std::fprintf(stderr, "  %s step %d (%.0fs)\n", mode_name(mode).data(), s.step, since(t0));
  });
  return st;
}

void fixture_criteria() {
  const auto t0 = Clock::now();
  const Fixture fx = make_fixture();
  const auto data = prepare_dataset(fx.split.train, fx.codec);
  const int steps = fx.run.train.steps;

  const auto unified = train_fixture(fx, data, TrainMode::unified, steps);
  EvalOptions opt;
  opt.temperature = kTemperature;
  const auto tr = evaluate(unified.model, unified.codec, fx.split.train, opt);
  const auto va = evaluate(unified.model, unified.codec, fx.split.val, opt);
  const double fixture_s = since(t0);

  {
    bool nmse_ok = true, val_ok = true;
    char buf[512];
    for (int c = 0; c < 3; ++c) {
      nmse_ok = nmse_ok && tr.mean_nmse(c) <= kTrainNmse;
      val_ok = val_ok && va.mean_nmse(c) < va.mean_baseline_nmse(c);
    }
    const double acc = tr.planning ? tr.planning->accuracy : 0;
    std::snprintf(buf, sizeof buf,
                  "%d steps; train plan acc %.1f%%; train NMSE %.3f/%.3f/%.3f%%; val NMSE %.3f/%.3f/%.3f%% vs copy "
                  "%.3f/%.3f/%.3f%%",
                  steps, acc, tr.mean_nmse(0), tr.mean_nmse(1), tr.mean_nmse(2), va.mean_nmse(0), va.mean_nmse(1),
                  va.mean_nmse(2), va.mean_baseline_nmse(0), va.mean_baseline_nmse(1), va.mean_baseline_nmse(2));
    report("overfit fixture", steps <= kMaxSteps && acc >= kTrainPlanAcc && nmse_ok && val_ok && fixture_s < kFixtureBudgetS,
           buf + secs(fixture_s));
  }

  {
    const auto cf = props::counterfactual(unified, fx.split.val, fx.cohort_config.dynamics, kTemperature, 0);
    const double share = cf.pairs ? static_cast<double>(cf.agree) / cf.pairs : 0;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%d/%d val pairs move in the oracle's direction (%.0f%%), %d oracle ties skipped",
                  cf.agree, cf.pairs, 100 * share, cf.skipped);
    report("counterfactual direction", cf.pairs > 0 && share >= kCounterfactualShare, buf);
  }

  {
    const auto r = va.correlation.overall;
    char buf[128];
    std::snprintf(buf, sizeof buf, "val Pearson r = %s over %zu pairs", r ? std::to_string(*r).c_str() : "undefined",
                  va.pairs.size());
    report("focus correlation", r && *r >= kMinPearson, buf);
  }

  {
    // Single-task runs get the same number of updates on their task as the
    // unified run does in expectation (p_plan = 0.5).
    const int half = steps / 2;
    const auto plan_only = train_fixture(fx, data, TrainMode::plan_only, half);
    EvalOptions po = opt;
    po.generation = false;
    const auto pv = evaluate(plan_only.model, plan_only.codec, fx.split.val, po);
    const auto img_only = train_fixture(fx, data, TrainMode::img_only, half);
    EvalOptions io = opt;
    io.planning = false;
    const auto iv = evaluate(img_only.model, img_only.codec, fx.split.val, io);
    const double u_acc = va.planning->accuracy, p_acc = pv.planning->accuracy;
    char buf[256];
    std::snprintf(buf, sizeof buf, "val plan acc unified %.1f%% vs plan-only %.1f%%; val NMSE unified %.3f%% vs img-only %.3f%%",
                  u_acc, p_acc, mean_nmse(va), mean_nmse(iv));
    report("ablation direction", u_acc >= p_acc && mean_nmse(va) <= mean_nmse(iv), buf);
  }
}

}  // namespace

int main(int argc, char** argv) {
  bool fixture = true;
  for (int i = 1; i < argc; ++i) {
    if (!std::strcmp(argv[i], "--no-fixture")) {
      fixture = false;
    } else {
      std::fprintf(stderr, "usage: %s [--no-fixture]\n", argv[0]);
      return 2;
    }
  }
  timed("mask semantics", kMaskBudgetS, [] {
    auto a = props::mask_enumeration();
    auto b = props::causality();
    return props::Check{a.pass && b.pass, a.detail + "; " + b.detail};
  });
  timed("gradient fidelity", kGradBudgetS, [] { return props::gradient_fidelity(); });
  timed("loss identities", 1e9, [] { return props::loss_identities(); });
  timed("flow ODE", 1e9, [] { return props::euler(); });
  timed("parameter partition", 1e9, [] { return props::parameter_partition(); });
  if (fixture) fixture_criteria();
  timed("metric oracles", 1e9, [] { return props::metric_oracles(); });
  std::printf("%d failing criteria\n", failures);
  return failures ? 1 : 0;
}
