#include "bwm/service.hpp"

#include "bwm/eval.hpp"
#include "bwm/raster.hpp"

#include <httplib.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <deque>

namespace bwm {

namespace wire {

namespace {

using nlohmann::json;

template <typename T>
void put(json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

template <typename T>
void get(const json& j, const char* key, std::optional<T>& v) {
  if (j.contains(key) && !j.at(key).is_null())
    v = j.at(key).get<T>();
  else
    v.reset();
}

}  // namespace

void to_json(json& j, const ErrorPayload& v) {
  j = json{{"error", v.error}, {"message", v.message}, {"retryable", v.retryable}};
  put(j, "valid_range", v.valid_range);
}
void from_json(const json& j, ErrorPayload& v) {
  j.at("error").get_to(v.error);
  j.at("message").get_to(v.message);
  j.at("retryable").get_to(v.retryable);
  get(j, "valid_range", v.valid_range);
}

void to_json(json& j, const PatientSummary& v) {
  j = json{{"id", v.id},       {"sex", v.sex},           {"age", v.age},   {"grade", v.grade},
           {"split", v.split}, {"timepoints", v.timepoints}, {"days", v.days}, {"plans", v.plans}};
}
void from_json(const json& j, PatientSummary& v) {
  j.at("id").get_to(v.id);
  j.at("sex").get_to(v.sex);
  j.at("age").get_to(v.age);
  j.at("grade").get_to(v.grade);
  j.at("split").get_to(v.split);
  j.at("timepoints").get_to(v.timepoints);
  j.at("days").get_to(v.days);
  j.at("plans").get_to(v.plans);
}

void to_json(json& j, const SliceInfo& v) { j = json{{"base", v.base}, {"counts", v.counts}}; }
void from_json(const json& j, SliceInfo& v) {
  j.at("base").get_to(v.base);
  j.at("counts").get_to(v.counts);
}

void to_json(json& j, const TimepointState& v) {
  j = json{{"subject", v.subject},           {"index", v.index},
           {"day", v.day},                   {"history", v.history},
           {"class_voxels", v.class_voxels}, {"tumor_voxels", v.tumor_voxels},
           {"slices", v.slices}};
  put(j, "next_plan", v.next_plan);
}
void from_json(const json& j, TimepointState& v) {
  j.at("subject").get_to(v.subject);
  j.at("index").get_to(v.index);
  j.at("day").get_to(v.day);
  j.at("history").get_to(v.history);
  get(j, "next_plan", v.next_plan);
  j.at("class_voxels").get_to(v.class_voxels);
  j.at("tumor_voxels").get_to(v.tumor_voxels);
  j.at("slices").get_to(v.slices);
}

void to_json(json& j, const SuggestRequest& v) {
  j = json::object();
  put(j, "session", v.session);
  put(j, "subject", v.subject);
  put(j, "timepoint", v.timepoint);
}
void from_json(const json& j, SuggestRequest& v) {
  if (!j.is_object()) throw json::type_error::create(302, "request must be an object", &j);
  get(j, "session", v.session);
  get(j, "subject", v.subject);
  get(j, "timepoint", v.timepoint);
}

void to_json(json& j, const TokenScore& v) { j = json{{"token", v.token}, {"logit", v.logit}}; }
void from_json(const json& j, TokenScore& v) {
  j.at("token").get_to(v.token);
  j.at("logit").get_to(v.logit);
}

void to_json(json& j, const SuggestResponse& v) {
  j = json{{"id", v.id}, {"plan_text", v.plan_text}, {"steps", v.steps}, {"mask", v.mask}};
  put(j, "plan", v.plan);
}
void from_json(const json& j, SuggestResponse& v) {
  j.at("id").get_to(v.id);
  get(j, "plan", v.plan);
  j.at("plan_text").get_to(v.plan_text);
  j.at("steps").get_to(v.steps);
  j.at("mask").get_to(v.mask);
}

void to_json(json& j, const WhatifRequest& v) {
  j = json{{"action", v.action}, {"interval_days", v.interval_days}, {"seed", v.seed}};
  put(j, "session", v.session);
  put(j, "branch", v.branch);
  put(j, "subject", v.subject);
  put(j, "timepoint", v.timepoint);
}
void from_json(const json& j, WhatifRequest& v) {
  get(j, "session", v.session);
  get(j, "branch", v.branch);
  get(j, "subject", v.subject);
  get(j, "timepoint", v.timepoint);
  j.at("action").get_to(v.action);
  j.at("interval_days").get_to(v.interval_days);
  v.seed = j.value("seed", std::uint64_t{0});
}

void to_json(json& j, const WhatifResponse& v) {
  j = json{{"job", v.job}, {"session", v.session}, {"status", v.status}};
}
void from_json(const json& j, WhatifResponse& v) {
  j.at("job").get_to(v.job);
  j.at("session").get_to(v.session);
  j.at("status").get_to(v.status);
}

void to_json(json& j, const JobResult& v) {
  j = json{{"step", v.step},
           {"action", v.action},
           {"interval_days", v.interval_days},
           {"seed", v.seed},
           {"day_offset", v.day_offset},
           {"day", v.day},
           {"class_voxels", v.class_voxels},
           {"tumor_voxels", v.tumor_voxels},
           {"hash", v.hash},
           {"slices", v.slices}};
  put(j, "suggestion", v.suggestion);
}
void from_json(const json& j, JobResult& v) {
  j.at("step").get_to(v.step);
  j.at("action").get_to(v.action);
  j.at("interval_days").get_to(v.interval_days);
  j.at("seed").get_to(v.seed);
  j.at("day_offset").get_to(v.day_offset);
  j.at("day").get_to(v.day);
  get(j, "suggestion", v.suggestion);
  j.at("class_voxels").get_to(v.class_voxels);
  j.at("tumor_voxels").get_to(v.tumor_voxels);
  j.at("hash").get_to(v.hash);
  j.at("slices").get_to(v.slices);
}

void to_json(json& j, const JobView& v) {
  j = json{{"job", v.job}, {"session", v.session}, {"status", v.status}};
  put(j, "error", v.error);
  put(j, "result", v.result);
}
void from_json(const json& j, JobView& v) {
  j.at("job").get_to(v.job);
  j.at("session").get_to(v.session);
  j.at("status").get_to(v.status);
  get(j, "error", v.error);
  get(j, "result", v.result);
}

}  // namespace wire

namespace {

Reply json_reply(int status, const nlohmann::json& j) { return Reply{status, "application/json", j.dump()}; }

Reply error_reply(int status, std::string code, std::string message, bool retryable = false,
                  std::optional<std::array<int, 2>> range = std::nullopt) {
  return json_reply(status, wire::ErrorPayload{std::move(code), std::move(message), retryable, range});
}

std::array<long, 3> class_counts(const SegMask& m) { return {m.count(1), m.count(2), m.count(3)}; }

wire::SliceInfo slice_info(const std::string& source, Shape3 s) {
  return {"/slices?" + source, {slice_count(s, Axis::axial), slice_count(s, Axis::coronal), slice_count(s, Axis::sagittal)}};
}

std::string digest(const Volume& v, const SegMask& m) {
  std::uint64_t h = 1469598103934665603ull;
  auto feed = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ull;
  };
  feed(v.data.data(), sizeof(float) * static_cast<std::size_t>(v.data.size()));
  for (long i = 0; i < m.shape.voxels(); ++i) {
    const int l = m.label(i);
    feed(&l, sizeof l);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<std::string> plan_keys(const std::vector<TreatmentPlan>& plans) {
  std::vector<std::string> out;
  for (const auto& p : plans) out.push_back(p.key());
  return out;
}

std::optional<int> parse_int(const std::string& s) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace

int channel_from_name(const std::string& s) {
  for (int c = 0; c < Volume::kChannels; ++c)
    if (s == kChannelNames[static_cast<std::size_t>(c)]) return c;
  if (auto v = parse_int(s); v && *v >= 0 && *v < Volume::kChannels) return *v;
  throw std::invalid_argument("unknown channel '" + s + "' (expected 0-2, FLAIR, T1CE or T2W)");
}

struct SandboxService::Session {
  std::string id;
  const PatientTrajectory* subject = nullptr;
  LatentGrid<float> latent;
  Volume volume;
  std::vector<TreatmentPlan> history;
  int day = 0;
  int day_offset = 0;
  int steps = 0;
  bool busy = false;
  std::uint64_t touched = 0;
};

struct SandboxService::Job {
  std::string id;
  std::string session;
  std::string status = "queued";
  std::optional<std::string> error;
  std::optional<wire::JobResult> result;
  Action action;
  std::uint64_t seed = 0;
  Volume volume;
  SegMask mask;
  // State after the job, for branching.
  const PatientTrajectory* subject = nullptr;
  LatentGrid<float> latent;
  std::vector<TreatmentPlan> history;
  int day = 0, day_offset = 0, steps = 0;
};

struct SandboxService::Suggestion {
  Volume volume;
  SegMask mask;
};

struct SandboxService::Pool {
  std::deque<std::pair<std::shared_ptr<Job>, std::shared_ptr<Session>>> queue;
  std::condition_variable wake;
  bool stop = false;
};

SandboxService::SandboxService(std::vector<PatientTrajectory> cohort, std::optional<TrainState<float>> model,
                               ServiceOptions opt, std::vector<std::string> val_ids)
    : cohort_(std::move(cohort)),
      val_ids_(std::move(val_ids)),
      model_(std::move(model)),
      opt_(opt),
      pool_(std::make_unique<Pool>()) {
  const unsigned n = std::max(2u, std::min(4u, std::thread::hardware_concurrency()));
  for (unsigned i = 0; i < n; ++i)
    workers_.emplace_back([this] {
      for (;;) {
        std::pair<std::shared_ptr<Job>, std::shared_ptr<Session>> item;
        {
          std::unique_lock lock(mu_);
          pool_->wake.wait(lock, [&] { return pool_->stop || !pool_->queue.empty(); });
          if (pool_->queue.empty()) return;
          item = std::move(pool_->queue.front());
          pool_->queue.pop_front();
          item.first->status = "running";
        }
        run_job(item.first, item.second);
      }
    });
}

SandboxService::~SandboxService() {
  {
    std::lock_guard lock(mu_);
    pool_->stop = true;
  }
  pool_->wake.notify_all();
  for (auto& t : workers_) t.join();
}

std::unique_ptr<SandboxService> SandboxService::from_env(ServiceOptions opt) {
  const char* cohort_dir = std::getenv("BWM_COHORT");
  if (!cohort_dir || !*cohort_dir) throw std::runtime_error("BWM_COHORT is not set (cohort directory to serve)");
  CohortManifestInfo info;
  auto cohort = load_cohort(cohort_dir, &info);
  std::optional<TrainState<float>> model;
  if (const char* ckpt = std::getenv("BWM_CHECKPOINT"); ckpt && *ckpt) {
    model = load_checkpoint<float>(ckpt);
    if (!cohort.empty() && !(cohort.front().timepoints.front().volume.shape == model->model.config().volume))
      throw std::runtime_error("checkpoint volume " + model->model.config().volume.str() +
                               " does not match cohort grid " + cohort.front().timepoints.front().volume.shape.str());
  }
  return std::make_unique<SandboxService>(std::move(cohort), std::move(model), opt, info.val_ids);
}

const PatientTrajectory* SandboxService::find_subject(const std::string& id) const {
  for (const auto& s : cohort_)
    if (s.subject_id == id) return &s;
  return nullptr;
}

Reply SandboxService::patients() const {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& s : cohort_) {
    wire::PatientSummary p;
    p.id = s.subject_id;
    p.sex = s.demographics.sex == Sex::female ? "F" : "M";
    p.age = s.demographics.age;
    p.grade = s.demographics.grade;
    const bool val = std::find(val_ids_.begin(), val_ids_.end(), s.subject_id) != val_ids_.end();
    p.split = val_ids_.empty() ? "" : (val ? "val" : "train");
    p.timepoints = static_cast<int>(s.timepoints.size());
    for (const auto& tp : s.timepoints) p.days.push_back(tp.day);
    p.plans = plan_keys(s.plans);
    out.push_back(p);
  }
  return json_reply(200, out);
}

Reply SandboxService::timepoint(const std::string& subject, int k) const {
  const auto* s = find_subject(subject);
  if (!s) return error_reply(404, "unknown_subject", "no subject '" + subject + "'");
  const int n = static_cast<int>(s->timepoints.size());
  if (k < 0 || k >= n)
    return error_reply(404, "unknown_timepoint", subject + " has timepoints 0.." + std::to_string(n - 1), false,
                       std::array<int, 2>{0, n - 1});
  const auto& tp = s->timepoints[static_cast<std::size_t>(k)];
  wire::TimepointState st;
  st.subject = subject;
  st.index = k;
  st.day = tp.day;
  st.history = plan_keys({s->plans.begin(), s->plans.begin() + k});
  if (k < static_cast<int>(s->plans.size())) st.next_plan = s->plans[static_cast<std::size_t>(k)].key();
  st.class_voxels = class_counts(tp.mask);
  st.tumor_voxels = tp.mask.tumor_voxels();
  st.slices = slice_info("subject=" + subject + "&tp=" + std::to_string(k), tp.volume.shape);
  return json_reply(200, st);
}

Reply SandboxService::slice(const std::map<std::string, std::string>& q) const {
  auto param = [&](const char* key) -> std::optional<std::string> {
    auto it = q.find(key);
    return it == q.end() ? std::nullopt : std::optional<std::string>(it->second);
  };
  Volume volume;
  SegMask mask;
  {
    std::lock_guard lock(mu_);
    if (auto id = param("job")) {
      auto it = jobs_.find(*id);
      if (it == jobs_.end()) return error_reply(404, "unknown_job", "no job '" + *id + "'");
      if (it->second->status != "done")
        return error_reply(409, "job_not_done", "job '" + *id + "' is " + it->second->status, true);
      volume = it->second->volume;
      mask = it->second->mask;
    } else if (auto id = param("suggestion")) {
      auto it = suggestions_.find(*id);
      if (it == suggestions_.end()) return error_reply(404, "unknown_suggestion", "no suggestion '" + *id + "'");
      volume = it->second->volume;
      mask = it->second->mask;
    }
  }
  if (volume.data.size() == 0) {
    auto subject = param("subject");
    auto tp = param("tp");
    if (!subject || !tp) return error_reply(400, "bad_request", "give subject and tp, job, or suggestion");
    const auto* s = find_subject(*subject);
    if (!s) return error_reply(404, "unknown_subject", "no subject '" + *subject + "'");
    const int n = static_cast<int>(s->timepoints.size());
    const auto k = parse_int(*tp);
    if (!k || *k < 0 || *k >= n)
      return error_reply(404, "unknown_timepoint", *subject + " has timepoints 0.." + std::to_string(n - 1), false,
                         std::array<int, 2>{0, n - 1});
    volume = s->timepoints[static_cast<std::size_t>(*k)].volume;
    mask = s->timepoints[static_cast<std::size_t>(*k)].mask;
  }
  int channel = 0;
  Axis axis = Axis::axial;
  try {
    if (auto c = param("channel")) channel = channel_from_name(*c);
    if (auto a = param("axis")) axis = axis_from_name(*a);
  } catch (const std::invalid_argument& e) {
    return error_reply(400, "bad_request", e.what());
  }
  const int n = slice_count(volume.shape, axis);
  int index = n / 2;
  if (auto i = param("index")) {
    const auto v = parse_int(*i);
    if (!v || *v < 0 || *v >= n)
      return error_reply(400, "index_out_of_range",
                         axis_name(axis) + " index must lie in 0.." + std::to_string(n - 1), false,
                         std::array<int, 2>{0, n - 1});
    index = *v;
  }
  bool overlay = false;
  if (auto o = param("overlay")) overlay = *o == "1" || *o == "true";
  const auto png = encode_png(render_slice(volume, channel, axis, index, overlay ? &mask : nullptr));
  return Reply{200, "image/png", std::string(png.begin(), png.end())};
}

Reply SandboxService::suggest(const std::string& body) {
  wire::SuggestRequest req;
  try {
    req = nlohmann::json::parse(body).get<wire::SuggestRequest>();
  } catch (const nlohmann::json::exception& e) {
    return error_reply(400, "bad_request", std::string("invalid suggest request: ") + e.what());
  }
  if (!model_) return error_reply(503, "model_not_loaded", "no checkpoint loaded (set BWM_CHECKPOINT)");
  LatentGrid<float> latent;
  Volume volume;
  std::vector<TreatmentPlan> history;
  const PatientTrajectory* subject = nullptr;
  if (req.session) {
    std::lock_guard lock(mu_);
    auto it = sessions_.find(*req.session);
    if (it == sessions_.end()) return error_reply(404, "unknown_session", "no session '" + *req.session + "'");
    latent = it->second->latent;
    volume = it->second->volume;
    history = it->second->history;
    subject = it->second->subject;
    it->second->touched = ++counter_;
  } else {
    if (!req.subject || !req.timepoint) return error_reply(400, "bad_request", "give session, or subject and timepoint");
    subject = find_subject(*req.subject);
    if (!subject) return error_reply(404, "unknown_subject", "no subject '" + *req.subject + "'");
    const int n = static_cast<int>(subject->timepoints.size());
    if (*req.timepoint < 0 || *req.timepoint >= n)
      return error_reply(404, "unknown_timepoint", *req.subject + " has timepoints 0.." + std::to_string(n - 1), false,
                         std::array<int, 2>{0, n - 1});
    volume = subject->timepoints[static_cast<std::size_t>(*req.timepoint)].volume;
    latent = model_->codec.encode(volume);
    history.assign(subject->plans.begin(), subject->plans.begin() + *req.timepoint);
  }
  wire::SuggestResponse res;
  auto stored = std::make_shared<Suggestion>();
  stored->volume = volume;
  try {
    const auto p = predict_plan(model_->model, latent, subject->demographics, history);
    res.plan = p.plan.key();
    res.plan_text = p.plan.render();
    for (const auto& row : p.logits) {
      std::vector<wire::TokenScore> step;
      step.push_back({"EOS", row(Vocabulary::kEos)});
      for (int i = 0; i < Vocabulary::kPlanCount; ++i)
        step.push_back({std::string(token_name(kAllTreatments[static_cast<std::size_t>(i)])),
                        row(Vocabulary::kFirstPlan + i)});
      res.steps.push_back(std::move(step));
    }
    stored->mask = p.mask;
  } catch (const NoPlanError& e) {
    return error_reply(422, "no_plan", e.what());
  }
  std::lock_guard lock(mu_);
  res.id = "sg" + std::to_string(++counter_);
  res.mask = slice_info("suggestion=" + res.id, volume.shape);
  suggestions_[res.id] = std::move(stored);
  suggestion_order_.push_back(res.id);
  evict_locked();
  return json_reply(200, res);
}

Reply SandboxService::whatif(const std::string& body) {
  wire::WhatifRequest req;
  try {
    req = nlohmann::json::parse(body).get<wire::WhatifRequest>();
  } catch (const nlohmann::json::exception& e) {
    return error_reply(400, "bad_request", std::string("invalid whatif request: ") + e.what());
  }
  Action action;
  try {
    action.plan = TreatmentPlan::parse(req.action);
  } catch (const std::invalid_argument& e) {
    return error_reply(400, "invalid_action", e.what());
  }
  if (action.plan.empty()) return error_reply(400, "invalid_action", "action names no treatment");
  if (req.interval_days <= 0) return error_reply(400, "invalid_interval", "interval_days must be positive");
  action.interval_days = req.interval_days;
  if (!model_) return error_reply(503, "model_not_loaded", "no checkpoint loaded (set BWM_CHECKPOINT)");

  std::shared_ptr<Session> session;
  if (!req.session && req.branch) {
    std::lock_guard lock(mu_);
    auto it = jobs_.find(*req.branch);
    if (it == jobs_.end()) return error_reply(404, "unknown_job", "no job '" + *req.branch + "'");
    const auto& from = *it->second;
    if (from.status != "done")
      return error_reply(409, "job_not_done", "job '" + from.id + "' is " + from.status, from.status != "failed");
    session = std::make_shared<Session>();
    session->subject = from.subject;
    session->volume = from.volume;
    session->latent = from.latent;
    session->history = from.history;
    session->day = from.day;
    session->day_offset = from.day_offset;
    session->steps = from.steps;
  } else if (!req.session) {
    if (!req.subject || !req.timepoint) return error_reply(400, "bad_request", "give session, or subject and timepoint");
    const auto* s = find_subject(*req.subject);
    if (!s) return error_reply(404, "unknown_subject", "no subject '" + *req.subject + "'");
    const int n = static_cast<int>(s->timepoints.size());
    if (*req.timepoint < 0 || *req.timepoint >= n)
      return error_reply(404, "unknown_timepoint", *req.subject + " has timepoints 0.." + std::to_string(n - 1), false,
                         std::array<int, 2>{0, n - 1});
    session = std::make_shared<Session>();
    session->subject = s;
    const auto& tp = s->timepoints[static_cast<std::size_t>(*req.timepoint)];
    session->volume = tp.volume;
    session->latent = model_->codec.encode(tp.volume);
    session->history.assign(s->plans.begin(), s->plans.begin() + *req.timepoint);
    session->day = tp.day;
  }
  std::lock_guard lock(mu_);
  if (session) {
    session->id = "s" + std::to_string(++counter_);
    sessions_[session->id] = session;
  } else {
    auto it = sessions_.find(*req.session);
    if (it == sessions_.end()) return error_reply(404, "unknown_session", "no session '" + *req.session + "'");
    session = it->second;
    if (session->busy)
      return error_reply(409, "session_busy", "session '" + session->id + "' already has a job running", true);
  }
  session->busy = true;
  session->touched = ++counter_;
  auto job = std::make_shared<Job>();
  job->id = "j" + std::to_string(++counter_);
  job->session = session->id;
  job->action = action;
  job->seed = req.seed;
  jobs_[job->id] = job;
  job_order_.push_back(job->id);
  ++active_;
  pool_->queue.emplace_back(job, session);
  pool_->wake.notify_one();
  evict_locked();
  return json_reply(202, wire::WhatifResponse{job->id, session->id, job->status});
}

void SandboxService::run_job(std::shared_ptr<Job> job, std::shared_ptr<Session> session) {
  LatentGrid<float> latent;
  Volume volume;
  std::vector<TreatmentPlan> history;
  {
    std::lock_guard lock(mu_);
    latent = session->latent;
    volume = session->volume;
    history = session->history;
  }
  try {
    const auto& demo = session->subject->demographics;
    auto g = generate_future(model_->model, model_->codec, latent, demo, history, job->action.plan,
                             job->action.interval_days, job->seed, opt_.sampler_steps, &volume,
                             opt_.temperature);
    history.push_back(job->action.plan);
    std::optional<std::string> suggestion;
    try {
      suggestion = predict_plan(model_->model, g.latent, demo, history).plan.key();
    } catch (const NoPlanError&) {
    }
    std::lock_guard lock(mu_);
    session->latent = g.latent;
    session->volume = g.volume;
    session->history = history;
    session->day += job->action.interval_days;
    session->day_offset += job->action.interval_days;
    ++session->steps;
    wire::JobResult r;
    r.step = session->steps;
    r.action = job->action.plan.key();
    r.interval_days = job->action.interval_days;
    r.seed = job->seed;
    r.day_offset = session->day_offset;
    r.day = session->day;
    r.suggestion = suggestion;
    r.class_voxels = class_counts(g.mask);
    r.tumor_voxels = g.mask.tumor_voxels();
    r.hash = digest(g.volume, g.mask);
    r.slices = slice_info("job=" + job->id, g.volume.shape);
    job->subject = session->subject;
    job->latent = g.latent;
    job->history = history;
    job->day = session->day;
    job->day_offset = session->day_offset;
    job->steps = session->steps;
    job->volume = std::move(g.volume);
    job->mask = std::move(g.mask);
    job->result = std::move(r);
    job->status = "done";
  } catch (const std::exception& e) {
    std::lock_guard lock(mu_);
    job->status = "failed";
    job->error = e.what();
  }
  std::lock_guard lock(mu_);
  session->busy = false;
  --active_;
  idle_.notify_all();
}

Reply SandboxService::job(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = jobs_.find(id);
  if (it == jobs_.end()) return error_reply(404, "unknown_job", "no job '" + id + "'");
  const auto& j = *it->second;
  return json_reply(200, wire::JobView{j.id, j.session, j.status, j.error, j.result});
}

void SandboxService::wait_idle() {
  std::unique_lock lock(mu_);
  idle_.wait(lock, [&] { return active_ == 0; });
}

void SandboxService::evict_locked() {
  auto finished = [&](const std::string& id) {
    auto it = jobs_.find(id);
    return it == jobs_.end() || it->second->status == "done" || it->second->status == "failed";
  };
  while (job_order_.size() > opt_.max_jobs) {
    auto victim = std::find_if(job_order_.begin(), job_order_.end(), finished);
    if (victim == job_order_.end()) break;
    jobs_.erase(*victim);
    job_order_.erase(victim);
  }
  while (suggestion_order_.size() > opt_.max_jobs) {
    suggestions_.erase(suggestion_order_.front());
    suggestion_order_.erase(suggestion_order_.begin());
  }
  while (sessions_.size() > opt_.max_sessions) {
    auto victim = sessions_.end();
    for (auto it = sessions_.begin(); it != sessions_.end(); ++it)
      if (!it->second->busy && (victim == sessions_.end() || it->second->touched < victim->second->touched))
        victim = it;
    if (victim == sessions_.end()) break;
    sessions_.erase(victim);
  }
}

void SandboxService::mount(httplib::Server& server) {
  auto send = [](httplib::Response& res, const Reply& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  server.Get("/patients", [this, send](const httplib::Request&, httplib::Response& res) { send(res, patients()); });
  server.Get(R"(/patients/([^/]+)/timepoints/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
    const auto k = parse_int(req.matches[2]);
    if (!k) return send(res, error_reply(404, "unknown_timepoint", "timepoint must be an integer"));
    send(res, timepoint(req.matches[1], *k));
  });
  server.Get("/slices", [this, send](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> q;
    for (const auto& [k, v] : req.params) q[k] = v;
    send(res, slice(q));
  });
  server.Post("/suggest", [this, send](const httplib::Request& req, httplib::Response& res) { send(res, suggest(req.body)); });
  server.Post("/whatif", [this, send](const httplib::Request& req, httplib::Response& res) { send(res, whatif(req.body)); });
  server.Get(R"(/jobs/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, job(req.matches[1]));
  });
  server.set_error_handler([send](const httplib::Request& req, httplib::Response& res) {
    if (res.body.empty() && res.status == 404) send(res, error_reply(404, "not_found", "no route " + req.path));
  });
  server.set_exception_handler([send](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    send(res, error_reply(500, "internal", what));
  });
}

}  // namespace bwm
