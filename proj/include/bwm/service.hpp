#pragma once

// HTTP what-if sandbox over a trained checkpoint and a cohort directory.
//
//   GET  /patients                         -> [PatientSummary]
//   GET  /patients/{id}/timepoints/{k}     -> TimepointState
//   GET  /slices?...                       -> image/png
//        source: subject=<id>&tp=<k> | job=<id> | suggestion=<id>
//        channel=0..2|FLAIR|T1CE|T2W  axis=axial|coronal|sagittal  index=<n>  overlay=0|1
//   POST /suggest   SuggestRequest         -> SuggestResponse
//   POST /whatif    WhatifRequest          -> WhatifResponse (202)
//   GET  /jobs/{id}                        -> JobView
//
// Errors are ErrorPayload bodies with a 4xx/5xx status.

#include "bwm/cohort.hpp"
#include "bwm/infer.hpp"
#include "bwm/train.hpp"

#include <json.hpp>

#include <array>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace httplib {
class Server;
}

namespace bwm {

namespace wire {

struct ErrorPayload {
  std::string error;  // machine-readable code
  std::string message;
  bool retryable = false;
  std::optional<std::array<int, 2>> valid_range;  // inclusive, for out-of-range indices
};

struct PatientSummary {
  std::string id;
  std::string sex;
  int age = 0;
  int grade = 0;
  std::string split;  // "train", "val" or ""
  int timepoints = 0;
  std::vector<int> days;
  std::vector<std::string> plans;  // plans[i] given between timepoints i and i+1
};

struct SliceInfo {
  std::string base;               // /slices?<source>; append &channel=&axis=&index=&overlay=
  std::array<int, 3> counts{};    // axial, coronal, sagittal
};

struct TimepointState {
  std::string subject;
  int index = 0;
  int day = 0;
  std::vector<std::string> history;     // plans before this timepoint
  std::optional<std::string> next_plan; // plan given after it, if any
  std::array<long, 3> class_voxels{};   // ED, ET, NET
  long tumor_voxels = 0;
  SliceInfo slices;
};

struct SuggestRequest {
  std::optional<std::string> session;
  std::optional<std::string> subject;
  std::optional<int> timepoint;
};

struct TokenScore {
  std::string token;  // planning token or "EOS"
  double logit = 0;
};

struct SuggestResponse {
  std::string id;
  std::optional<std::string> plan;  // "SUR+CRT"; absent when decoding produced no plan
  std::string plan_text;            // "[SUR] + [CRT]" or ""
  std::vector<std::vector<TokenScore>> steps;
  SliceInfo mask;  // current volume with the aligner mask
};

// Start state, first match wins: `session` continues that session's
// trajectory; `branch` opens a new session at a finished job's state;
// otherwise `subject` + `timepoint` opens one at an observed scan.
struct WhatifRequest {
  std::optional<std::string> session;
  std::optional<std::string> branch;
  std::optional<std::string> subject;
  std::optional<int> timepoint;
  std::string action;
  int interval_days = 0;
  std::uint64_t seed = 0;
};

struct WhatifResponse {
  std::string job;
  std::string session;
  std::string status;
};

struct JobResult {
  int step = 0;  // 1-based position in the session trajectory
  std::string action;
  int interval_days = 0;
  std::uint64_t seed = 0;
  int day_offset = 0;  // cumulative days since the session's start state
  int day = 0;
  std::optional<std::string> suggestion;
  std::array<long, 3> class_voxels{};
  long tumor_voxels = 0;
  std::string hash;  // digest of the generated volume and mask
  SliceInfo slices;
};

struct JobView {
  std::string job;
  std::string session;
  std::string status;  // queued | running | done | failed
  std::optional<std::string> error;
  std::optional<JobResult> result;
};

#define BWM_WIRE(T)                         \
  void to_json(nlohmann::json& j, const T& v); \
  void from_json(const nlohmann::json& j, T& v);
BWM_WIRE(ErrorPayload)
BWM_WIRE(PatientSummary)
BWM_WIRE(SliceInfo)
BWM_WIRE(TimepointState)
BWM_WIRE(SuggestRequest)
BWM_WIRE(TokenScore)
BWM_WIRE(SuggestResponse)
BWM_WIRE(WhatifRequest)
BWM_WIRE(WhatifResponse)
BWM_WIRE(JobResult)
BWM_WIRE(JobView)
#undef BWM_WIRE

}  // namespace wire

struct Reply {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

struct ServiceOptions {
  int sampler_steps = 0;      // 0: checkpoint default
  double temperature = 1;
  std::size_t max_sessions = 64;
  std::size_t max_jobs = 256; // finished jobs beyond this are evicted oldest first
};

class SandboxService {
 public:
  // `model` may be empty: read-only endpoints still work, the model ones
  // answer 503 model_not_loaded.
  SandboxService(std::vector<PatientTrajectory> cohort, std::optional<TrainState<float>> model,
                 ServiceOptions opt = {}, std::vector<std::string> val_ids = {});
  ~SandboxService();
  SandboxService(const SandboxService&) = delete;
  SandboxService& operator=(const SandboxService&) = delete;

  // BWM_COHORT (required) and BWM_CHECKPOINT (optional).
  static std::unique_ptr<SandboxService> from_env(ServiceOptions opt = {});

  Reply patients() const;
  Reply timepoint(const std::string& subject, int k) const;
  Reply slice(const std::map<std::string, std::string>& query) const;
  Reply suggest(const std::string& body);
  Reply whatif(const std::string& body);
  Reply job(const std::string& id) const;

  void mount(httplib::Server& server);

  // Blocks until no job is queued or running.
  void wait_idle();

 private:
  struct Session;
  struct Job;
  struct Suggestion;
  struct Pool;

  const PatientTrajectory* find_subject(const std::string& id) const;
  void run_job(std::shared_ptr<Job> job, std::shared_ptr<Session> session);
  void evict_locked();

  std::vector<PatientTrajectory> cohort_;
  std::vector<std::string> val_ids_;
  std::optional<TrainState<float>> model_;
  ServiceOptions opt_;

  mutable std::mutex mu_;
  std::condition_variable idle_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::map<std::string, std::shared_ptr<Job>> jobs_;
  std::map<std::string, std::shared_ptr<Suggestion>> suggestions_;
  std::vector<std::string> job_order_, suggestion_order_;
  std::unique_ptr<Pool> pool_;
  std::vector<std::thread> workers_;
  std::uint64_t counter_ = 0;
  int active_ = 0;
};

// Channel by index or name (FLAIR, T1CE, T2W).
int channel_from_name(const std::string& s);

}  // namespace bwm
