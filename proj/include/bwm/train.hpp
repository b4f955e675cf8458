#pragma once

#include "bwm/cohort.hpp"
#include "bwm/model.hpp"
#include "bwm/tokenizer.hpp"

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace bwm {

// Which objectives a run optimizes; the ablation harness toggles these.
enum class TrainMode { unified, plan_only, img_only };

std::string_view mode_name(TrainMode m);
TrainMode mode_from_name(std::string_view s);

struct TrainConfig {
  double lr = 1e-3;
  std::map<std::string, double> group_lr;  // overrides per parameter group
  int warmup_steps = 50;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
  int batch = 1;
  int steps = 5000;
  double p_plan = 0.5;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::unified;
  int log_every = 100;
  bool cosine = false;  // cosine decay to zero over `steps` after warmup
  // Each training item is seen in one of this many cube symmetries, drawn
  // uniformly: 1 (as is), 8 (mirrors) or 48 (mirrors and axis permutations).
  int orientations = 1;

  double group_rate(const std::string& group) const {
    auto it = group_lr.find(group);
    return it == group_lr.end() ? lr : it->second;
  }
  void validate() const;
};

// Everything read from a key=value config file.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::uint64_t model_seed = 0;
};

// Parses "key = value" lines; '#' starts a comment. Unknown keys are errors.
RunConfig parse_run_config(std::istream& in);
RunConfig load_run_config(const std::filesystem::path& path);
std::string format_run_config(const RunConfig& cfg);

// Linear warmup factor for the 1-based optimizer step.
double warmup_factor(int step, int warmup_steps);
// Warmup times, with cfg.cosine, a half-cosine from 1 to 0 over the remaining steps.
double schedule_factor(int step, const TrainConfig& cfg);

// Per-timepoint data with the volume already encoded by the frozen codec.
template <typename Scalar>
struct PreparedTimepoint {
  int day = 0;
  LatentGrid<Scalar> latent;
  Matrix<Scalar> mask;  // voxels x 4 one-hot
  long tumor_voxels = 0;
  Volume volume;        // source scan and labels, kept for mirrored views
  SegMask seg;
};

template <typename Scalar>
struct PreparedSubject {
  std::string id;
  Demographics demographics;
  std::vector<TreatmentPlan> plans;
  std::vector<PreparedTimepoint<Scalar>> timepoints;
};

struct Example {
  int subject = 0;
  TrainingPair pair;
};

template <typename Scalar>
struct Dataset {
  std::vector<PreparedSubject<Scalar>> subjects;
  std::vector<Example> examples;

  const PreparedSubject<Scalar>& subject_of(const Example& e) const {
    return subjects.at(static_cast<std::size_t>(e.subject));
  }
};

template <typename Scalar>
Dataset<Scalar> prepare_dataset(const std::vector<PatientTrajectory>& cohort, const PatchCodec<Scalar>& codec);

// Token ids of the planning query and of its answer (plan tokens then EOS).
std::vector<int> plan_query_ids(const Demographics& demo, const std::vector<TreatmentPlan>& history);
std::vector<int> img_context_ids(const Demographics& demo, const std::vector<TreatmentPlan>& history,
                                 const TreatmentPlan& plan, int interval_days);

template <typename Scalar>
struct LossTerms {
  ad::Var<Scalar> total;
  ad::Var<Scalar> main;    // NLL or weighted MSE
  ad::Var<Scalar> focal;   // unweighted; invalid when alignment is off
  ad::Var<Scalar> dice;
  ad::Var<Scalar> logits;  // plan: answer-position logits; img: velocity
  ad::Var<Scalar> align_logits;
  double alpha = 0;
  double t = 0;
};

// Mean next-token NLL over the answer plus alignment with the current mask (alpha = 1).
template <typename Scalar>
LossTerms<Scalar> plan_loss(const WorldModel<Scalar>& model, ParamBinder<Scalar>& bind,
                            const PreparedTimepoint<Scalar>& current, const std::vector<int>& query,
                            const TreatmentPlan& target);

// lambda * MSE(v, z1 - z0) plus alpha(t)-weighted alignment with the future
// mask, where z1 = z(future) - z(current) is the latent displacement.
template <typename Scalar>
LossTerms<Scalar> img_loss(const WorldModel<Scalar>& model, ParamBinder<Scalar>& bind,
                           const PreparedTimepoint<Scalar>& current, const PreparedTimepoint<Scalar>& future,
                           const std::vector<int>& context, Scalar t, const Matrix<Scalar>& z0);

template <typename Scalar>
LossTerms<Scalar> plan_loss(const WorldModel<Scalar>& model, ParamBinder<Scalar>& bind, const Dataset<Scalar>& data,
                            const Example& ex);
template <typename Scalar>
LossTerms<Scalar> img_loss(const WorldModel<Scalar>& model, ParamBinder<Scalar>& bind, const Dataset<Scalar>& data,
                           const Example& ex, Scalar t, const Matrix<Scalar>& z0);

// Decoupled-weight-decay Adam with per-group rates and linear warmup.
template <typename Scalar>
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const ParamStore<Scalar>& store);

  // Applies one update from the gradients in `store`; returns the pre-clip
  // global gradient norm.
  double step(ParamStore<Scalar>& store, const TrainConfig& cfg);
  int steps() const { return step_; }
  // Warmup factor applied by the most recent step.
  double lr_factor() const { return factor_; }

  std::vector<Matrix<Scalar>>& first() { return m_; }
  std::vector<Matrix<Scalar>>& second() { return v_; }
  const std::vector<Matrix<Scalar>>& first() const { return m_; }
  const std::vector<Matrix<Scalar>>& second() const { return v_; }
  void set_steps(int s) { step_ = s; }

 private:
  std::vector<Matrix<Scalar>> m_, v_;
  int step_ = 0;
  double factor_ = 0;
};

struct StepLog {
  int step = 0;
  Task task = Task::plan;
  double loss = 0;
  double main = 0;
  double focal = 0;
  double dice = 0;
  double grad_norm = 0;
  double lr = 0;
};

std::string format_log(const StepLog& s);

template <typename Scalar>
struct TrainState {
  WorldModel<Scalar> model;
  AdamW<Scalar> optimizer;
  PatchCodec<Scalar> codec;
  TrainConfig config;
  int step = 0;
};

template <typename Scalar>
TrainState<Scalar> init_state(const RunConfig& cfg, PatchCodec<Scalar> codec);
// As above; a zero model.flow_scale is first replaced by estimate_flow_scale(data).
template <typename Scalar>
TrainState<Scalar> init_state(RunConfig cfg, PatchCodec<Scalar> codec, const Dataset<Scalar>& data);

// RMS of the latent displacement over the dense pairs of `data`.
template <typename Scalar>
double estimate_flow_scale(const Dataset<Scalar>& data);

// Deterministic per-step generator: depends only on (seed, step).
std::mt19937_64 step_rng(std::uint64_t seed, int step);

// One optimizer step on a task drawn per the run mode.
template <typename Scalar>
StepLog train_step(TrainState<Scalar>& state, const Dataset<Scalar>& data);

// Runs until state.step == state.config.steps, calling `log` per step.
template <typename Scalar>
void train(TrainState<Scalar>& state, const Dataset<Scalar>& data, const std::function<void(const StepLog&)>& log = {});

// Binary checkpoint: magic, version, embedded JSON config, codec, parameters
// and optimizer moments stored as float64.
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const TrainState<Scalar>& state);

// Throws when the file is corrupt, has another version, or (if `expect` is
// given) was trained for a different grid or patch size.
template <typename Scalar>
TrainState<Scalar> load_checkpoint(const std::filesystem::path& path, const ModelConfig* expect = nullptr);

}  // namespace bwm
