#pragma once

#include "bwm/model.hpp"
#include "bwm/train.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

namespace bwm {

class NoPlanError : public std::runtime_error {
 public:
  NoPlanError() : std::runtime_error("no-plan: decoding produced no planning token before EOS") {}
};

// Greedy pick among the planning ids not yet emitted plus EOS; ties go to the
// lowest id.
int constrained_argmax(const Eigen::Ref<const Eigen::RowVectorXd>& logits, const std::vector<int>& emitted);

struct PlanPrediction {
  TreatmentPlan plan;
  std::vector<int> ids;                     // decoded ids, EOS excluded
  std::vector<Eigen::RowVectorXd> logits;   // full-vocabulary logits per decode step
  SegMask mask;                             // aligner argmax on the current scan
};

template <typename Scalar>
PlanPrediction predict_plan(const WorldModel<Scalar>& model, const LatentGrid<Scalar>& current,
                            const Demographics& demo, const std::vector<TreatmentPlan>& history);

// z <- z + v(z, t_k) / steps with t_k = k / steps, k = 0 .. steps-1.
template <typename Scalar, typename Field>
Matrix<Scalar> euler_integrate(Matrix<Scalar> z, Field&& velocity, int steps) {
  if (steps < 1) throw std::invalid_argument("euler_integrate: steps must be >= 1");
  const Scalar dt = Scalar(1) / static_cast<Scalar>(steps);
  for (int k = 0; k < steps; ++k) {
    const Scalar t = static_cast<Scalar>(k) / static_cast<Scalar>(steps);
    z += dt * velocity(static_cast<const Matrix<Scalar>&>(z), t);
    if (!z.allFinite()) throw std::runtime_error("euler_integrate: non-finite state at step " + std::to_string(k));
  }
  return z;
}

template <typename Scalar>
struct Generation {
  LatentGrid<Scalar> latent;
  Volume volume;
  SegMask mask;  // focused mask: aligner argmax at the final (lowest-noise) Euler step
};

// With `scan` (the volume `current` was encoded from) the decoded future keeps
// the scan's detail outside the codec subspace: scan + D(z) - D(current).
// Without it the future is D(z). Either way intensities are clamped to [-1, 1].
// `temperature` scales the initial noise; 0 integrates from the origin, which
// gives the deterministic, mean-like sample.
template <typename Scalar>
Generation<Scalar> generate_future(const WorldModel<Scalar>& model, const PatchCodec<Scalar>& codec,
                                   const LatentGrid<Scalar>& current, const Demographics& demo,
                                   const std::vector<TreatmentPlan>& history, const TreatmentPlan& plan,
                                   int interval_days, std::uint64_t seed, int steps = 0,
                                   const Volume* scan = nullptr, double temperature = 1.0);

struct Action {
  TreatmentPlan plan;
  int interval_days = 0;
};

// "SUR+CRT:92,AM:60"
std::vector<Action> parse_actions(std::string_view text);

template <typename Scalar>
struct RolloutStep {
  Action action;
  int day = 0;  // cumulative day offset after the action
  Generation<Scalar> state;
  std::optional<TreatmentPlan> suggestion;  // model's next plan from the generated state
};

// Chains generate_future, feeding each generated latent (and volume, when a
// start scan is given) back as the current state. Step k samples with seed + k.
template <typename Scalar>
std::vector<RolloutStep<Scalar>> rollout(const WorldModel<Scalar>& model, const PatchCodec<Scalar>& codec,
                                         const LatentGrid<Scalar>& start, int start_day, const Demographics& demo,
                                         std::vector<TreatmentPlan> history, const std::vector<Action>& actions,
                                         std::uint64_t seed, int steps = 0, const Volume* start_scan = nullptr,
                                         double temperature = 1.0);

// Voxel-wise argmax of aligner logits as a mask.
template <typename Scalar>
SegMask mask_from_logits(const Matrix<Scalar>& logits, Shape3 shape);

}  // namespace bwm
