#pragma once

// Property checks shared by the unit tests and the acceptance binary. Each
// returns pass/fail plus a one-line measurement.

#include "bwm/eval.hpp"
#include "bwm/model.hpp"
#include "bwm/train.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace bwm::props {

struct Check {
  bool pass = false;
  std::string detail;
};

// Tolerances of the acceptance criteria.
inline constexpr double kGradRelTol = 1e-4;
inline constexpr double kFocalCeRelTol = 1e-10;
inline constexpr double kDicePerfectTol = 1e-6;  // eps-smoothing leaves ~eps/|m|
inline constexpr double kDiceThirdTol = 1e-6;
inline constexpr double kEulerExactTol = 1e-12;
inline constexpr double kEulerRatio = 4.0;
inline constexpr double kMetricRelTol = 1e-6;

// N = 2, d = 8 model on an 8^3 volume with 4 latent channels, plus one
// planning and one imaging example on random latents and masks.
struct MicroProblem {
  WorldModel<double> model;
  PreparedTimepoint<double> current, future;
  std::vector<int> query, context;
  TreatmentPlan target;
  double t = 0.7;
  Matrix<double> z0;
};

ModelConfig micro_config();
MicroProblem micro_problem(std::uint64_t seed = 3);

enum class LossKind { plan, img };
double micro_loss(const MicroProblem& p, LossKind kind);
// Analytic gradient of the chosen loss, one matrix per parameter (in store order).
std::vector<Matrix<double>> micro_gradients(const MicroProblem& p, LossKind kind);

struct GroupError {
  double rel = 0;      // |g_a - g_fd| / max(|g_a|, |g_fd|), 0 when both vanish
  double norm = 0;     // |g_a|
  long entries = 0;
};
// Central differences over every trainable entry, aggregated per group.
std::map<std::string, GroupError> gradient_errors(MicroProblem& p, LossKind kind, double h = 1e-6);

Check mask_enumeration(int max_length = 12, int max_subset = 4);
Check causality(std::uint64_t seed = 11);
Check gradient_fidelity();
Check loss_identities();
Check euler();
Check parameter_partition();
Check metric_oracles(int trials = 50, std::uint64_t seed = 5);

// AM vs SUR under identical state/seed for each val pair; the expected sign of
// the tumor-volume difference comes from advance_tumor on the source phantom.
struct Counterfactual {
  int agree = 0;
  int pairs = 0;    // pairs where the oracle separates the two actions
  int skipped = 0;  // oracle tie (e.g. no tumor left)
};
Counterfactual counterfactual(const TrainState<float>& st, const std::vector<PatientTrajectory>& subjects,
                              const DynamicsParams& dyn, double temperature, std::uint64_t seed);

}  // namespace bwm::props
