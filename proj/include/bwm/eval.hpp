#pragma once

#include "bwm/cohort.hpp"
#include "bwm/grid.hpp"
#include "bwm/infer.hpp"

#include <json.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace bwm {

inline constexpr double kPsnrCap = 100.0;
inline constexpr int kSsimWindow = 7;

// 100 * |xhat - x|^2 / |x|^2 over one channel (or all channels when channel < 0).
double nmse(const Volume& pred, const Volume& ref, int channel = -1);

// Intensities mapped from [-1, 1] to [0, 1], data range 1; capped at kPsnrCap.
double psnr(const Volume& pred, const Volume& ref, int channel = -1);

// 3-D SSIM with a 7^3 uniform window over valid positions, K1 = 0.01, K2 =
// 0.03, on [0, 1]-mapped intensities; population statistics. channel < 0
// averages the channels.
double ssim(const Volume& pred, const Volume& ref, int channel = -1);

struct PlanMetrics {
  double accuracy = 0;
  double f1 = 0;
  double specificity = 0;
  double precision = 0;
  std::vector<std::string> classes;     // reference classes, canonical keys
  std::vector<std::string> unexpected;  // predicted classes absent from references
  int items = 0;
};

// Multi-class over canonical plan sets; macro one-vs-rest averages in percent.
PlanMetrics plan_metrics(const std::vector<TreatmentPlan>& predicted, const std::vector<TreatmentPlan>& reference);

std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y);

struct FocusItem {
  double focused = 0;  // aligner focused-region volume (voxels)
  double truth = 0;    // ground-truth tumor volume (voxels)
  int interval_days = 0;
  TreatmentPlan plan;
};

std::string interval_bucket(int days);

struct FocusCorrelation {
  std::optional<double> overall;
  std::map<std::string, std::optional<double>> by_interval;
  std::map<std::string, std::optional<double>> by_treatment;
  std::map<std::string, int> counts;
};

// Pearson r overall and per stratum; strata with fewer than `min_items` pairs
// or zero variance are reported as absent.
FocusCorrelation focus_correlation(const std::vector<FocusItem>& items, int min_items = 3);

struct PairResult {
  std::string subject_id;
  int source = 0, target = 0, interval_days = 0;
  TreatmentPlan plan;
  std::array<double, 3> nmse{}, psnr{}, ssim{};
  std::array<double, 3> baseline_nmse{};  // copy-current-volume predictor
  long focused_voxels = 0;
  long true_voxels = 0;
};

struct PlanResult {
  std::string subject_id;
  int source = 0;
  TreatmentPlan reference;
  std::optional<TreatmentPlan> predicted;
};

struct EvalOptions {
  std::uint64_t seed = 0;
  int sampler_steps = 0;   // 0: model default
  int max_pairs = -1;      // < 0: all pairs
  double temperature = 1;  // initial-noise scale for generation
  bool generation = true;
  bool planning = true;
};

struct EvalReport {
  std::vector<PairResult> pairs;
  std::vector<PlanResult> plans;
  std::optional<PlanMetrics> planning;
  FocusCorrelation correlation;

  double mean_nmse(int channel) const;
  double mean_baseline_nmse(int channel) const;
  nlohmann::json to_json() const;
  // Plain-text tables: generation (mean ± std per sequence), planning,
  // focus correlation.
  std::string to_text() const;
};

template <typename Scalar>
EvalReport evaluate(const WorldModel<Scalar>& model, const PatchCodec<Scalar>& codec,
                    const std::vector<PatientTrajectory>& subjects, const EvalOptions& opt);

inline constexpr std::array<const char*, 3> kChannelNames = {"FLAIR", "T1CE", "T2W"};

}  // namespace bwm
