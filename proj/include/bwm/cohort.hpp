#pragma once

#include "bwm/grid.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace bwm {

enum class TreatmentToken : int { SUR = 0, CRT = 1, RT = 2, TMZ = 3, AM = 4 };

inline constexpr std::array<TreatmentToken, 5> kAllTreatments = {TreatmentToken::SUR, TreatmentToken::CRT,
                                                                  TreatmentToken::RT, TreatmentToken::TMZ,
                                                                  TreatmentToken::AM};

std::string_view token_name(TreatmentToken t);
std::optional<TreatmentToken> token_from_name(std::string_view name);

// Non-empty set of treatment tokens, always iterated in SUR < CRT < RT < TMZ < AM order.
class TreatmentPlan {
 public:
  TreatmentPlan() = default;
  TreatmentPlan(std::initializer_list<TreatmentToken> tokens);

  static TreatmentPlan from_bits(std::uint8_t bits);
  // Parses "SUR+CRT" (brackets optional); throws std::invalid_argument on unknown names.
  static TreatmentPlan parse(std::string_view text);

  bool empty() const { return bits_ == 0; }
  bool contains(TreatmentToken t) const { return (bits_ >> static_cast<int>(t)) & 1u; }
  void insert(TreatmentToken t) { bits_ |= static_cast<std::uint8_t>(1u << static_cast<int>(t)); }
  std::size_t size() const;
  std::vector<TreatmentToken> tokens() const;
  std::uint8_t bits() const { return bits_; }

  TreatmentPlan& operator|=(const TreatmentPlan& o) {
    bits_ |= o.bits_;
    return *this;
  }
  bool operator==(const TreatmentPlan&) const = default;
  auto operator<=>(const TreatmentPlan& o) const { return bits_ <=> o.bits_; }

  // "[SUR] + [CRT]"
  std::string render() const;
  // "SUR+CRT"
  std::string key() const;

 private:
  std::uint8_t bits_ = 0;
};

enum class Sex { female, male };

struct Demographics {
  Sex sex = Sex::female;
  int age = 60;
  int grade = 4;
};

// Per-channel affine window fitted on a subject's baseline scan.
struct IntensityWindow {
  std::array<float, Volume::kChannels> lo{};
  std::array<float, Volume::kChannels> hi{};
};

// Raw (pre-normalization) intensity grid, one row per channel.
struct RawVolume {
  Shape3 shape;
  Eigen::ArrayXXf data;
};

struct Vec3 {
  double z = 0, y = 0, x = 0;
};

// Static head anatomy of a phantom subject.
struct Anatomy {
  Vec3 brain_center;
  Vec3 brain_radii;
  Vec3 ventricle_center;
  Vec3 ventricle_radii;
  std::array<double, 3> texture_phase{};
  double texture_freq = 0.3;
};

// Concentric-sphere tumor: NET core of radius `core`, ET shell of thickness
// `shell`, ED halo of thickness `halo`, plus an optional resection cavity.
struct TumorState {
  Vec3 center;
  double core = 0;
  double shell = 0;
  double halo = 0;
  Vec3 cavity_center;
  double cavity_radius = 0;

  double enhancing_radius() const { return core + shell; }
  double outer_radius() const { return core + shell + halo; }
};

struct Phantom {
  Anatomy anatomy;
  TumorState tumor;
  IntensityWindow window;
};

struct Timepoint {
  int day = 0;
  Volume volume;
  SegMask mask;
  Phantom phantom;
};

struct PatientTrajectory {
  std::string subject_id;
  Demographics demographics;
  std::vector<Timepoint> timepoints;
  std::vector<TreatmentPlan> plans;  // plans[i] administered between timepoints[i] and [i+1]
};

struct TrainingPair {
  std::string subject_id;
  int source = 0;
  int target = 0;
  int interval_days = 0;
  TreatmentPlan plan_between;
  TreatmentPlan next_plan;  // plan administered right after the source timepoint
  std::vector<TreatmentPlan> history;
};

struct DynamicsParams {
  double growth_rate = 0.02;       // outer radius growth per day under AM
  double shrink_rate = 0.012;      // ET/NET shrink per day under TMZ
  double edema_shrink_rate = 0.01; // ED shrink per day under CRT
  double resection_fraction = 0.9; // resection radius relative to the ET radius
  double noise_sigma = 8.0;        // raw-intensity noise per scan
  double max_radius = 12.0;
};

struct CohortConfig {
  int subjects = 8;
  Shape3 grid{32, 32, 32};
  int patch = 4;
  int min_timepoints = 2;
  int max_timepoints = 5;
  DynamicsParams dynamics;
};

void validate(const CohortConfig& cfg);

// Deterministic synthetic cohort for `seed`.
std::vector<PatientTrajectory> generate_cohort(std::uint64_t seed, const CohortConfig& cfg);

// Ground-truth next state after administering `plan` for `interval_days` days.
Timepoint evolve_state(const Timepoint& tp, const TreatmentPlan& plan, int interval_days, const DynamicsParams& dyn,
                       std::mt19937_64& rng);

// Rule-based treatment policy used to label trajectories.
TreatmentPlan reference_policy(const Demographics& demo, const std::vector<TreatmentPlan>& history,
                               const TumorState& tumor);

TumorState advance_tumor(const TumorState& tumor, const TreatmentPlan& plan, int interval_days,
                         const DynamicsParams& dyn);

// Paints raw intensities (with seeded noise) and the matching label mask.
std::pair<RawVolume, SegMask> paint_phantom(Shape3 shape, const Anatomy& anatomy, const TumorState& tumor,
                                            double noise_sigma, std::mt19937_64& rng);
SegMask paint_labels(Shape3 shape, const Anatomy& anatomy, const TumorState& tumor);

// Linear-interpolated percentile (q in [0, 100]) of the values.
float percentile(std::vector<float> values, double q);

IntensityWindow fit_intensity_window(const RawVolume& raw, double lo_pct = 1.0, double hi_pct = 99.0);
Volume apply_intensity_window(const RawVolume& raw, const IntensityWindow& window);
// Per-channel (p1, p99) clip followed by an affine map onto [-1, 1]; a
// constant channel maps to zeros.
Volume normalize_intensities(const RawVolume& raw);

std::vector<TrainingPair> make_pairs(const PatientTrajectory& traj);

struct CohortSplit {
  std::vector<PatientTrajectory> train;
  std::vector<PatientTrajectory> val;
};
CohortSplit split_cohort(const std::vector<PatientTrajectory>& cohort, double ratio, std::uint64_t seed);

// On-disk cohort: manifest.json plus little-endian float32 volume/mask files.
struct CohortManifestInfo {
  std::uint64_t seed = 0;
  CohortConfig config;
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
};

void save_cohort(const std::filesystem::path& dir, const std::vector<PatientTrajectory>& cohort,
                 const CohortManifestInfo& info);
std::vector<PatientTrajectory> load_cohort(const std::filesystem::path& dir, CohortManifestInfo* info = nullptr);

// Subjects of `cohort` whose ids are in `ids`, in cohort order.
std::vector<PatientTrajectory> select_subjects(const std::vector<PatientTrajectory>& cohort,
                                               const std::vector<std::string>& ids);

// Voxel centroid (z, y, x) of all tumor-class voxels; nullopt when there are none.
std::optional<Vec3> tumor_centroid(const SegMask& mask);

}  // namespace bwm
