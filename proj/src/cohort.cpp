#include "bwm/cohort.hpp"

#include "bwm/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace bwm {

namespace {

constexpr std::array<std::string_view, 5> kTokenNames = {"SUR", "CRT", "RT", "TMZ", "AM"};

// Raw signatures per tissue class: FLAIR-like, T1CE-like, T2W-like.
struct Signature {
  float flair, t1ce, t2w;
};
constexpr Signature kBackground{0.f, 0.f, 0.f};
constexpr Signature kTissue{400.f, 350.f, 300.f};
constexpr Signature kCsf{150.f, 120.f, 700.f};
constexpr Signature kEdema{760.f, 330.f, 620.f};
constexpr Signature kEnhancing{600.f, 820.f, 520.f};
constexpr Signature kNonEnhancing{470.f, 200.f, 660.f};
constexpr Signature kCavity{110.f, 90.f, 760.f};
constexpr float kTextureAmplitude = 25.f;

double sq(double v) { return v * v; }

double dist(const Vec3& a, double z, double y, double x) {
  return std::sqrt(sq(a.z - z) + sq(a.y - y) + sq(a.x - x));
}

bool inside_ellipsoid(const Vec3& c, const Vec3& r, double z, double y, double x) {
  return sq((z - c.z) / r.z) + sq((y - c.y) / r.y) + sq((x - c.x) / r.x) < 1.0;
}

enum class Region { background, tissue, csf, edema, enhancing, non_enhancing, cavity };

Region classify(const Anatomy& a, const TumorState& t, double z, double y, double x) {
  if (!inside_ellipsoid(a.brain_center, a.brain_radii, z, y, x)) return Region::background;
  if (t.cavity_radius > 0 && dist(t.cavity_center, z, y, x) < t.cavity_radius) return Region::cavity;
  const double d = dist(t.center, z, y, x);
  if (d < t.core) return Region::non_enhancing;
  if (d < t.core + t.shell) return Region::enhancing;
  if (d < t.outer_radius()) return Region::edema;
  if (inside_ellipsoid(a.ventricle_center, a.ventricle_radii, z, y, x)) return Region::csf;
  return Region::tissue;
}

int label_of(Region r) {
  switch (r) {
    case Region::edema: return static_cast<int>(SegClass::edema);
    case Region::enhancing: return static_cast<int>(SegClass::enhancing);
    case Region::non_enhancing: return static_cast<int>(SegClass::non_enhancing);
    default: return static_cast<int>(SegClass::background);
  }
}

Signature signature_of(Region r) {
  switch (r) {
    case Region::background: return kBackground;
    case Region::tissue: return kTissue;
    case Region::csf: return kCsf;
    case Region::edema: return kEdema;
    case Region::enhancing: return kEnhancing;
    case Region::non_enhancing: return kNonEnhancing;
    case Region::cavity: return kCavity;
  }
  return kBackground;
}

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

int sample_interval(const TreatmentPlan& plan, std::mt19937_64& rng) {
  if (plan.contains(TreatmentToken::SUR) && plan.size() == 1) return uniform_int(rng, 3, 30);
  return uniform_int(rng, 30, 150);
}

nlohmann::json vec_json(const Vec3& v) { return nlohmann::json::array({v.z, v.y, v.x}); }
Vec3 vec_from(const nlohmann::json& j) { return Vec3{j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

nlohmann::json phantom_json(const Phantom& p) {
  nlohmann::json j;
  j["anatomy"] = {{"brain_center", vec_json(p.anatomy.brain_center)},
                  {"brain_radii", vec_json(p.anatomy.brain_radii)},
                  {"ventricle_center", vec_json(p.anatomy.ventricle_center)},
                  {"ventricle_radii", vec_json(p.anatomy.ventricle_radii)},
                  {"texture_phase", p.anatomy.texture_phase},
                  {"texture_freq", p.anatomy.texture_freq}};
  j["tumor"] = {{"center", vec_json(p.tumor.center)},
                {"core", p.tumor.core},
                {"shell", p.tumor.shell},
                {"halo", p.tumor.halo},
                {"cavity_center", vec_json(p.tumor.cavity_center)},
                {"cavity_radius", p.tumor.cavity_radius}};
  j["window"] = {{"lo", p.window.lo}, {"hi", p.window.hi}};
  return j;
}

Phantom phantom_from(const nlohmann::json& j) {
  Phantom p;
  const auto& a = j.at("anatomy");
  p.anatomy.brain_center = vec_from(a.at("brain_center"));
  p.anatomy.brain_radii = vec_from(a.at("brain_radii"));
  p.anatomy.ventricle_center = vec_from(a.at("ventricle_center"));
  p.anatomy.ventricle_radii = vec_from(a.at("ventricle_radii"));
  p.anatomy.texture_phase = a.at("texture_phase").get<std::array<double, 3>>();
  p.anatomy.texture_freq = a.at("texture_freq").get<double>();
  const auto& t = j.at("tumor");
  p.tumor.center = vec_from(t.at("center"));
  p.tumor.core = t.at("core").get<double>();
  p.tumor.shell = t.at("shell").get<double>();
  p.tumor.halo = t.at("halo").get<double>();
  p.tumor.cavity_center = vec_from(t.at("cavity_center"));
  p.tumor.cavity_radius = t.at("cavity_radius").get<double>();
  p.window.lo = j.at("window").at("lo").get<std::array<float, 3>>();
  p.window.hi = j.at("window").at("hi").get<std::array<float, 3>>();
  return p;
}

nlohmann::json config_json(const CohortConfig& c) {
  return {{"subjects", c.subjects},
          {"grid", {c.grid.depth, c.grid.height, c.grid.width}},
          {"patch", c.patch},
          {"min_timepoints", c.min_timepoints},
          {"max_timepoints", c.max_timepoints},
          {"dynamics",
           {{"growth_rate", c.dynamics.growth_rate},
            {"shrink_rate", c.dynamics.shrink_rate},
            {"edema_shrink_rate", c.dynamics.edema_shrink_rate},
            {"resection_fraction", c.dynamics.resection_fraction},
            {"noise_sigma", c.dynamics.noise_sigma},
            {"max_radius", c.dynamics.max_radius}}}};
}

CohortConfig config_from(const nlohmann::json& j) {
  CohortConfig c;
  c.subjects = j.at("subjects").get<int>();
  c.grid = Shape3{j.at("grid").at(0).get<int>(), j.at("grid").at(1).get<int>(), j.at("grid").at(2).get<int>()};
  c.patch = j.at("patch").get<int>();
  c.min_timepoints = j.at("min_timepoints").get<int>();
  c.max_timepoints = j.at("max_timepoints").get<int>();
  const auto& d = j.at("dynamics");
  c.dynamics.growth_rate = d.at("growth_rate").get<double>();
  c.dynamics.shrink_rate = d.at("shrink_rate").get<double>();
  c.dynamics.edema_shrink_rate = d.at("edema_shrink_rate").get<double>();
  c.dynamics.resection_fraction = d.at("resection_fraction").get<double>();
  c.dynamics.noise_sigma = d.at("noise_sigma").get<double>();
  c.dynamics.max_radius = d.at("max_radius").get<double>();
  return c;
}

}  // namespace

std::string_view token_name(TreatmentToken t) { return kTokenNames[static_cast<std::size_t>(t)]; }

std::optional<TreatmentToken> token_from_name(std::string_view name) {
  if (name.size() >= 2 && name.front() == '[' && name.back() == ']') name = name.substr(1, name.size() - 2);
  for (std::size_t i = 0; i < kTokenNames.size(); ++i)
    if (kTokenNames[i] == name) return static_cast<TreatmentToken>(i);
  return std::nullopt;
}

TreatmentPlan::TreatmentPlan(std::initializer_list<TreatmentToken> tokens) {
  for (auto t : tokens) insert(t);
}

TreatmentPlan TreatmentPlan::from_bits(std::uint8_t bits) {
  if (bits >= (1u << kAllTreatments.size())) throw std::invalid_argument("TreatmentPlan: invalid token bits");
  TreatmentPlan p;
  p.bits_ = bits;
  return p;
}

TreatmentPlan TreatmentPlan::parse(std::string_view text) {
  TreatmentPlan plan;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('+', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view piece = text.substr(start, end - start);
    while (!piece.empty() && piece.front() == ' ') piece.remove_prefix(1);
    while (!piece.empty() && piece.back() == ' ') piece.remove_suffix(1);
    auto tok = token_from_name(piece);
    if (!tok) throw std::invalid_argument("unknown treatment token '" + std::string(piece) + "'");
    plan.insert(*tok);
    start = end + 1;
  }
  if (plan.empty()) throw std::invalid_argument("empty treatment plan");
  return plan;
}

std::size_t TreatmentPlan::size() const {
  std::size_t n = 0;
  for (auto t : kAllTreatments) n += contains(t) ? 1 : 0;
  return n;
}

std::vector<TreatmentToken> TreatmentPlan::tokens() const {
  std::vector<TreatmentToken> out;
  for (auto t : kAllTreatments)
    if (contains(t)) out.push_back(t);
  return out;
}

std::string TreatmentPlan::render() const {
  std::string s;
  for (auto t : tokens()) {
    if (!s.empty()) s += " + ";
    s += "[" + std::string(token_name(t)) + "]";
  }
  return s;
}

std::string TreatmentPlan::key() const {
  std::string s;
  for (auto t : tokens()) {
    if (!s.empty()) s += "+";
    s += token_name(t);
  }
  return s;
}

void validate(const CohortConfig& cfg) {
  if (cfg.subjects < 1) throw std::invalid_argument("cohort: need at least one subject");
  if (cfg.patch < 1) throw std::invalid_argument("cohort: patch size must be positive");
  const auto& g = cfg.grid;
  if (g.depth <= 0 || g.height <= 0 || g.width <= 0) throw std::invalid_argument("cohort: grid must be positive");
  if (g.depth % cfg.patch || g.height % cfg.patch || g.width % cfg.patch)
    throw std::invalid_argument("cohort: grid " + g.str() + " is not divisible by patch size " +
                                std::to_string(cfg.patch));
  if (cfg.min_timepoints < 2 || cfg.max_timepoints < cfg.min_timepoints)
    throw std::invalid_argument("cohort: timepoints per subject must satisfy 2 <= min <= max");
}

TumorState advance_tumor(const TumorState& tumor, const TreatmentPlan& plan, int interval_days,
                         const DynamicsParams& dyn) {
  TumorState t = tumor;
  const double tau = interval_days;
  if (plan.contains(TreatmentToken::SUR)) {
    t.cavity_center = t.center;
    t.cavity_radius = std::max(t.cavity_radius, dyn.resection_fraction * t.enhancing_radius());
  }
  if (plan.contains(TreatmentToken::AM)) {
    const double grow = dyn.growth_rate * tau;
    t.core += 0.4 * grow;
    t.shell += 0.3 * grow;
    t.halo += 0.3 * grow;
  }
  double k = 0;
  if (plan.contains(TreatmentToken::TMZ)) k += 1.0;
  if (plan.contains(TreatmentToken::RT)) k += 1.5;
  if (plan.contains(TreatmentToken::CRT)) k += 2.0;
  const double shrink = k * dyn.shrink_rate * tau;
  t.core = std::max(0.0, t.core - 0.5 * shrink);
  t.shell = std::max(0.0, t.shell - 0.5 * shrink);
  if (plan.contains(TreatmentToken::CRT)) t.halo = std::max(0.0, t.halo - dyn.edema_shrink_rate * tau);
  const double outer = t.outer_radius();
  if (outer > dyn.max_radius) {
    const double f = dyn.max_radius / outer;
    t.core *= f;
    t.shell *= f;
    t.halo *= f;
  }
  return t;
}

std::pair<RawVolume, SegMask> paint_phantom(Shape3 shape, const Anatomy& anatomy, const TumorState& tumor,
                                            double noise_sigma, std::mt19937_64& rng) {
  RawVolume raw{shape, Eigen::ArrayXXf::Zero(Volume::kChannels, shape.voxels())};
  Eigen::ArrayXi labels(shape.voxels());
  std::normal_distribution<float> noise(0.f, static_cast<float>(noise_sigma));
  for (long v = 0; v < shape.voxels(); ++v) {
    const auto [z, y, x] = shape.coords(v);
    const Region r = classify(anatomy, tumor, z, y, x);
    labels(v) = label_of(r);
    Signature s = signature_of(r);
    if (r == Region::tissue) {
      const double f = anatomy.texture_freq;
      const float tex = kTextureAmplitude * static_cast<float>(std::sin(f * z + anatomy.texture_phase[0]) *
                                                               std::sin(f * y + anatomy.texture_phase[1]) *
                                                               std::sin(f * x + anatomy.texture_phase[2]));
      s.flair += tex;
      s.t1ce += tex;
      s.t2w += tex;
    }
    raw.data(0, v) = s.flair + noise(rng);
    raw.data(1, v) = s.t1ce + noise(rng);
    raw.data(2, v) = s.t2w + noise(rng);
  }
  return {std::move(raw), mask_from_labels(shape, labels)};
}

SegMask paint_labels(Shape3 shape, const Anatomy& anatomy, const TumorState& tumor) {
  Eigen::ArrayXi labels(shape.voxels());
  for (long v = 0; v < shape.voxels(); ++v) {
    const auto [z, y, x] = shape.coords(v);
    labels(v) = label_of(classify(anatomy, tumor, z, y, x));
  }
  return mask_from_labels(shape, labels);
}

float percentile(std::vector<float> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of empty set");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double w = pos - static_cast<double>(lo);
  return static_cast<float>((1.0 - w) * values[lo] + w * values[hi]);
}

IntensityWindow fit_intensity_window(const RawVolume& raw, double lo_pct, double hi_pct) {
  IntensityWindow w;
  for (int c = 0; c < Volume::kChannels; ++c) {
    if (!raw.data.row(c).isFinite().all()) throw std::invalid_argument("normalize_intensities: non-finite input");
    std::vector<float> vals(raw.data.row(c).begin(), raw.data.row(c).end());
    w.lo[static_cast<std::size_t>(c)] = percentile(vals, lo_pct);
    w.hi[static_cast<std::size_t>(c)] = percentile(std::move(vals), hi_pct);
  }
  return w;
}

Volume apply_intensity_window(const RawVolume& raw, const IntensityWindow& window) {
  Volume v(raw.shape);
  for (int c = 0; c < Volume::kChannels; ++c) {
    const float lo = window.lo[static_cast<std::size_t>(c)];
    const float hi = window.hi[static_cast<std::size_t>(c)];
    if (!(hi > lo)) {
      v.data.row(c).setZero();
      continue;
    }
    v.data.row(c) = ((raw.data.row(c).max(lo).min(hi) - lo) / (hi - lo) * 2.f - 1.f).max(-1.f).min(1.f);
  }
  return v;
}

Volume normalize_intensities(const RawVolume& raw) { return apply_intensity_window(raw, fit_intensity_window(raw)); }

TreatmentPlan reference_policy(const Demographics& demo, const std::vector<TreatmentPlan>& history,
                               const TumorState& tumor) {
  using T = TreatmentToken;
  if (history.empty()) {
    if (demo.age >= 72) return {T::RT};
    if (demo.grade == 4 && demo.age < 50) return {T::SUR, T::CRT};
    return {T::SUR};
  }
  const TreatmentPlan& last = history.back();
  if (last.contains(T::CRT) || last.contains(T::RT)) return {T::TMZ};
  if (last.contains(T::SUR)) return demo.age < 65 ? TreatmentPlan{T::CRT} : TreatmentPlan{T::RT};
  const double burden = tumor.enhancing_radius() - tumor.cavity_radius;
  if (last == TreatmentPlan{T::TMZ}) return burden > 2.5 ? TreatmentPlan{T::SUR} : TreatmentPlan{T::AM};
  return burden > 2.0 ? TreatmentPlan{T::SUR} : TreatmentPlan{T::TMZ};
}

Timepoint evolve_state(const Timepoint& tp, const TreatmentPlan& plan, int interval_days, const DynamicsParams& dyn,
                       std::mt19937_64& rng) {
  if (interval_days <= 0) throw std::invalid_argument("evolve_state: interval must be positive");
  if (plan.empty()) throw std::invalid_argument("evolve_state: empty plan");
  Timepoint next;
  next.day = tp.day + interval_days;
  next.phantom = tp.phantom;
  next.phantom.tumor = advance_tumor(tp.phantom.tumor, plan, interval_days, dyn);
  auto [raw, mask] = paint_phantom(tp.volume.shape, next.phantom.anatomy, next.phantom.tumor, dyn.noise_sigma, rng);
  next.volume = apply_intensity_window(raw, next.phantom.window);
  next.mask = std::move(mask);
  return next;
}

std::vector<PatientTrajectory> generate_cohort(std::uint64_t seed, const CohortConfig& cfg) {
  validate(cfg);
  const Shape3 g = cfg.grid;
  const double unit = std::min({g.depth, g.height, g.width}) / 32.0;
  std::vector<PatientTrajectory> cohort;
  cohort.reserve(static_cast<std::size_t>(cfg.subjects));
  for (int i = 0; i < cfg.subjects; ++i) {
    std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                     static_cast<std::uint32_t>(i), 0x5eedu};
    std::mt19937_64 rng(ss);
    PatientTrajectory traj;
    char id[16];
    std::snprintf(id, sizeof(id), "S%03d", i);
    traj.subject_id = id;
    traj.demographics.sex = uniform(rng, 0, 1) < 0.5 ? Sex::female : Sex::male;
    traj.demographics.age = uniform_int(rng, 35, 80);
    const double gr = uniform(rng, 0, 1);
    traj.demographics.grade = gr < 0.7 ? 4 : (gr < 0.9 ? 3 : 2);

    Phantom ph;
    Anatomy& a = ph.anatomy;
    a.brain_center = Vec3{g.depth / 2.0 - 0.5 + uniform(rng, -1, 1) * unit, g.height / 2.0 - 0.5 + uniform(rng, -1, 1) * unit,
                          g.width / 2.0 - 0.5 + uniform(rng, -1, 1) * unit};
    const double shrink = uniform(rng, 0.92, 1.0);
    a.brain_radii = Vec3{0.40 * g.depth * shrink, 0.38 * g.height * shrink, 0.42 * g.width * shrink};
    a.ventricle_center = Vec3{a.brain_center.z, a.brain_center.y - 1.0 * unit, a.brain_center.x};
    a.ventricle_radii = Vec3{uniform(rng, 2.0, 3.0) * unit, uniform(rng, 3.0, 4.5) * unit, uniform(rng, 1.2, 2.0) * unit};
    a.texture_phase = {uniform(rng, 0, 6.28), uniform(rng, 0, 6.28), uniform(rng, 0, 6.28)};
    a.texture_freq = uniform(rng, 0.25, 0.4) / unit;

    TumorState& t = ph.tumor;
    double oz, oy, ox;
    do {
      oz = uniform(rng, -1, 1);
      oy = uniform(rng, -1, 1);
      ox = uniform(rng, -1, 1);
    } while (oz * oz + oy * oy + ox * ox > 1.0);
    const double reach = 5.5 * unit;
    t.center = Vec3{a.brain_center.z + oz * reach, a.brain_center.y + oy * reach, a.brain_center.x + ox * reach};
    t.core = uniform(rng, 1.5, 3.0) * unit;
    t.shell = uniform(rng, 1.5, 2.5) * unit;
    t.halo = uniform(rng, 1.5, 3.0) * unit;
    t.cavity_center = t.center;

    DynamicsParams dyn = cfg.dynamics;
    dyn.max_radius *= unit;
    auto [raw, mask] = paint_phantom(g, a, t, dyn.noise_sigma, rng);
    ph.window = fit_intensity_window(raw);
    Timepoint base;
    base.day = 0;
    base.volume = apply_intensity_window(raw, ph.window);
    base.mask = std::move(mask);
    base.phantom = ph;
    traj.timepoints.push_back(std::move(base));

    const int n_tp = uniform_int(rng, cfg.min_timepoints, cfg.max_timepoints);
    for (int k = 1; k < n_tp; ++k) {
      const Timepoint& cur = traj.timepoints.back();
      TreatmentPlan plan = reference_policy(traj.demographics, traj.plans, cur.phantom.tumor);
      const int tau = sample_interval(plan, rng);
      Timepoint next = evolve_state(cur, plan, tau, dyn, rng);
      traj.plans.push_back(plan);
      traj.timepoints.push_back(std::move(next));
    }
    cohort.push_back(std::move(traj));
  }
  return cohort;
}

std::vector<TrainingPair> make_pairs(const PatientTrajectory& traj) {
  const int n = static_cast<int>(traj.timepoints.size());
  if (n < 2) throw std::invalid_argument("make_pairs: need at least two timepoints");
  if (static_cast<int>(traj.plans.size()) != n - 1) throw std::invalid_argument("make_pairs: plan count mismatch");
  std::vector<TrainingPair> pairs;
  for (int p = 0; p < n; ++p) {
    for (int q = p + 1; q < n; ++q) {
      TrainingPair pr;
      pr.subject_id = traj.subject_id;
      pr.source = p;
      pr.target = q;
      pr.interval_days = traj.timepoints[static_cast<std::size_t>(q)].day - traj.timepoints[static_cast<std::size_t>(p)].day;
      for (int k = p; k < q; ++k) pr.plan_between |= traj.plans[static_cast<std::size_t>(k)];
      pr.next_plan = traj.plans[static_cast<std::size_t>(p)];
      pr.history.assign(traj.plans.begin(), traj.plans.begin() + p);
      pairs.push_back(std::move(pr));
    }
  }
  return pairs;
}

CohortSplit split_cohort(const std::vector<PatientTrajectory>& cohort, double ratio, std::uint64_t seed) {
  const std::size_t n = cohort.size();
  if (n < 2) throw std::invalid_argument("split_cohort: need at least two subjects");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  auto n_train = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 0.5));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
  std::vector<bool> is_train(n, false);
  for (std::size_t i = 0; i < n_train; ++i) is_train[order[i]] = true;
  CohortSplit split;
  for (std::size_t i = 0; i < n; ++i) (is_train[i] ? split.train : split.val).push_back(cohort[i]);
  return split;
}

std::vector<PatientTrajectory> select_subjects(const std::vector<PatientTrajectory>& cohort,
                                               const std::vector<std::string>& ids) {
  std::vector<PatientTrajectory> out;
  for (const auto& t : cohort)
    if (std::find(ids.begin(), ids.end(), t.subject_id) != ids.end()) out.push_back(t);
  return out;
}

std::optional<Vec3> tumor_centroid(const SegMask& mask) {
  double z = 0, y = 0, x = 0;
  long n = 0;
  for (long v = 0; v < mask.shape.voxels(); ++v) {
    if (mask.label(v) == 0) continue;
    const auto c = mask.shape.coords(v);
    z += c[0];
    y += c[1];
    x += c[2];
    ++n;
  }
  if (n == 0) return std::nullopt;
  return Vec3{z / n, y / n, x / n};
}

void save_cohort(const std::filesystem::path& dir, const std::vector<PatientTrajectory>& cohort,
                 const CohortManifestInfo& info) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "bwm-cohort";
  manifest["version"] = 1;
  manifest["seed"] = info.seed;
  manifest["config"] = config_json(info.config);
  manifest["split"] = {{"train", info.train_ids}, {"val", info.val_ids}};
  manifest["subjects"] = nlohmann::json::array();
  for (const auto& traj : cohort) {
    nlohmann::json s;
    s["id"] = traj.subject_id;
    s["sex"] = traj.demographics.sex == Sex::female ? "female" : "male";
    s["age"] = traj.demographics.age;
    s["grade"] = traj.demographics.grade;
    s["plans"] = nlohmann::json::array();
    for (const auto& p : traj.plans) s["plans"].push_back(p.key());
    s["timepoints"] = nlohmann::json::array();
    for (std::size_t k = 0; k < traj.timepoints.size(); ++k) {
      const Timepoint& tp = traj.timepoints[k];
      const std::string stem = traj.subject_id + "_t" + std::to_string(k);
      write_f32_grid(dir / (stem + "_volume.f32"), tp.volume.data);
      write_f32_grid(dir / (stem + "_mask.f32"), tp.mask.data);
      const auto& sh = tp.volume.shape;
      s["timepoints"].push_back({{"day", tp.day},
                                 {"volume", stem + "_volume.f32"},
                                 {"mask", stem + "_mask.f32"},
                                 {"volume_shape", {Volume::kChannels, sh.depth, sh.height, sh.width}},
                                 {"mask_shape", {SegMask::kClasses, sh.depth, sh.height, sh.width}},
                                 {"phantom", phantom_json(tp.phantom)}});
    }
    manifest["subjects"].push_back(std::move(s));
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
}

std::vector<PatientTrajectory> load_cohort(const std::filesystem::path& dir, CohortManifestInfo* info) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("cannot read " + (dir / "manifest.json").string());
  nlohmann::json manifest = nlohmann::json::parse(in);
  if (manifest.value("format", "") != "bwm-cohort") throw std::runtime_error("not a cohort manifest");
  if (manifest.at("version").get<int>() != 1) throw std::runtime_error("unsupported cohort manifest version");
  if (info) {
    info->seed = manifest.at("seed").get<std::uint64_t>();
    info->config = config_from(manifest.at("config"));
    info->train_ids = manifest.at("split").at("train").get<std::vector<std::string>>();
    info->val_ids = manifest.at("split").at("val").get<std::vector<std::string>>();
  }
  std::vector<PatientTrajectory> cohort;
  for (const auto& s : manifest.at("subjects")) {
    PatientTrajectory traj;
    traj.subject_id = s.at("id").get<std::string>();
    traj.demographics.sex = s.at("sex").get<std::string>() == "female" ? Sex::female : Sex::male;
    traj.demographics.age = s.at("age").get<int>();
    traj.demographics.grade = s.at("grade").get<int>();
    for (const auto& p : s.at("plans")) traj.plans.push_back(TreatmentPlan::parse(p.get<std::string>()));
    for (const auto& t : s.at("timepoints")) {
      Timepoint tp;
      tp.day = t.at("day").get<int>();
      const auto vs = t.at("volume_shape").get<std::array<int, 4>>();
      const auto ms = t.at("mask_shape").get<std::array<int, 4>>();
      if (vs[0] != Volume::kChannels || ms[0] != SegMask::kClasses)
        throw std::runtime_error("cohort manifest: unexpected channel count");
      const Shape3 shape{vs[1], vs[2], vs[3]};
      tp.volume.shape = shape;
      tp.volume.data = read_f32_grid(dir / t.at("volume").get<std::string>(), Volume::kChannels, shape.voxels());
      tp.mask.shape = shape;
      tp.mask.data = read_f32_grid(dir / t.at("mask").get<std::string>(), SegMask::kClasses, shape.voxels());
      tp.phantom = phantom_from(t.at("phantom"));
      traj.timepoints.push_back(std::move(tp));
    }
    if (traj.plans.size() + 1 != traj.timepoints.size())
      throw std::runtime_error("cohort manifest: subject " + traj.subject_id + " has inconsistent plan count");
    cohort.push_back(std::move(traj));
  }
  return cohort;
}

}  // namespace bwm
