#include "bwm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <stdexcept>

namespace bwm {

namespace {

void check_pair(const Volume& a, const Volume& b) {
  if (!(a.shape == b.shape) || a.data.rows() != b.data.rows() || a.data.cols() != b.data.cols())
    throw std::invalid_argument("metric: volume shapes differ (" + a.shape.str() + " vs " + b.shape.str() + ")");
}

std::pair<int, int> channel_range(int channel) {
  if (channel < 0) return {0, Volume::kChannels};
  if (channel >= Volume::kChannels) throw std::out_of_range("metric: channel out of range");
  return {channel, channel + 1};
}

// Summed-volume table with a zero border: S(z, y, x) = sum over [0, z) x [0, y) x [0, x).
struct Integral {
  int d, h, w;
  std::vector<double> s;
  Integral(const Eigen::ArrayXd& v, Shape3 sh) : d(sh.depth), h(sh.height), w(sh.width),
        s(static_cast<std::size_t>(d + 1) * (h + 1) * (w + 1), 0.0) {
    for (int z = 0; z < d; ++z)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          at(z + 1, y + 1, x + 1) = v(sh.index(z, y, x)) + at(z, y + 1, x + 1) + at(z + 1, y, x + 1) +
                                    at(z + 1, y + 1, x) - at(z, y, x + 1) - at(z, y + 1, x) - at(z + 1, y, x) +
                                    at(z, y, x);
  }
  double& at(int z, int y, int x) { return s[(static_cast<std::size_t>(z) * (h + 1) + y) * (w + 1) + x]; }
  double box(int z, int y, int x, int k) const {
    auto a = [&](int zz, int yy, int xx) { return s[(static_cast<std::size_t>(zz) * (h + 1) + yy) * (w + 1) + xx]; };
    return a(z + k, y + k, x + k) - a(z, y + k, x + k) - a(z + k, y, x + k) - a(z + k, y + k, x) + a(z, y, x + k) +
           a(z, y + k, x) + a(z + k, y, x) - a(z, y, x);
  }
};

double ssim_channel(const Eigen::ArrayXd& a, const Eigen::ArrayXd& b, Shape3 sh) {
  const int k = kSsimWindow;
  if (sh.depth < k || sh.height < k || sh.width < k)
    throw std::invalid_argument("ssim: volume " + sh.str() + " smaller than the 7^3 window");
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03, n = static_cast<double>(k) * k * k;
  const Integral sa(a, sh), sb(b, sh), saa(a * a, sh), sbb(b * b, sh), sab(a * b, sh);
  double total = 0;
  long count = 0;
  for (int z = 0; z + k <= sh.depth; ++z)
    for (int y = 0; y + k <= sh.height; ++y)
      for (int x = 0; x + k <= sh.width; ++x) {
        const double ma = sa.box(z, y, x, k) / n, mb = sb.box(z, y, x, k) / n;
        const double va = saa.box(z, y, x, k) / n - ma * ma;
        const double vb = sbb.box(z, y, x, k) / n - mb * mb;
        const double cov = sab.box(z, y, x, k) / n - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
  return total / static_cast<double>(count);
}

}  // namespace

double nmse(const Volume& pred, const Volume& ref, int channel) {
  check_pair(pred, ref);
  const auto [lo, hi] = channel_range(channel);
  double num = 0, den = 0;
  for (int c = lo; c < hi; ++c) {
    num += (pred.data.row(c).cast<double>() - ref.data.row(c).cast<double>()).square().sum();
    den += ref.data.row(c).cast<double>().square().sum();
  }
  if (den == 0) throw std::invalid_argument("nmse: reference volume has zero norm");
  return 100.0 * num / den;
}

double psnr(const Volume& pred, const Volume& ref, int channel) {
  check_pair(pred, ref);
  const auto [lo, hi] = channel_range(channel);
  double sq = 0;
  for (int c = lo; c < hi; ++c)
    sq += ((pred.data.row(c).cast<double>() - ref.data.row(c).cast<double>()) * 0.5).square().sum();
  const double mse = sq / (static_cast<double>(hi - lo) * static_cast<double>(ref.shape.voxels()));
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Volume& pred, const Volume& ref, int channel) {
  check_pair(pred, ref);
  const auto [lo, hi] = channel_range(channel);
  double total = 0;
  for (int c = lo; c < hi; ++c) {
    const Eigen::ArrayXd a = (pred.data.row(c).transpose().cast<double>() + 1.0) * 0.5;
    const Eigen::ArrayXd b = (ref.data.row(c).transpose().cast<double>() + 1.0) * 0.5;
    total += ssim_channel(a, b, ref.shape);
  }
  return total / (hi - lo);
}

PlanMetrics plan_metrics(const std::vector<TreatmentPlan>& predicted, const std::vector<TreatmentPlan>& reference) {
  if (predicted.size() != reference.size()) throw std::invalid_argument("plan_metrics: length mismatch");
  PlanMetrics m;
  m.items = static_cast<int>(reference.size());
  if (reference.empty()) return m;
  std::set<TreatmentPlan> classes(reference.begin(), reference.end());
  std::set<TreatmentPlan> extra;
  for (const auto& p : predicted)
    if (!classes.count(p)) extra.insert(p);
  for (const auto& c : classes) m.classes.push_back(c.key());
  for (const auto& c : extra) m.unexpected.push_back(c.key());

  int correct = 0;
  for (std::size_t i = 0; i < reference.size(); ++i) correct += predicted[i] == reference[i];
  m.accuracy = 100.0 * correct / m.items;

  // An undefined ratio whose error term is zero counts as perfect: a class
  // never predicted and never present has precision 100, and specificity is
  // 100 when there are no negatives at all.
  auto ratio = [](double num, double den, double errors) { return den == 0 ? (errors == 0 ? 100.0 : 0.0) : 100.0 * num / den; };
  for (const auto& c : classes) {
    double tp = 0, fp = 0, fn = 0, tn = 0;
    for (std::size_t i = 0; i < reference.size(); ++i) {
      const bool p = predicted[i] == c, r = reference[i] == c;
      tp += p && r;
      fp += p && !r;
      fn += !p && r;
      tn += !p && !r;
    }
    const double prec = ratio(tp, tp + fp, fn);
    const double rec = ratio(tp, tp + fn, fp);
    m.precision += prec;
    m.specificity += ratio(tn, tn + fp, fp);
    m.f1 += prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
  }
  const double k = static_cast<double>(classes.size());
  m.precision /= k;
  m.specificity /= k;
  m.f1 /= k;
  return m;
}

std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) return std::nullopt;
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0 || syy <= 0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

std::string interval_bucket(int days) {
  if (days <= 90) return "0-90";
  if (days <= 180) return "91-180";
  if (days <= 360) return "181-360";
  return ">360";
}

FocusCorrelation focus_correlation(const std::vector<FocusItem>& items, int min_items) {
  FocusCorrelation out;
  auto corr = [&](const std::vector<const FocusItem*>& sel) -> std::optional<double> {
    if (static_cast<int>(sel.size()) < min_items) return std::nullopt;
    std::vector<double> a, b;
    for (const auto* i : sel) {
      a.push_back(i->focused);
      b.push_back(i->truth);
    }
    return pearson(a, b);
  };
  std::vector<const FocusItem*> all;
  std::map<std::string, std::vector<const FocusItem*>> iv, tr;
  for (const auto& i : items) {
    all.push_back(&i);
    iv[interval_bucket(i.interval_days)].push_back(&i);
    for (auto t : i.plan.tokens()) tr[std::string(token_name(t))].push_back(&i);
  }
  out.overall = corr(all);
  out.counts["overall"] = static_cast<int>(all.size());
  for (const auto& [k, v] : iv) {
    out.by_interval[k] = corr(v);
    out.counts["interval " + k] = static_cast<int>(v.size());
  }
  for (const auto& [k, v] : tr) {
    out.by_treatment[k] = corr(v);
    out.counts["treatment " + k] = static_cast<int>(v.size());
  }
  return out;
}

double EvalReport::mean_nmse(int channel) const {
  double s = 0;
  for (const auto& p : pairs) s += p.nmse[static_cast<std::size_t>(channel)];
  return pairs.empty() ? 0.0 : s / static_cast<double>(pairs.size());
}

double EvalReport::mean_baseline_nmse(int channel) const {
  double s = 0;
  for (const auto& p : pairs) s += p.baseline_nmse[static_cast<std::size_t>(channel)];
  return pairs.empty() ? 0.0 : s / static_cast<double>(pairs.size());
}

namespace {

nlohmann::json mean_std(const std::vector<double>& v) {
  if (v.empty()) return nullptr;
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return {{"mean", m}, {"std", v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0}};
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  nlohmann::json gen = nlohmann::json::object();
  for (int c = 0; c < 3; ++c) {
    std::vector<double> n, p, s, b;
    for (const auto& r : pairs) {
      n.push_back(r.nmse[static_cast<std::size_t>(c)]);
      p.push_back(r.psnr[static_cast<std::size_t>(c)]);
      s.push_back(r.ssim[static_cast<std::size_t>(c)]);
      b.push_back(r.baseline_nmse[static_cast<std::size_t>(c)]);
    }
    gen[kChannelNames[static_cast<std::size_t>(c)]] = {
        {"nmse", mean_std(n)}, {"psnr", mean_std(p)}, {"ssim", mean_std(s)}, {"copy_baseline_nmse", mean_std(b)}};
  }
  j["generation"] = gen;
  j["generation_pairs"] = pairs.size();
  if (planning) {
    j["planning"] = {{"accuracy", planning->accuracy},       {"f1", planning->f1},
                     {"specificity", planning->specificity}, {"precision", planning->precision},
                     {"classes", planning->classes},         {"unexpected_predictions", planning->unexpected},
                     {"items", planning->items}};
  }
  nlohmann::json corr;
  corr["overall"] = opt_json(correlation.overall);
  for (const auto& [k, v] : correlation.by_interval) corr["interval"][k] = opt_json(v);
  for (const auto& [k, v] : correlation.by_treatment) corr["treatment"][k] = opt_json(v);
  corr["counts"] = correlation.counts;
  j["correlation"] = corr;
  nlohmann::json items = nlohmann::json::array();
  for (const auto& r : pairs)
    items.push_back({{"subject", r.subject_id},
                     {"source", r.source},
                     {"target", r.target},
                     {"interval_days", r.interval_days},
                     {"plan", r.plan.key()},
                     {"nmse", r.nmse},
                     {"psnr", r.psnr},
                     {"ssim", r.ssim},
                     {"copy_baseline_nmse", r.baseline_nmse},
                     {"focused_voxels", r.focused_voxels},
                     {"true_voxels", r.true_voxels}});
  j["pairs"] = items;
  return j;
}

std::string EvalReport::to_text() const {
  const auto j = to_json();
  std::string out;
  char buf[256];
  auto ms = [&](const nlohmann::json& v, const char* fmt) {
    if (v.is_null()) return std::string("-");
    std::snprintf(buf, sizeof buf, fmt, v["mean"].get<double>(), v["std"].get<double>());
    return std::string(buf);
  };
  auto num = [&](const nlohmann::json& v) {
    if (v.is_null()) return std::string("-");
    std::snprintf(buf, sizeof buf, "%.3f", v.get<double>());
    return std::string(buf);
  };

  std::snprintf(buf, sizeof buf, "Generation (%zu pairs)\n", pairs.size());
  out += buf;
  std::snprintf(buf, sizeof buf, "%-6s %-18s %-18s %-18s %-18s\n", "seq", "NMSE (%)", "PSNR (dB)", "SSIM",
                "copy NMSE (%)");
  out += buf;
  for (const char* c : kChannelNames) {
    const auto& g = j["generation"][c];
    const std::string n = ms(g["nmse"], "%.3f ± %.3f"), p = ms(g["psnr"], "%.2f ± %.2f"),
                      s = ms(g["ssim"], "%.2f ± %.2f"), b = ms(g["copy_baseline_nmse"], "%.3f ± %.3f");
    std::snprintf(buf, sizeof buf, "%-6s %-18s %-18s %-18s %-18s\n", c, n.c_str(), p.c_str(), s.c_str(), b.c_str());
    out += buf;
  }

  out += "\nPlanning\n";
  if (planning) {
    std::snprintf(buf, sizeof buf, "%-10s %-10s %-12s %-10s %s\n", "acc (%)", "F1 (%)", "spec (%)", "prec (%)",
                  "items");
    out += buf;
    std::snprintf(buf, sizeof buf, "%-10.2f %-10.2f %-12.2f %-10.2f %d\n", planning->accuracy, planning->f1,
                  planning->specificity, planning->precision, planning->items);
    out += buf;
    if (!planning->unexpected.empty()) {
      out += "predicted but absent from references:";
      for (const auto& u : planning->unexpected) out += " " + (u.empty() ? std::string("(no plan)") : u);
      out += "\n";
    }
  } else {
    out += "-\n";
  }

  out += "\nFocus correlation (Pearson r)\n";
  const auto& corr = j["correlation"];
  auto row = [&](const std::string& name, const nlohmann::json& r) {
    const auto it = correlation.counts.find(name);
    std::snprintf(buf, sizeof buf, "%-16s %-8s %d\n", name.c_str(), num(r).c_str(),
                  it == correlation.counts.end() ? 0 : it->second);
    out += buf;
  };
  std::snprintf(buf, sizeof buf, "%-16s %-8s %s\n", "stratum", "r", "n");
  out += buf;
  row("overall", corr["overall"]);
  for (const char* group : {"interval", "treatment"})
    if (corr.contains(group))
      for (const auto& [k, v] : corr[group].items()) row(std::string(group) + " " + k, v);
  return out;
}

template <typename Scalar>
EvalReport evaluate(const WorldModel<Scalar>& model, const PatchCodec<Scalar>& codec,
                    const std::vector<PatientTrajectory>& subjects, const EvalOptions& opt) {
  EvalReport rep;
  std::vector<FocusItem> focus;
  std::vector<TreatmentPlan> pred, ref;
  int done = 0;
  for (const auto& traj : subjects) {
    std::vector<LatentGrid<Scalar>> latents;
    for (const auto& tp : traj.timepoints) latents.push_back(codec.encode(tp.volume));
    if (opt.planning) {
      for (std::size_t p = 0; p < traj.plans.size(); ++p) {
        PlanResult r{traj.subject_id, static_cast<int>(p), traj.plans[p], std::nullopt};
        const std::vector<TreatmentPlan> hist(traj.plans.begin(), traj.plans.begin() + static_cast<long>(p));
        try {
          r.predicted = predict_plan(model, latents[p], traj.demographics, hist).plan;
        } catch (const NoPlanError&) {
        }
        pred.push_back(r.predicted.value_or(TreatmentPlan{}));
        ref.push_back(r.reference);
        rep.plans.push_back(r);
      }
    }
    if (!opt.generation) continue;
    for (const auto& pair : make_pairs(traj)) {
      if (opt.max_pairs >= 0 && done >= opt.max_pairs) break;
      const auto& src = traj.timepoints[static_cast<std::size_t>(pair.source)];
      const auto& dst = traj.timepoints[static_cast<std::size_t>(pair.target)];
      const auto g = generate_future(model, codec, latents[static_cast<std::size_t>(pair.source)], traj.demographics,
                                     pair.history, pair.plan_between, pair.interval_days, opt.seed + done,
                                     opt.sampler_steps, &src.volume, opt.temperature);
      PairResult r;
      r.subject_id = traj.subject_id;
      r.source = pair.source;
      r.target = pair.target;
      r.interval_days = pair.interval_days;
      r.plan = pair.plan_between;
      for (int c = 0; c < 3; ++c) {
        const auto i = static_cast<std::size_t>(c);
        r.nmse[i] = nmse(g.volume, dst.volume, c);
        r.psnr[i] = psnr(g.volume, dst.volume, c);
        r.ssim[i] = ssim(g.volume, dst.volume, c);
        r.baseline_nmse[i] = nmse(src.volume, dst.volume, c);
      }
      r.focused_voxels = g.mask.tumor_voxels();
      r.true_voxels = dst.mask.tumor_voxels();
      focus.push_back(FocusItem{static_cast<double>(r.focused_voxels), static_cast<double>(r.true_voxels),
                                r.interval_days, r.plan});
      rep.pairs.push_back(r);
      ++done;
    }
  }
  if (opt.planning) rep.planning = plan_metrics(pred, ref);
  rep.correlation = focus_correlation(focus);
  return rep;
}

template EvalReport evaluate(const WorldModel<float>&, const PatchCodec<float>&, const std::vector<PatientTrajectory>&,
                             const EvalOptions&);
template EvalReport evaluate(const WorldModel<double>&, const PatchCodec<double>&,
                             const std::vector<PatientTrajectory>&, const EvalOptions&);

}  // namespace bwm
