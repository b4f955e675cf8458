#include "bwm/infer.hpp"

#include <sstream>

namespace bwm {

int constrained_argmax(const Eigen::Ref<const Eigen::RowVectorXd>& logits, const std::vector<int>& emitted) {
  int best = -1;
  auto consider = [&](int id) {
    if (id >= logits.size()) throw std::out_of_range("constrained_argmax: logits narrower than vocabulary");
    if (best < 0 || logits(id) > logits(best)) best = id;
  };
  // Ascending id order with a strict comparison gives the lowest-id tie-break.
  consider(Vocabulary::kEos);
  for (int id = Vocabulary::kFirstPlan; id < Vocabulary::kFirstPlan + Vocabulary::kPlanCount; ++id)
    if (std::find(emitted.begin(), emitted.end(), id) == emitted.end()) consider(id);
  return best;
}

template <typename Scalar>
SegMask mask_from_logits(const Matrix<Scalar>& logits, Shape3 shape) {
  if (logits.rows() != shape.voxels() || logits.cols() != SegMask::kClasses)
    throw std::invalid_argument("mask_from_logits: logits do not match grid " + shape.str());
  SegMask m(shape);
  for (long v = 0; v < shape.voxels(); ++v) {
    Eigen::Index c;
    logits.row(v).maxCoeff(&c);
    m.set_label(v, static_cast<int>(c));
  }
  return m;
}

template <typename Scalar>
PlanPrediction predict_plan(const WorldModel<Scalar>& model, const LatentGrid<Scalar>& current,
                            const Demographics& demo, const std::vector<TreatmentPlan>& history) {
  const auto query = plan_query_ids(demo, history);
  PlanPrediction out;
  for (int step = 0; step < Vocabulary::kPlanCount; ++step) {
    std::vector<int> text = query;
    text.insert(text.end(), out.ids.begin(), out.ids.end());
    const auto seq = build_sequence(current, text, Task::plan, static_cast<const LatentGrid<Scalar>*>(nullptr), false);
    ad::Tape<Scalar> tape;
    ParamBinder<Scalar> bind(tape, model.params(), false);
    const auto f = model.forward(bind, seq);
    const auto h = ad::slice_rows(f.hidden.back(), seq.text_position(static_cast<int>(text.size()) - 1), 1);
    const Eigen::RowVectorXd logits = model.plan_head(bind, h).value().row(0).template cast<double>();
    if (step == 0) out.mask = mask_from_logits<Scalar>(model.aligner(bind, f.taps).value(), model.config().volume);
    out.logits.push_back(logits);
    const int id = constrained_argmax(logits, out.ids);
    if (id == Vocabulary::kEos) break;
    out.ids.push_back(id);
  }
  if (out.ids.empty()) throw NoPlanError();
  for (int id : out.ids) out.plan.insert(Vocabulary::token_of(id));
  return out;
}

template <typename Scalar>
Generation<Scalar> generate_future(const WorldModel<Scalar>& model, const PatchCodec<Scalar>& codec,
                                   const LatentGrid<Scalar>& current, const Demographics& demo,
                                   const std::vector<TreatmentPlan>& history, const TreatmentPlan& plan,
                                   int interval_days, std::uint64_t seed, int steps, const Volume* scan,
                                   double temperature) {
  const auto& cfg = model.config();
  if (steps <= 0) steps = cfg.sampler_steps;
  if (!(temperature >= 0)) throw std::invalid_argument("generate_future: temperature must be >= 0");
  if (!(current.grid == cfg.latent_grid())) throw std::invalid_argument("generate_future: latent grid mismatch");
  const auto context = img_context_ids(demo, history, plan, interval_days);
  std::mt19937_64 rng(seed);
  Matrix<Scalar> z0 = standard_normal<Scalar>(current.grid.voxels(), cfg.latent_channels, rng) * static_cast<Scalar>(temperature);
  Generation<Scalar> g;
  int k = 0;
  auto field = [&](const Matrix<Scalar>& z, Scalar t) {
    const auto seq = build_sequence(LatentGrid<Scalar>{current.grid, z}, context, Task::img, &current, true);
    ad::Tape<Scalar> tape;
    ParamBinder<Scalar> bind(tape, model.params(), false);
    const auto f = model.forward(bind, seq);
    if (++k == steps) g.mask = mask_from_logits<Scalar>(model.aligner(bind, f.taps).value(), cfg.volume);
    return Matrix<Scalar>(model.flow_head(bind, f.image_out, z, t).value());
  };
  g.latent = LatentGrid<Scalar>{current.grid, current.tokens + static_cast<Scalar>(cfg.resolved_flow_scale()) *
                                                                  euler_integrate<Scalar>(std::move(z0), field, steps)};
  g.volume = codec.decode(g.latent, cfg.volume);
  if (scan) {
    if (!(scan->shape == cfg.volume)) throw std::invalid_argument("generate_future: scan shape does not match model volume");
    g.volume.data += scan->data - codec.decode(current, cfg.volume).data;
  }
  g.volume.data = g.volume.data.max(-1.0f).min(1.0f);
  return g;
}

std::vector<Action> parse_actions(std::string_view text) {
  std::vector<Action> out;
  std::stringstream in{std::string(text)};
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw std::invalid_argument("action '" + item + "' must look like PLAN:DAYS");
    Action a;
    a.plan = TreatmentPlan::parse(item.substr(0, colon));
    try {
      a.interval_days = std::stoi(item.substr(colon + 1));
    } catch (const std::exception&) {
      throw std::invalid_argument("action '" + item + "' has a non-numeric interval");
    }
    if (a.interval_days <= 0) throw std::invalid_argument("action '" + item + "' needs a positive interval");
    out.push_back(a);
  }
  if (out.empty()) throw std::invalid_argument("no actions given");
  return out;
}

template <typename Scalar>
std::vector<RolloutStep<Scalar>> rollout(const WorldModel<Scalar>& model, const PatchCodec<Scalar>& codec,
                                         const LatentGrid<Scalar>& start, int start_day, const Demographics& demo,
                                         std::vector<TreatmentPlan> history, const std::vector<Action>& actions,
                                         std::uint64_t seed, int steps, const Volume* start_scan,
                                         double temperature) {
  std::vector<RolloutStep<Scalar>> out;
  LatentGrid<Scalar> current = start;
  std::optional<Volume> scan;
  if (start_scan) scan = *start_scan;
  int day = start_day;
  for (std::size_t k = 0; k < actions.size(); ++k) {
    RolloutStep<Scalar> s;
    s.action = actions[k];
    s.state = generate_future(model, codec, current, demo, history, s.action.plan, s.action.interval_days, seed + k,
                              steps, scan ? &*scan : nullptr, temperature);
    day += s.action.interval_days;
    s.day = day;
    history.push_back(s.action.plan);
    try {
      s.suggestion = predict_plan(model, s.state.latent, demo, history).plan;
    } catch (const NoPlanError&) {
    }
    current = s.state.latent;
    if (scan) scan = s.state.volume;
    out.push_back(std::move(s));
  }
  return out;
}

#define BWM_INSTANTIATE(S)                                                                                           \
  template SegMask mask_from_logits(const Matrix<S>&, Shape3);                                                       \
  template PlanPrediction predict_plan(const WorldModel<S>&, const LatentGrid<S>&, const Demographics&,              \
                                       const std::vector<TreatmentPlan>&);                                           \
  template Generation<S> generate_future(const WorldModel<S>&, const PatchCodec<S>&, const LatentGrid<S>&,           \
                                         const Demographics&, const std::vector<TreatmentPlan>&,                     \
                                         const TreatmentPlan&, int, std::uint64_t, int, const Volume*, double);      \
  template std::vector<RolloutStep<S>> rollout(const WorldModel<S>&, const PatchCodec<S>&, const LatentGrid<S>&,     \
                                               int, const Demographics&, std::vector<TreatmentPlan>,                 \
                                               const std::vector<Action>&, std::uint64_t, int, const Volume*, double);

BWM_INSTANTIATE(float)
BWM_INSTANTIATE(double)

#undef BWM_INSTANTIATE

}  // namespace bwm
