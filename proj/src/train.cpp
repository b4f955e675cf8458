#include "bwm/train.hpp"

#include "bwm/io.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

namespace bwm {

std::string_view mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::unified: return "unified";
    case TrainMode::plan_only: return "plan_only";
    case TrainMode::img_only: return "img_only";
  }
  return "?";
}

TrainMode mode_from_name(std::string_view s) {
  if (s == "unified") return TrainMode::unified;
  if (s == "plan_only") return TrainMode::plan_only;
  if (s == "img_only") return TrainMode::img_only;
  throw std::invalid_argument("unknown train mode '" + std::string(s) + "' (unified, plan_only, img_only)");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
  if (!(lr > 0)) fail("lr must be positive");
  for (const auto& [g, r] : group_lr)
    if (!(r >= 0)) fail("lr." + g + " must be non-negative");
  if (warmup_steps < 0) fail("warmup_steps must be >= 0");
  if (weight_decay < 0) fail("weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0, 1)");
  if (batch < 1) fail("batch must be >= 1");
  if (steps < 0) fail("steps must be >= 0");
  if (!(p_plan > 0 && p_plan < 1)) fail("p_plan must lie in (0, 1)");
  if (orientations != 1 && orientations != 8 && orientations != 48) fail("orientations must be 1, 8 or 48");
}

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("expected a boolean, got '" + v + "'");
}

Shape3 parse_shape(const std::string& v) {
  Shape3 s;
  char x1 = 0, x2 = 0;
  std::istringstream in(v);
  if (!(in >> s.depth >> x1 >> s.height >> x2 >> s.width) || x1 != 'x' || x2 != 'x')
    throw std::invalid_argument("expected DxHxW, got '" + v + "'");
  return s;
}

std::vector<int> parse_ints(const std::string& v) {
  std::vector<int> out;
  std::stringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(std::stoi(trim(item)));
  return out;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Key {
  const char* name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define BWM_INT(key, field) \
  Key { key, [](const RunConfig& c) { return std::to_string(c.field); }, [](RunConfig& c, const std::string& v) { c.field = std::stoi(v); } }
#define BWM_U64(key, field) \
  Key { key, [](const RunConfig& c) { return std::to_string(c.field); }, [](RunConfig& c, const std::string& v) { c.field = std::stoull(v); } }
#define BWM_DBL(key, field) \
  Key { key, [](const RunConfig& c) { return fmt(c.field); }, [](RunConfig& c, const std::string& v) { c.field = std::stod(v); } }
#define BWM_BOOL(key, field) \
  Key { key, [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }, [](RunConfig& c, const std::string& v) { c.field = parse_bool(v); } }

const std::vector<Key>& keys() {
  static const std::vector<Key> k = {
      BWM_INT("model.layers", model.layers),
      BWM_INT("model.width", model.width),
      BWM_INT("model.heads", model.heads),
      BWM_INT("model.ffn_mult", model.ffn_mult),
      BWM_INT("model.latent_channels", model.latent_channels),
      BWM_INT("model.patch", model.patch),
      Key{"model.volume", [](const RunConfig& c) { return c.model.volume.str(); },
          [](RunConfig& c, const std::string& v) { c.model.volume = parse_shape(v); }},
      Key{"model.taps",
          [](const RunConfig& c) {
            std::string s;
            for (std::size_t i = 0; i < c.model.taps.size(); ++i) s += (i ? "," : "") + std::to_string(c.model.taps[i]);
            return s;
          },
          [](RunConfig& c, const std::string& v) { c.model.taps = parse_ints(v); }},
      BWM_DBL("model.focal_gamma", model.focal_gamma),
      BWM_DBL("model.lambda_img", model.lambda_img),
      BWM_INT("model.sampler_steps", model.sampler_steps),
      BWM_INT("model.flow_blocks", model.flow_blocks),
      BWM_INT("model.aligner_width", model.aligner_width),
      BWM_INT("model.max_text", model.max_text),
      BWM_BOOL("model.y_shaped", model.y_shaped),
      BWM_BOOL("model.mask_align", model.mask_align),
      BWM_DBL("model.prob_eps", model.prob_eps),
      BWM_DBL("model.dice_eps", model.dice_eps),
      BWM_DBL("model.flow_scale", model.flow_scale),
      BWM_U64("model.seed", model_seed),
      BWM_DBL("train.lr", train.lr),
      BWM_INT("train.warmup_steps", train.warmup_steps),
      BWM_DBL("train.weight_decay", train.weight_decay),
      BWM_DBL("train.beta1", train.beta1),
      BWM_DBL("train.beta2", train.beta2),
      BWM_DBL("train.adam_eps", train.adam_eps),
      BWM_DBL("train.clip_norm", train.clip_norm),
      BWM_INT("train.batch", train.batch),
      BWM_INT("train.steps", train.steps),
      BWM_DBL("train.p_plan", train.p_plan),
      BWM_U64("train.seed", train.seed),
      Key{"train.mode", [](const RunConfig& c) { return std::string(mode_name(c.train.mode)); },
          [](RunConfig& c, const std::string& v) { c.train.mode = mode_from_name(v); }},
      BWM_INT("train.log_every", train.log_every),
      BWM_BOOL("train.cosine", train.cosine),
      BWM_INT("train.orientations", train.orientations),
  };
  return k;
}

#undef BWM_INT
#undef BWM_U64
#undef BWM_DBL
#undef BWM_BOOL

void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  if (key.rfind("train.lr.", 0) == 0) {
    cfg.train.group_lr[key.substr(9)] = std::stod(value);
    return;
  }
  for (const auto& k : keys()) {
    if (key == k.name) {
      try {
        k.set(cfg, value);
      } catch (const std::invalid_argument& e) {
        throw std::invalid_argument("config key " + key + ": " + e.what());
      }
      return;
    }
  }
  throw std::invalid_argument("unknown config key '" + key + "'");
}

nlohmann::json config_json(const RunConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& k : keys()) j[k.name] = k.get(cfg);
  for (const auto& [g, r] : cfg.train.group_lr) j["train.lr." + g] = fmt(r);
  return j;
}

RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig cfg;
  for (auto it = j.begin(); it != j.end(); ++it) set_key(cfg, it.key(), it.value().get<std::string>());
  return cfg;
}

}  // namespace

RunConfig parse_run_config(std::istream& in) {
  RunConfig cfg;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(n) + ": expected key = value");
    set_key(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  return parse_run_config(in);
}

std::string format_run_config(const RunConfig& cfg) {
  std::string s;
  for (const auto& k : keys()) s += std::string(k.name) + " = " + k.get(cfg) + "\n";
  for (const auto& [g, r] : cfg.train.group_lr) s += "train.lr." + g + " = " + fmt(r) + "\n";
  return s;
}

double warmup_factor(int step, int warmup_steps) {
  if (warmup_steps <= 0) return 1.0;
  return std::min(1.0, static_cast<double>(step) / warmup_steps);
}

double schedule_factor(int step, const TrainConfig& cfg) {
  double f = warmup_factor(step, cfg.warmup_steps);
  if (cfg.cosine && cfg.steps > cfg.warmup_steps && step > cfg.warmup_steps) {
    const double u = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps));
    f *= 0.5 * (1.0 + std::cos(std::numbers::pi * u));
  }
  return f;
}

template <typename Scalar>
Dataset<Scalar> prepare_dataset(const std::vector<PatientTrajectory>& cohort, const PatchCodec<Scalar>& codec) {
  Dataset<Scalar> d;
  for (const auto& traj : cohort) {
    PreparedSubject<Scalar> s;
    s.id = traj.subject_id;
    s.demographics = traj.demographics;
    s.plans = traj.plans;
    for (const auto& tp : traj.timepoints) {
      PreparedTimepoint<Scalar> p;
      p.day = tp.day;
      p.latent = codec.encode(tp.volume);
      p.mask = mask_rows<Scalar>(tp.mask);
      p.tumor_voxels = tp.mask.tumor_voxels();
      p.volume = tp.volume;
      p.seg = tp.mask;
      s.timepoints.push_back(std::move(p));
    }
    const int idx = static_cast<int>(d.subjects.size());
    for (auto& pair : make_pairs(traj)) d.examples.push_back(Example{idx, std::move(pair)});
    d.subjects.push_back(std::move(s));
  }
  return d;
}

std::vector<int> plan_query_ids(const Demographics& demo, const std::vector<TreatmentPlan>& history) {
  return vocabulary().encode(render_context(demo, history, Task::plan));
}

std::vector<int> img_context_ids(const Demographics& demo, const std::vector<TreatmentPlan>& history,
                                 const TreatmentPlan& plan, int interval_days) {
  return vocabulary().encode(render_context(demo, history, Task::img, plan, interval_days));
}

namespace {

template <typename Scalar>
void add_alignment(const WorldModel<Scalar>& model, ParamBinder<Scalar>& bind, const ForwardResult<Scalar>& f,
                   const Matrix<Scalar>& mask, double alpha, LossTerms<Scalar>& out) {
  const auto& cfg = model.config();
  out.alpha = alpha;
  if (!cfg.mask_align) {
    out.total = out.main;
    return;
  }
  out.align_logits = model.aligner(bind, f.taps);
  out.focal = ad::focal_loss_from_logits(out.align_logits, mask, static_cast<Scalar>(cfg.focal_gamma),
                                         static_cast<Scalar>(cfg.prob_eps));
  out.dice = ad::dice_loss_from_logits(out.align_logits, mask, static_cast<Scalar>(cfg.dice_eps));
  out.total = out.main + ad::scale(out.focal + out.dice, static_cast<Scalar>(alpha));
}

}  // namespace

template <typename Scalar>
LossTerms<Scalar> plan_loss(const WorldModel<Scalar>& model, ParamBinder<Scalar>& bind,
                            const PreparedTimepoint<Scalar>& current, const std::vector<int>& query,
                            const TreatmentPlan& target) {
  const auto answer = plan_answer_ids(target);
  if (answer.empty()) throw std::invalid_argument("plan_loss: empty target plan");
  if (query.empty()) throw std::invalid_argument("plan_loss: empty query");
  std::vector<int> text = query;
  text.insert(text.end(), answer.begin(), answer.end());
  const auto seq = build_sequence(current.latent, text, Task::plan, static_cast<const LatentGrid<Scalar>*>(nullptr), true);
  const auto f = model.forward(bind, seq);
  std::vector<int> rows;
  std::vector<int> targets = answer;
  targets.push_back(Vocabulary::kEos);
  for (std::size_t k = 0; k < targets.size(); ++k) rows.push_back(seq.text_position(static_cast<int>(query.size() - 1 + k)));
  LossTerms<Scalar> out;
  out.logits = model.plan_head(bind, ad::gather_rows(f.hidden.back(), rows));
  out.main = ad::softmax_cross_entropy(out.logits, targets);
  add_alignment(model, bind, f, current.mask, alignment_weight(Task::plan, std::nullopt), out);
  return out;
}

template <typename Scalar>
LossTerms<Scalar> img_loss(const WorldModel<Scalar>& model, ParamBinder<Scalar>& bind,
                           const PreparedTimepoint<Scalar>& current, const PreparedTimepoint<Scalar>& future,
                           const std::vector<int>& context, Scalar t, const Matrix<Scalar>& z0) {
  // The flow transports noise to the displacement between the two latents;
  // generation adds the integrated displacement back onto the current latent.
  const Scalar scale = static_cast<Scalar>(model.config().resolved_flow_scale());
  const LatentGrid<Scalar> z1{future.latent.grid, (future.latent.tokens - current.latent.tokens) / scale};
  const auto zt = noise_augment(z1, t, z0);
  const auto seq = build_sequence(zt, context, Task::img, &current.latent, true);
  const auto f = model.forward(bind, seq);
  LossTerms<Scalar> out;
  out.t = static_cast<double>(t);
  out.logits = model.flow_head(bind, f.image_out, zt.tokens, t);
  const Matrix<Scalar> target = z1.tokens - z0;
  out.main = ad::scale(ad::mse(out.logits, target), static_cast<Scalar>(model.config().lambda_img));
  add_alignment(model, bind, f, future.mask, alignment_weight(Task::img, static_cast<double>(t)), out);
  return out;
}

template <typename Scalar>
LossTerms<Scalar> plan_loss(const WorldModel<Scalar>& model, ParamBinder<Scalar>& bind, const Dataset<Scalar>& data,
                            const Example& ex) {
  const auto& s = data.subject_of(ex);
  return plan_loss(model, bind, s.timepoints.at(static_cast<std::size_t>(ex.pair.source)),
                   plan_query_ids(s.demographics, ex.pair.history), ex.pair.next_plan);
}

template <typename Scalar>
LossTerms<Scalar> img_loss(const WorldModel<Scalar>& model, ParamBinder<Scalar>& bind, const Dataset<Scalar>& data,
                           const Example& ex, Scalar t, const Matrix<Scalar>& z0) {
  const auto& s = data.subject_of(ex);
  return img_loss(model, bind, s.timepoints.at(static_cast<std::size_t>(ex.pair.source)),
                  s.timepoints.at(static_cast<std::size_t>(ex.pair.target)),
                  img_context_ids(s.demographics, ex.pair.history, ex.pair.plan_between, ex.pair.interval_days), t,
                  z0);
}

template <typename Scalar>
AdamW<Scalar>::AdamW(const ParamStore<Scalar>& store) {
  for (int i = 0; i < store.size(); ++i) {
    m_.push_back(Matrix<Scalar>::Zero(store.value(i).rows(), store.value(i).cols()));
    v_.push_back(Matrix<Scalar>::Zero(store.value(i).rows(), store.value(i).cols()));
  }
}

template <typename Scalar>
double AdamW<Scalar>::step(ParamStore<Scalar>& store, const TrainConfig& cfg) {
  if (static_cast<int>(m_.size()) != store.size()) throw std::logic_error("AdamW: optimizer/parameter count mismatch");
  ++step_;
  factor_ = schedule_factor(step_, cfg);
  double sq = 0;
  for (int i = 0; i < store.size(); ++i)
    if (store.info(i).trainable) sq += store.grad(i).template cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  const double clip = cfg.clip_norm > 0 && norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
  const double bc1 = 1.0 - std::pow(cfg.beta1, step_);
  const double bc2 = 1.0 - std::pow(cfg.beta2, step_);
  const auto b1 = static_cast<Scalar>(cfg.beta1);
  const auto b2 = static_cast<Scalar>(cfg.beta2);
  for (int i = 0; i < store.size(); ++i) {
    const auto& info = store.info(i);
    if (!info.trainable) continue;
    const double lr = cfg.group_rate(info.group) * factor_;
    auto& p = store.value(i);
    const Matrix<Scalar> g = store.grad(i) * static_cast<Scalar>(clip);
    auto& m = m_[static_cast<std::size_t>(i)];
    auto& v = v_[static_cast<std::size_t>(i)];
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.cwiseAbs2();
    if (info.decay) p *= static_cast<Scalar>(1.0 - lr * cfg.weight_decay);
    const auto denom = (v.array() / static_cast<Scalar>(bc2)).sqrt() + static_cast<Scalar>(cfg.adam_eps);
    p.array() -= static_cast<Scalar>(lr / bc1) * m.array() / denom;
  }
  return norm;
}

std::string format_log(const StepLog& s) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "step=%d task=%s loss=%.6g main=%.6g focal=%.6g dice=%.6g grad_norm=%.4g lr=%.4g",
                s.step, std::string(task_name(s.task)).c_str(), s.loss, s.main, s.focal, s.dice, s.grad_norm, s.lr);
  return buf;
}

template <typename Scalar>
TrainState<Scalar> init_state(const RunConfig& cfg, PatchCodec<Scalar> codec) {
  cfg.train.validate();
  if (codec.patch() != cfg.model.patch || codec.channels() != cfg.model.latent_channels)
    throw std::invalid_argument("init_state: codec (patch " + std::to_string(codec.patch()) + ", " +
                                std::to_string(codec.channels()) + " channels) does not match model config");
  TrainState<Scalar> s;
  s.model = WorldModel<Scalar>(cfg.model, cfg.model_seed);
  s.optimizer = AdamW<Scalar>(s.model.params());
  s.codec = std::move(codec);
  s.config = cfg.train;
  return s;
}

template <typename Scalar>
double estimate_flow_scale(const Dataset<Scalar>& data) {
  double sq = 0, n = 0;
  for (const auto& ex : data.examples) {
    const auto& s = data.subject_of(ex);
    const auto& a = s.timepoints.at(static_cast<std::size_t>(ex.pair.source)).latent.tokens;
    const auto& b = s.timepoints.at(static_cast<std::size_t>(ex.pair.target)).latent.tokens;
    sq += (b - a).template cast<double>().squaredNorm();
    n += static_cast<double>(a.size());
  }
  if (n == 0 || !(sq > 0)) throw std::invalid_argument("estimate_flow_scale: no non-trivial training pairs");
  return std::sqrt(sq / n);
}

template <typename Scalar>
TrainState<Scalar> init_state(RunConfig cfg, PatchCodec<Scalar> codec, const Dataset<Scalar>& data) {
  if (!(cfg.model.flow_scale > 0)) cfg.model.flow_scale = estimate_flow_scale(data);
  return init_state(cfg, std::move(codec));
}

std::mt19937_64 step_rng(std::uint64_t seed, int step) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), 0x7a1du};
  return std::mt19937_64(seq);
}

namespace {

// Timepoint `index` of `s` in orientation `code`, re-encoded unless code is 0.
template <typename Scalar>
PreparedTimepoint<Scalar> view(const PatchCodec<Scalar>& codec, const PreparedSubject<Scalar>& s, int index, int code) {
  const auto& tp = s.timepoints.at(static_cast<std::size_t>(index));
  if (code == 0) return tp;
  PreparedTimepoint<Scalar> out;
  out.day = tp.day;
  out.volume.shape = tp.volume.shape;
  out.volume.data = reorient_voxels(tp.volume.data, tp.volume.shape, code);
  out.seg.shape = tp.seg.shape;
  out.seg.data = reorient_voxels(tp.seg.data, tp.seg.shape, code);
  out.latent = codec.encode(out.volume);
  out.mask = mask_rows<Scalar>(out.seg);
  out.tumor_voxels = tp.tumor_voxels;
  return out;
}

}  // namespace

template <typename Scalar>
StepLog train_step(TrainState<Scalar>& state, const Dataset<Scalar>& data) {
  if (data.examples.empty()) throw std::invalid_argument("train_step: empty dataset");
  const auto& cfg = state.config;
  const int step = state.step + 1;
  auto rng = step_rng(cfg.seed, step);
  Task task = cfg.mode == TrainMode::plan_only ? Task::plan : Task::img;
  if (cfg.mode == TrainMode::unified) task = std::bernoulli_distribution(cfg.p_plan)(rng) ? Task::plan : Task::img;

  auto& params = state.model.params();
  params.zero_grad();
  StepLog log;
  log.step = step;
  log.task = task;
  std::uniform_int_distribution<std::size_t> pick(0, data.examples.size() - 1);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const Scalar w = Scalar(1) / static_cast<Scalar>(cfg.batch);
  for (int b = 0; b < cfg.batch; ++b) {
    const auto& ex = data.examples[pick(rng)];
    ad::Tape<Scalar> tape;
    ParamBinder<Scalar> bind(tape, params);
    LossTerms<Scalar> terms;
    const auto& s = data.subject_of(ex);
    const int orient = cfg.orientations > 1 ? std::uniform_int_distribution<int>(0, cfg.orientations - 1)(rng) : 0;
    const auto cur = view(state.codec, s, ex.pair.source, orient);
    if (task == Task::plan) {
      terms = plan_loss(state.model, bind, cur, plan_query_ids(s.demographics, ex.pair.history), ex.pair.next_plan);
    } else {
      const auto fut = view(state.codec, s, ex.pair.target, orient);
      const auto t = static_cast<Scalar>(unif(rng));
      const Shape3 g = state.model.config().latent_grid();
      const auto z0 = standard_normal<Scalar>(g.voxels(), state.model.config().latent_channels, rng);
      terms = img_loss(state.model, bind, cur, fut,
                       img_context_ids(s.demographics, ex.pair.history, ex.pair.plan_between, ex.pair.interval_days), t,
                       z0);
    }
    const double loss = static_cast<double>(terms.total.item());
    if (!std::isfinite(loss))
      throw std::runtime_error("non-finite loss at step " + std::to_string(step) + " (task " +
                               std::string(task_name(task)) + ", subject " + ex.pair.subject_id + " pair " +
                               std::to_string(ex.pair.source) + "->" + std::to_string(ex.pair.target) +
                               ", main=" + std::to_string(static_cast<double>(terms.main.item())) + ")");
    tape.backward(terms.total, w);
    bind.collect(params);
    log.loss += loss / cfg.batch;
    log.main += static_cast<double>(terms.main.item()) / cfg.batch;
    if (terms.focal.valid()) log.focal += static_cast<double>(terms.focal.item()) / cfg.batch;
    if (terms.dice.valid()) log.dice += static_cast<double>(terms.dice.item()) / cfg.batch;
  }
  log.grad_norm = state.optimizer.step(params, cfg);
  log.lr = cfg.lr * state.optimizer.lr_factor();
  state.step = step;
  return log;
}

template <typename Scalar>
void train(TrainState<Scalar>& state, const Dataset<Scalar>& data, const std::function<void(const StepLog&)>& log) {
  while (state.step < state.config.steps) {
    const auto s = train_step(state, data);
    if (log) log(s);
  }
}

namespace {

constexpr char kMagic[8] = {'B', 'W', 'M', 'C', 'K', 'P', 'T', '\0'};
constexpr char kTrailer[8] = {'B', 'W', 'M', 'E', 'N', 'D', '\0', '\0'};

template <typename Scalar, typename Derived>
void write_matrix(std::ostream& out, const Eigen::MatrixBase<Derived>& m) {
  write_u64(out, static_cast<std::uint64_t>(m.rows()));
  write_u64(out, static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) write_f64(out, static_cast<double>(m(i, j)));
}

template <typename Scalar>
Matrix<Scalar> read_matrix(std::istream& in) {
  const auto r = read_u64(in);
  const auto c = read_u64(in);
  if (r > (1u << 24) || c > (1u << 24) || r * c > (1ull << 28)) throw std::runtime_error("checkpoint: corrupt matrix header");
  Matrix<Scalar> m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<Scalar>(read_f64(in));
  return m;
}

void write_string(std::ostream& out, const std::string& s) {
  write_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
  const auto n = read_u64(in);
  if (n > (1u << 24)) throw std::runtime_error("checkpoint: corrupt string length");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

}  // namespace

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const TrainState<Scalar>& state) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof kMagic);
    write_u32(out, kCheckpointVersion);
    RunConfig rc;
    rc.model = state.model.config();
    rc.train = state.config;
    nlohmann::json meta;
    meta["config"] = config_json(rc);
    meta["step"] = state.step;
    meta["optimizer_steps"] = state.optimizer.steps();
    write_string(out, meta.dump());
    const auto& c = state.codec;
    write_u32(out, static_cast<std::uint32_t>(c.patch()));
    write_matrix<Scalar>(out, c.enc_weight());
    write_matrix<Scalar>(out, c.enc_bias());
    write_matrix<Scalar>(out, c.dec_weight());
    write_matrix<Scalar>(out, c.dec_bias());
    const auto& p = state.model.params();
    write_u64(out, static_cast<std::uint64_t>(p.size()));
    const bool has_opt = static_cast<int>(state.optimizer.first().size()) == p.size();
    for (int i = 0; i < p.size(); ++i) {
      write_string(out, p.info(i).name);
      write_matrix<Scalar>(out, p.value(i));
      write_u32(out, has_opt ? 1u : 0u);
      if (has_opt) {
        write_matrix<Scalar>(out, state.optimizer.first()[static_cast<std::size_t>(i)]);
        write_matrix<Scalar>(out, state.optimizer.second()[static_cast<std::size_t>(i)]);
      }
    }
    out.write(kTrailer, sizeof kTrailer);
    if (!out) throw std::runtime_error("write failed: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename Scalar>
TrainState<Scalar> load_checkpoint(const std::filesystem::path& path, const ModelConfig* expect) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw std::runtime_error(path.string() + " is not a checkpoint (bad magic)");
  const auto version = read_u32(in);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                             std::to_string(kCheckpointVersion) + ")");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_string(in));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: corrupt header: ") + e.what());
  }
  const RunConfig rc = config_from_json(meta.at("config"));
  if (expect) {
    if (!(expect->volume == rc.model.volume) || expect->patch != rc.model.patch)
      throw std::invalid_argument("checkpoint was trained for grid " + rc.model.volume.str() + " with patch " +
                                  std::to_string(rc.model.patch) + ", but grid " + expect->volume.str() +
                                  " with patch " + std::to_string(expect->patch) + " was requested");
  }
  TrainState<Scalar> s;
  s.model = WorldModel<Scalar>(rc.model, 0);
  s.config = rc.train;
  s.step = meta.at("step").get<int>();
  PatchCodec<Scalar> codec;
  const int patch = static_cast<int>(read_u32(in));
  auto ew = read_matrix<Scalar>(in);
  auto eb = read_matrix<Scalar>(in);
  auto dw = read_matrix<Scalar>(in);
  auto db = read_matrix<Scalar>(in);
  codec.set(patch, ew, eb, dw, db);
  s.codec = std::move(codec);
  auto& p = s.model.params();
  const auto n = read_u64(in);
  if (n != static_cast<std::uint64_t>(p.size()))
    throw std::runtime_error("checkpoint: parameter count " + std::to_string(n) + " does not match model (" +
                             std::to_string(p.size()) + ")");
  AdamW<Scalar> opt(p);
  bool all_opt = true;
  for (int i = 0; i < p.size(); ++i) {
    const auto name = read_string(in);
    const int idx = p.find(name);
    if (idx < 0) throw std::runtime_error("checkpoint: unknown parameter " + name);
    auto v = read_matrix<Scalar>(in);
    if (v.rows() != p.value(idx).rows() || v.cols() != p.value(idx).cols())
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    p.value(idx) = std::move(v);
    if (read_u32(in)) {
      opt.first()[static_cast<std::size_t>(idx)] = read_matrix<Scalar>(in);
      opt.second()[static_cast<std::size_t>(idx)] = read_matrix<Scalar>(in);
    } else {
      all_opt = false;
    }
  }
  char trailer[8];
  in.read(trailer, sizeof trailer);
  if (!in || std::memcmp(trailer, kTrailer, sizeof trailer) != 0) throw std::runtime_error("checkpoint: truncated file");
  opt.set_steps(all_opt ? meta.at("optimizer_steps").get<int>() : 0);
  s.optimizer = std::move(opt);
  return s;
}

#define BWM_INSTANTIATE(S)                                                                                            \
  template Dataset<S> prepare_dataset(const std::vector<PatientTrajectory>&, const PatchCodec<S>&);                  \
  template LossTerms<S> plan_loss(const WorldModel<S>&, ParamBinder<S>&, const PreparedTimepoint<S>&,                \
                                  const std::vector<int>&, const TreatmentPlan&);                                    \
  template LossTerms<S> img_loss(const WorldModel<S>&, ParamBinder<S>&, const PreparedTimepoint<S>&,                 \
                                 const PreparedTimepoint<S>&, const std::vector<int>&, S, const Matrix<S>&);         \
  template LossTerms<S> plan_loss(const WorldModel<S>&, ParamBinder<S>&, const Dataset<S>&, const Example&);         \
  template LossTerms<S> img_loss(const WorldModel<S>&, ParamBinder<S>&, const Dataset<S>&, const Example&, S,        \
                                 const Matrix<S>&);                                                                  \
  template class AdamW<S>;                                                                                            \
  template TrainState<S> init_state(const RunConfig&, PatchCodec<S>);                                                 \
  template TrainState<S> init_state(RunConfig, PatchCodec<S>, const Dataset<S>&);                                     \
  template double estimate_flow_scale(const Dataset<S>&);                                                             \
  template StepLog train_step(TrainState<S>&, const Dataset<S>&);                                                     \
  template void train(TrainState<S>&, const Dataset<S>&, const std::function<void(const StepLog&)>&);                \
  template void save_checkpoint(const std::filesystem::path&, const TrainState<S>&);                                 \
  template TrainState<S> load_checkpoint(const std::filesystem::path&, const ModelConfig*);

BWM_INSTANTIATE(float)
BWM_INSTANTIATE(double)

#undef BWM_INSTANTIATE

}  // namespace bwm
