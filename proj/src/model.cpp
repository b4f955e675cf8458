#include "bwm/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace bwm {

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("ModelConfig: " + m); };
  if (layers < 2 || layers % 2) fail("layers must be even and >= 2");
  if (width <= 0 || heads <= 0 || width % heads) fail("width must be divisible by heads");
  if (ffn_mult < 1) fail("ffn_mult must be >= 1");
  if (latent_channels < 1) fail("latent_channels must be >= 1");
  if (patch < 1 || volume.depth % patch || volume.height % patch || volume.width % patch)
    fail("volume " + volume.str() + " not divisible by patch " + std::to_string(patch));
  if (taps.empty()) fail("aligner tap set is empty");
  for (std::size_t i = 0; i < taps.size(); ++i) {
    if (taps[i] < 1 || taps[i] > shared_layers()) fail("aligner taps must lie in [1, N/2]");
    if (i && taps[i] <= taps[i - 1]) fail("aligner taps must be strictly increasing");
  }
  if (!(lambda_img > 0)) fail("lambda_img must be positive");
  if (focal_gamma < 0) fail("focal_gamma must be non-negative");
  if (sampler_steps < 1) fail("sampler_steps must be >= 1");
  if (flow_blocks < 0) fail("flow_blocks must be >= 0");
  if (aligner_width < 1) fail("aligner_width must be >= 1");
  if (max_text < 1) fail("max_text must be >= 1");
  if (width % 2) fail("width must be even for the time embedding");
  if (!(flow_scale >= 0)) fail("flow_scale must be >= 0");
}

Matrix<double> build_attention_mask(const std::vector<int>& text, int length) {
  Matrix<double> m = Matrix<double>::Zero(length, length);
  std::vector<char> is_text(static_cast<std::size_t>(length), 0);
  for (int i : text) {
    if (i < 0 || i >= length) throw std::out_of_range("build_attention_mask: text index out of range");
    is_text[static_cast<std::size_t>(i)] = 1;
  }
  const double ninf = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < length; ++i) {
    if (!is_text[static_cast<std::size_t>(i)]) continue;
    for (int j = i + 1; j < length; ++j)
      if (is_text[static_cast<std::size_t>(j)]) m(i, j) = ninf;
  }
  return m;
}

Matrix<double> build_planning_mask(const std::vector<int>& causal, int length) {
  Matrix<double> m = Matrix<double>::Zero(length, length);
  const double ninf = -std::numeric_limits<double>::infinity();
  for (int j : causal) {
    if (j < 0 || j >= length) throw std::out_of_range("build_planning_mask: index out of range");
    m.col(j).head(j).setConstant(ninf);
  }
  return m;
}

template <typename Scalar>
RowVector<Scalar> timestep_embedding(Scalar t, int dim) {
  const int half = dim / 2;
  RowVector<Scalar> e(dim);
  const double x = static_cast<double>(t) * 1000.0;
  for (int k = 0; k < half; ++k) {
    const double f = std::exp(-std::log(10000.0) * k / std::max(half, 1));
    e(k) = static_cast<Scalar>(std::sin(x * f));
    e(half + k) = static_cast<Scalar>(std::cos(x * f));
  }
  return e;
}

template <typename Scalar>
WorldModel<Scalar>::WorldModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const int d = cfg_.width;
  const int h = d * cfg_.ffn_mult;
  const int C = cfg_.latent_channels;
  const int V = vocabulary().size();
  const long L_img = cfg_.latent_grid().voxels();
  auto normal = [&](int r, int c, double std) {
    return Matrix<Scalar>(standard_normal<Scalar>(r, c, rng) * static_cast<Scalar>(std));
  };
  auto zeros = [](int r, int c) { return Matrix<Scalar>(Matrix<Scalar>::Zero(r, c)); };
  auto ones = [](int r, int c) { return Matrix<Scalar>(Matrix<Scalar>::Ones(r, c)); };
  auto& P = params_;
  auto& I = ids_;

  I.vocab = P.add("embed.vocab", "embed.frozen", normal(V, d, 1.0), false, false);
  I.plan_embed = P.add("embed.plan", "embed.plan", normal(Vocabulary::kPlanCount, d, 1.0), true, false);
  I.latent_w = P.add("embed.latent.w", "embed.latent", normal(2 * C, d, 1.0 / std::sqrt(2.0 * C)));
  I.latent_b = P.add("embed.latent.b", "embed.latent", zeros(1, d), true, false);
  I.pos3d = P.add("embed.pos3d", "embed.pos", normal(static_cast<int>(L_img), d, 0.5), true, false);
  I.pos_text = P.add("embed.pos_text", "embed.pos", normal(cfg_.max_text, d, 0.5), true, false);

  const double s_in = 1.0 / std::sqrt(static_cast<double>(d));
  const double s_out = 0.5 / std::sqrt(static_cast<double>(h));
  auto add_ffn = [&](const std::string& prefix, const std::string& group) {
    LayerParamIds::Ffn f{};
    f.w1 = P.add(prefix + ".w1", group, normal(d, h, s_in));
    f.b1 = P.add(prefix + ".b1", group, zeros(1, h), true, false);
    f.w2 = P.add(prefix + ".w2", group, normal(h, d, s_out));
    f.b2 = P.add(prefix + ".b2", group, zeros(1, d), true, false);
    return f;
  };
  for (int l = 1; l <= cfg_.layers; ++l) {
    const std::string n = "layer" + std::to_string(l);
    LayerParamIds lp{};
    lp.ln1_g = P.add(n + ".attn.ln.g", "attention", ones(1, d), true, false);
    lp.ln1_b = P.add(n + ".attn.ln.b", "attention", zeros(1, d), true, false);
    lp.wq = P.add(n + ".attn.wq", "attention", normal(d, d, s_in));
    lp.wk = P.add(n + ".attn.wk", "attention", normal(d, d, s_in));
    lp.wv = P.add(n + ".attn.wv", "attention", normal(d, d, s_in));
    lp.wo = P.add(n + ".attn.wo", "attention", normal(d, d, 0.5 * s_in));
    lp.ln2_g = P.add(n + ".ffn.ln.g", "ffn.norm", ones(1, d), true, false);
    lp.ln2_b = P.add(n + ".ffn.ln.b", "ffn.norm", zeros(1, d), true, false);
    if (l <= cfg_.shared_layers() || !cfg_.y_shaped) {
      lp.ffn[0] = lp.ffn[1] = add_ffn(n + ".ffn.shared", "ffn.shared");
    } else {
      lp.ffn[0] = add_ffn(n + ".ffn.plan", "ffn.plan");
      lp.ffn[1] = add_ffn(n + ".ffn.img", "ffn.img");
    }
    I.layers.push_back(lp);
  }

  I.head_ln_g = P.add("plan_head.ln.g", "plan_head", ones(1, d), true, false);
  I.head_ln_b = P.add("plan_head.ln.b", "plan_head", zeros(1, d), true, false);
  I.head_w = P.add("plan_head.w", "plan_head", normal(d, V, s_in));
  I.head_b = P.add("plan_head.b", "plan_head", zeros(1, V), true, false);

  I.t_w1 = P.add("flow_head.t.w1", "flow_head", normal(d, d, s_in));
  I.t_b1 = P.add("flow_head.t.b1", "flow_head", zeros(1, d), true, false);
  I.t_w2 = P.add("flow_head.t.w2", "flow_head", normal(d, d, s_in));
  I.t_b2 = P.add("flow_head.t.b2", "flow_head", zeros(1, d), true, false);
  for (int b = 0; b < cfg_.flow_blocks; ++b) {
    const std::string n = "flow_head.block" + std::to_string(b);
    FlowBlockIds fb{};
    fb.mod_w = P.add(n + ".mod.w", "flow_head", normal(d, 4 * d, 0.1 * s_in));
    fb.mod_b = P.add(n + ".mod.b", "flow_head", zeros(1, 4 * d), true, false);
    fb.wq = P.add(n + ".attn.wq", "flow_head", normal(d, d, s_in));
    fb.wk = P.add(n + ".attn.wk", "flow_head", normal(d, d, s_in));
    fb.wv = P.add(n + ".attn.wv", "flow_head", normal(d, d, s_in));
    fb.wo = P.add(n + ".attn.wo", "flow_head", normal(d, d, 0.5 * s_in));
    fb.w1 = P.add(n + ".mlp.w1", "flow_head", normal(d, h, s_in));
    fb.b1 = P.add(n + ".mlp.b1", "flow_head", zeros(1, h), true, false);
    fb.w2 = P.add(n + ".mlp.w2", "flow_head", normal(h, d, s_out));
    fb.b2 = P.add(n + ".mlp.b2", "flow_head", zeros(1, d), true, false);
    I.flow.push_back(fb);
  }
  I.out_mod_w = P.add("flow_head.out.mod.w", "flow_head", normal(d, 2 * d, 0.1 * s_in));
  I.out_mod_b = P.add("flow_head.out.mod.b", "flow_head", zeros(1, 2 * d), true, false);
  I.out_w = P.add("flow_head.out.w", "flow_head", normal(d, C, 0.5 * s_in));
  I.out_b = P.add("flow_head.out.b", "flow_head", zeros(1, C), true, false);
  I.skip_w = P.add("flow_head.out.skip.w", "flow_head", zeros(d, C));
  I.skip_b = P.add("flow_head.out.skip.b", "flow_head", zeros(1, C), true, false);

  I.aligner = add_aligner_params(P, static_cast<int>(cfg_.taps.size()), d, cfg_.aligner_width, rng);
}

template <typename Scalar>
std::shared_ptr<const Matrix<Scalar>> WorldModel<Scalar>::mask_for(const TokenSequence<Scalar>& seq) const {
  const auto causal = seq.causal_index();
  Matrix<double> m = seq.task == Task::plan ? build_planning_mask(causal, seq.length())
                                            : build_attention_mask(causal, seq.length());
  return std::make_shared<const Matrix<Scalar>>(m.cast<Scalar>());
}

template <typename Scalar>
ad::Var<Scalar> WorldModel<Scalar>::embed(ParamBinder<Scalar>& bind, const TokenSequence<Scalar>& seq) const {
  auto& tape = bind.tape();
  const int C = cfg_.latent_channels;
  const long L_img = cfg_.latent_grid().voxels();
  if (!(seq.image.grid == cfg_.latent_grid()) || seq.image.channels() != C)
    throw std::invalid_argument("embed: sequence latent " + seq.image.grid.str() + "x" +
                                std::to_string(seq.image.channels()) + " does not match model latent " +
                                cfg_.latent_grid().str() + "x" + std::to_string(C));
  if ((seq.task == Task::img) != seq.current.has_value())
    throw std::invalid_argument("embed: conditioning latent present iff task is img");

  const int V = vocabulary().size();
  const auto vocab = bind(ids_.vocab);
  const auto table = ad::concat_rows<Scalar>({ad::slice_rows(vocab, 0, Vocabulary::kFirstPlan), bind(ids_.plan_embed),
                                              ad::slice_rows(vocab, Vocabulary::kFirstBase, V - Vocabulary::kFirstBase)});

  Matrix<Scalar> x;
  ad::Var<Scalar> w = bind(ids_.latent_w);
  if (seq.task == Task::img) {
    x.resize(L_img, 2 * C);
    x << seq.image.tokens, *seq.current;
  } else {
    x = seq.image.tokens;
    w = ad::slice_rows(w, 0, C);
  }
  auto img = ad::add_row(ad::matmul(tape.constant(std::move(x)), w), bind(ids_.latent_b));
  img = img + bind(ids_.pos3d);

  const int rest_begin = seq.image_begin() + static_cast<int>(L_img);
  const int n_rest = seq.length() - rest_begin;
  if (n_rest > cfg_.max_text)
    throw std::invalid_argument("embed: " + std::to_string(n_rest) + " text positions exceed max_text " +
                                std::to_string(cfg_.max_text));
  std::vector<int> head_ids(seq.ids.begin(), seq.ids.begin() + seq.image_begin());
  std::vector<ad::Var<Scalar>> parts{ad::gather_rows(table, head_ids), img};
  if (n_rest > 0) {
    std::vector<int> rest_ids(seq.ids.begin() + rest_begin, seq.ids.end());
    parts.push_back(ad::gather_rows(table, rest_ids) + ad::slice_rows(bind(ids_.pos_text), 0, n_rest));
  }
  return ad::concat_rows(parts);
}

template <typename Scalar>
ad::Var<Scalar> WorldModel<Scalar>::self_attention(ParamBinder<Scalar>& bind, ad::Var<Scalar> x, int wq, int wk,
                                                   int wv, int wo, std::shared_ptr<const Matrix<Scalar>> mask) const {
  const auto q = ad::matmul(x, bind(wq));
  const auto k = ad::matmul(x, bind(wk));
  const auto v = ad::matmul(x, bind(wv));
  return ad::matmul(ad::attention(q, k, v, cfg_.heads, std::move(mask)), bind(wo));
}

template <typename Scalar>
ad::Var<Scalar> WorldModel<Scalar>::mlp(ParamBinder<Scalar>& bind, ad::Var<Scalar> x, int w1, int b1, int w2,
                                        int b2) const {
  const auto a = ad::silu(ad::add_row(ad::matmul(x, bind(w1)), bind(b1)));
  return ad::add_row(ad::matmul(a, bind(w2)), bind(b2));
}

template <typename Scalar>
ad::Var<Scalar> WorldModel<Scalar>::uni_attn_layer(ParamBinder<Scalar>& bind, ad::Var<Scalar> h,
                                                   std::shared_ptr<const Matrix<Scalar>> mask, int l) const {
  const auto& p = layer(l);
  const auto a = ad::layer_norm(h, bind(p.ln1_g), bind(p.ln1_b));
  return self_attention(bind, a, p.wq, p.wk, p.wv, p.wo, std::move(mask)) + h;
}

template <typename Scalar>
ad::Var<Scalar> WorldModel<Scalar>::ffn_route(ParamBinder<Scalar>& bind, ad::Var<Scalar> h, Task task, int l) const {
  const auto& p = layer(l);
  const auto& f = p.ffn[task == Task::plan ? 0 : 1];
  const auto a = ad::layer_norm(h, bind(p.ln2_g), bind(p.ln2_b));
  return mlp(bind, a, f.w1, f.b1, f.w2, f.b2) + h;
}

template <typename Scalar>
ForwardResult<Scalar> WorldModel<Scalar>::forward(ParamBinder<Scalar>& bind, const TokenSequence<Scalar>& seq) const {
  ForwardResult<Scalar> r;
  r.mask = mask_for(seq);
  r.input = embed(bind, seq);
  const long L_img = cfg_.latent_grid().voxels();
  ad::Var<Scalar> h = r.input;
  for (int l = 1; l <= cfg_.layers; ++l) {
    h = ffn_route(bind, uni_attn_layer(bind, h, r.mask, l), seq.task, l);
    r.hidden.push_back(h);
    if (std::find(cfg_.taps.begin(), cfg_.taps.end(), l) != cfg_.taps.end())
      r.taps.push_back(ad::slice_rows(h, seq.image_begin(), L_img));
  }
  r.image_out = ad::slice_rows(h, seq.image_begin(), L_img);
  return r;
}

template <typename Scalar>
ad::Var<Scalar> WorldModel<Scalar>::plan_head(ParamBinder<Scalar>& bind, ad::Var<Scalar> h) const {
  const auto a = ad::layer_norm(h, bind(ids_.head_ln_g), bind(ids_.head_ln_b));
  return ad::add_row(ad::matmul(a, bind(ids_.head_w)), bind(ids_.head_b));
}

template <typename Scalar>
ad::Var<Scalar> WorldModel<Scalar>::flow_head(ParamBinder<Scalar>& bind, ad::Var<Scalar> h_img,
                                              const Matrix<Scalar>& z_t, Scalar t) const {
  auto& tape = bind.tape();
  const int d = cfg_.width;
  const auto temb = tape.constant(timestep_embedding(t, d));
  auto c = ad::silu(ad::add_row(ad::matmul(temb, bind(ids_.t_w1)), bind(ids_.t_b1)));
  c = ad::silu(ad::add_row(ad::matmul(c, bind(ids_.t_w2)), bind(ids_.t_b2)));
  ad::Var<Scalar> x = h_img;
  for (const auto& b : ids_.flow) {
    const auto m = ad::add_row(ad::matmul(c, bind(b.mod_w)), bind(b.mod_b));
    const auto a = ad::modulate(ad::layer_norm(x), ad::slice_cols(m, 0, d), ad::slice_cols(m, d, d));
    x = self_attention(bind, a, b.wq, b.wk, b.wv, b.wo, nullptr) + x;
    const auto f = ad::modulate(ad::layer_norm(x), ad::slice_cols(m, 2 * d, d), ad::slice_cols(m, 3 * d, d));
    x = mlp(bind, f, b.w1, b.b1, b.w2, b.b2) + x;
  }
  const auto m = ad::add_row(ad::matmul(c, bind(ids_.out_mod_w)), bind(ids_.out_mod_b));
  const auto a = ad::modulate(ad::layer_norm(x), ad::slice_cols(m, 0, d), ad::slice_cols(m, d, d));
  const auto gain = ad::add_row(ad::matmul(c, bind(ids_.skip_w)), bind(ids_.skip_b));
  return ad::add_row(ad::matmul(a, bind(ids_.out_w)), bind(ids_.out_b)) + ad::mul_row(tape.constant(z_t), gain);
}

template <typename Scalar>
ad::Var<Scalar> WorldModel<Scalar>::aligner(ParamBinder<Scalar>& bind, const std::vector<ad::Var<Scalar>>& taps) const {
  return pyramid_fuse(bind, ids_.aligner, taps, cfg_.latent_grid(), cfg_.volume);
}

template class WorldModel<float>;
template class WorldModel<double>;
template RowVector<float> timestep_embedding(float, int);
template RowVector<double> timestep_embedding(double, int);

}  // namespace bwm
