#pragma once

// Y-shaped Mixture-of-Transformers backbone: attention shared across tasks in
// every layer, FFNs shared up to layer N/2 and task-specific above it, with a
// linear plan head, an adaLN flow head and the pyramid mask aligner.

#include "bwm/align.hpp"
#include "bwm/autodiff.hpp"
#include "bwm/params.hpp"
#include "bwm/tokenizer.hpp"

#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace bwm {

struct ModelConfig {
  int layers = 8;
  int width = 64;
  int heads = 4;
  int ffn_mult = 4;
  int latent_channels = 32;
  int patch = 4;
  Shape3 volume{32, 32, 32};
  std::vector<int> taps{1, 2, 4};  // 1-based layer indices feeding the aligner
  double focal_gamma = 2.0;
  double lambda_img = 4.0;
  int sampler_steps = 50;
  int flow_blocks = 2;
  int aligner_width = 16;
  int max_text = 96;
  bool y_shaped = true;    // false: every FFN shared across tasks
  bool mask_align = true;  // false: no alignment term in either loss
  double prob_eps = 1e-7;
  double dice_eps = 1e-6;
  // Displacement latents are divided by this before entering the flow; 0 means
  // "estimate from the training pairs" and is resolved by init_state.
  double flow_scale = 0.0;

  int shared_layers() const { return layers / 2; }
  Shape3 latent_grid() const { return Shape3{volume.depth / patch, volume.height / patch, volume.width / patch}; }
  double resolved_flow_scale() const {
    if (!(flow_scale > 0)) throw std::logic_error("ModelConfig: flow_scale not resolved (estimate it from training data)");
    return flow_scale;
  }
  AlignConfig align() const { return AlignConfig{focal_gamma, prob_eps, dice_eps}; }
  void validate() const;
};

// Additive mask with -inf exactly where i and j are both in `text` and j > i.
Matrix<double> build_attention_mask(const std::vector<int>& text, int length);

// Mask used for the planning task: no position may look at a later member of
// `causal`. Within `causal` it coincides with build_attention_mask; it also
// keeps non-text rows from relaying later text back to earlier text.
Matrix<double> build_planning_mask(const std::vector<int>& causal, int length);

template <typename Scalar>
struct ForwardResult {
  ad::Var<Scalar> input;                // H_0
  std::vector<ad::Var<Scalar>> hidden;  // H_1 .. H_N
  std::vector<ad::Var<Scalar>> taps;    // image rows of H_i, i in taps
  ad::Var<Scalar> image_out;            // image rows of H_N
  std::shared_ptr<const Matrix<Scalar>> mask;
};

struct LayerParamIds {
  int ln1_g, ln1_b, wq, wk, wv, wo;
  int ln2_g, ln2_b;
  // ffn[0] for the planning path, ffn[1] for imaging; identical ids when shared.
  struct Ffn {
    int w1, b1, w2, b2;
  } ffn[2];
};

struct FlowBlockIds {
  int mod_w, mod_b, wq, wk, wv, wo, w1, b1, w2, b2;
};

// Positions of every tensor inside the model's ParamStore.
struct ModelParamIds {
  std::vector<LayerParamIds> layers;
  std::vector<FlowBlockIds> flow;
  AlignerParams aligner;
  int vocab = -1, plan_embed = -1, latent_w = -1, latent_b = -1, pos3d = -1, pos_text = -1;
  int head_ln_g = -1, head_ln_b = -1, head_w = -1, head_b = -1;
  int t_w1 = -1, t_b1 = -1, t_w2 = -1, t_b2 = -1, out_mod_w = -1, out_mod_b = -1, out_w = -1, out_b = -1,
      skip_w = -1, skip_b = -1;
};

template <typename Scalar>
class WorldModel {
 public:
  using LayerParams = LayerParamIds;
  using FlowBlock = FlowBlockIds;

  WorldModel() = default;
  WorldModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore<Scalar>& params() { return params_; }
  const ParamStore<Scalar>& params() const { return params_; }
  const ModelParamIds& ids() const { return ids_; }
  const LayerParams& layer(int l) const { return ids_.layers.at(static_cast<std::size_t>(l - 1)); }

  // Embeds a sequence into H_0 (L x d).
  ad::Var<Scalar> embed(ParamBinder<Scalar>& bind, const TokenSequence<Scalar>& seq) const;

  // Masked multi-head self-attention with residual, layer l (1-based).
  ad::Var<Scalar> uni_attn_layer(ParamBinder<Scalar>& bind, ad::Var<Scalar> h,
                                 std::shared_ptr<const Matrix<Scalar>> mask, int l) const;
  // Residual FFN, shared for l <= N_sha and task-specific above.
  ad::Var<Scalar> ffn_route(ParamBinder<Scalar>& bind, ad::Var<Scalar> h, Task task, int l) const;

  ForwardResult<Scalar> forward(ParamBinder<Scalar>& bind, const TokenSequence<Scalar>& seq) const;

  // Vocabulary logits, one row per row of `h`.
  ad::Var<Scalar> plan_head(ParamBinder<Scalar>& bind, ad::Var<Scalar> h) const;
  // Velocity over image tokens (L_img x C_lat) at flow time t. The output
  // projection also reads the noisy latent z_t through a per-channel gain
  // produced from t, so the noise need not survive the whole trunk.
  ad::Var<Scalar> flow_head(ParamBinder<Scalar>& bind, ad::Var<Scalar> h_img, const Matrix<Scalar>& z_t,
                            Scalar t) const;
  // Voxel logits (voxels x 4) from the tapped features.
  ad::Var<Scalar> aligner(ParamBinder<Scalar>& bind, const std::vector<ad::Var<Scalar>>& taps) const;

  std::shared_ptr<const Matrix<Scalar>> mask_for(const TokenSequence<Scalar>& seq) const;

  template <typename Other>
  WorldModel<Other> cast() const {
    WorldModel<Other> m;
    m.cfg_ = cfg_;
    m.params_ = params_.template cast<Other>();
    m.ids_ = ids_;
    return m;
  }

 private:
  template <typename>
  friend class WorldModel;

  ad::Var<Scalar> self_attention(ParamBinder<Scalar>& bind, ad::Var<Scalar> x, int wq, int wk, int wv, int wo,
                                 std::shared_ptr<const Matrix<Scalar>> mask) const;
  ad::Var<Scalar> mlp(ParamBinder<Scalar>& bind, ad::Var<Scalar> x, int w1, int b1, int w2, int b2) const;

  ModelConfig cfg_;
  ParamStore<Scalar> params_;
  ModelParamIds ids_;
};

// Sinusoidal embedding of a scalar time, width `dim` (sin half then cos half).
template <typename Scalar>
RowVector<Scalar> timestep_embedding(Scalar t, int dim);

}  // namespace bwm
