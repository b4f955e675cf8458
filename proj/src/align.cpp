#include "bwm/align.hpp"

#include <algorithm>
#include <memory>

namespace bwm {

double alignment_weight(Task task, std::optional<double> t) {
  if (task == Task::plan) return 1.0;
  if (!t) throw std::invalid_argument("align_loss: imaging task requires t");
  return std::clamp(*t, 0.0, 1.0);
}

std::vector<Shape3> pyramid_stages(Shape3 latent, Shape3 volume, int taps) {
  if (taps < 1) throw std::invalid_argument("pyramid_fuse: at least one tap required");
  std::vector<Shape3> s{latent};
  for (int i = 1; i < taps; ++i) {
    const Shape3 p = s.back();
    s.push_back(Shape3{std::min(2 * p.depth, volume.depth), std::min(2 * p.height, volume.height),
                       std::min(2 * p.width, volume.width)});
  }
  s.push_back(volume);
  return s;
}

template <typename Scalar>
AlignerParams add_aligner_params(ParamStore<Scalar>& store, int taps, int width, int features, std::mt19937_64& rng) {
  AlignerParams p;
  const Scalar s_in = Scalar(1) / std::sqrt(static_cast<Scalar>(width));
  const Scalar s_out = Scalar(1) / std::sqrt(static_cast<Scalar>(features));
  for (int i = 0; i < taps; ++i) {
    const std::string n = "aligner.tap" + std::to_string(i);
    p.tap_weight.push_back(store.add(n + ".w", "aligner", standard_normal<Scalar>(width, features, rng) * s_in));
    p.tap_bias.push_back(store.add(n + ".b", "aligner", Matrix<Scalar>::Zero(1, features), true, false));
  }
  p.out_weight = store.add("aligner.out.w", "aligner", standard_normal<Scalar>(features, SegMask::kClasses, rng) * s_out);
  p.out_bias = store.add("aligner.out.b", "aligner", Matrix<Scalar>::Zero(1, SegMask::kClasses), true, false);
  return p;
}

namespace {

template <typename Scalar>
ad::Var<Scalar> resample(ad::Var<Scalar> x, Shape3 from, Shape3 to) {
  if (from == to) return x;
  auto r = std::make_shared<TrilinearResampler<Scalar>>(from, to);
  return ad::linear_map<Scalar>(
      x, [r](const Matrix<Scalar>& m) { return r->apply(m); }, [r](const Matrix<Scalar>& m) { return r->adjoint(m); });
}

}  // namespace

template <typename Scalar>
ad::Var<Scalar> pyramid_fuse(ParamBinder<Scalar>& bind, const AlignerParams& params,
                             const std::vector<ad::Var<Scalar>>& taps, Shape3 latent, Shape3 volume) {
  const int n = static_cast<int>(taps.size());
  if (n != static_cast<int>(params.tap_weight.size()))
    throw std::invalid_argument("pyramid_fuse: got " + std::to_string(n) + " taps, aligner expects " +
                                std::to_string(params.tap_weight.size()));
  for (const auto& h : taps)
    if (h.rows() != latent.voxels())
      throw std::invalid_argument("pyramid_fuse: tap rows do not match latent grid " + latent.str());
  const auto stages = pyramid_stages(latent, volume, n);
  auto project = [&](int i) {
    return ad::add_row(ad::matmul(taps[static_cast<std::size_t>(i)], bind(params.tap_weight[static_cast<std::size_t>(i)])),
                       bind(params.tap_bias[static_cast<std::size_t>(i)]));
  };
  ad::Var<Scalar> f = project(n - 1);
  for (int s = 1; s < n; ++s) {
    f = resample(f, stages[static_cast<std::size_t>(s - 1)], stages[static_cast<std::size_t>(s)]) +
        resample(project(n - 1 - s), latent, stages[static_cast<std::size_t>(s)]);
  }
  // The class map is per-voxel linear and interpolation weights sum to one, so
  // projecting before the last upsample is exact and four times cheaper.
  ad::Var<Scalar> logits = ad::add_row(ad::matmul(f, bind(params.out_weight)), bind(params.out_bias));
  return resample(logits, stages[static_cast<std::size_t>(n - 1)], volume);
}

template AlignerParams add_aligner_params(ParamStore<float>&, int, int, int, std::mt19937_64&);
template AlignerParams add_aligner_params(ParamStore<double>&, int, int, int, std::mt19937_64&);
template ad::Var<float> pyramid_fuse(ParamBinder<float>&, const AlignerParams&, const std::vector<ad::Var<float>>&,
                                     Shape3, Shape3);
template ad::Var<double> pyramid_fuse(ParamBinder<double>&, const AlignerParams&, const std::vector<ad::Var<double>>&,
                                      Shape3, Shape3);

}  // namespace bwm
