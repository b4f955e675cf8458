#pragma once

// Mask alignment: top-down pyramid fusion of tapped shared-trunk features into
// voxel logits, supervised with focal + Dice against the task's mask.

#include "bwm/autodiff.hpp"
#include "bwm/grid.hpp"
#include "bwm/params.hpp"
#include "bwm/tokenizer.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

namespace bwm {

struct AlignConfig {
  double gamma = 2.0;
  double prob_eps = 1e-7;
  double dice_eps = 1e-6;
};

// Time weighting of the alignment term: 1 for planning, t for imaging.
double alignment_weight(Task task, std::optional<double> t);

// Row-wise softmax over class columns.
template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& logits) {
  Matrix<Scalar> p = (logits.colwise() - logits.rowwise().maxCoeff()).array().exp().matrix();
  p.array().colwise() /= p.rowwise().sum().array();
  return p;
}

// One-hot voxel-major (voxels x 4) view of a mask.
template <typename Scalar>
Matrix<Scalar> mask_rows(const SegMask& m) {
  return m.data.transpose().matrix().template cast<Scalar>();
}

template <typename Scalar>
std::vector<int> class_of_rows(const Matrix<Scalar>& onehot) {
  std::vector<int> c(static_cast<std::size_t>(onehot.rows()));
  for (Eigen::Index v = 0; v < onehot.rows(); ++v) {
    Eigen::Index k;
    onehot.row(v).maxCoeff(&k);
    c[static_cast<std::size_t>(v)] = static_cast<int>(k);
  }
  return c;
}

// -(1/|Omega|) sum_v (1 - p_v)^gamma log p_v, p_v the clamped probability of
// the true class.
template <typename Scalar>
Scalar focal_loss(const Matrix<Scalar>& probs, const Matrix<Scalar>& onehot, Scalar gamma, Scalar eps = Scalar(1e-7)) {
  if (probs.rows() != onehot.rows() || probs.cols() != onehot.cols())
    throw std::invalid_argument("focal_loss: shape mismatch");
  const auto cls = class_of_rows(onehot);
  Scalar total = 0;
  for (Eigen::Index v = 0; v < probs.rows(); ++v) {
    Scalar p = probs(v, cls[static_cast<std::size_t>(v)]);
    p = std::min(std::max(p, eps), Scalar(1) - eps);
    total -= std::pow(Scalar(1) - p, gamma) * std::log(p);
  }
  return total / static_cast<Scalar>(probs.rows());
}

// Mean over foreground classes of 1 - 2<p_r, m_r> / (|p_r|_1 + |m_r|_1 + eps).
template <typename Scalar>
Scalar dice_loss(const Matrix<Scalar>& probs, const Matrix<Scalar>& onehot, Scalar eps = Scalar(1e-6)) {
  if (probs.rows() != onehot.rows() || probs.cols() != onehot.cols() || probs.cols() != SegMask::kClasses)
    throw std::invalid_argument("dice_loss: shape mismatch");
  Scalar total = 0;
  for (int r = 1; r < SegMask::kClasses; ++r) {
    const Scalar inter = probs.col(r).dot(onehot.col(r));
    const Scalar denom = probs.col(r).sum() + onehot.col(r).sum() + eps;
    total += Scalar(1) - Scalar(2) * inter / denom;
  }
  return total / Scalar(SegMask::kClasses - 1);
}

template <typename Scalar>
Scalar align_loss(const Matrix<Scalar>& probs, const Matrix<Scalar>& onehot, Task task, std::optional<double> t,
                  const AlignConfig& cfg = {}) {
  const Scalar alpha = static_cast<Scalar>(alignment_weight(task, t));
  return alpha * (focal_loss(probs, onehot, static_cast<Scalar>(cfg.gamma), static_cast<Scalar>(cfg.prob_eps)) +
                  dice_loss(probs, onehot, static_cast<Scalar>(cfg.dice_eps)));
}

namespace ad {

template <typename Scalar>
Var<Scalar> focal_loss_from_logits(Var<Scalar> logits, const Matrix<Scalar>& onehot, Scalar gamma, Scalar eps) {
  Tape<Scalar>& t = *logits.tape;
  Matrix<Scalar> probs = softmax_rows(logits.value());
  const auto cls = class_of_rows(onehot);
  const Scalar n = static_cast<Scalar>(probs.rows());
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dfdp(probs.rows());
  Scalar total = 0;
  for (Eigen::Index v = 0; v < probs.rows(); ++v) {
    const Scalar raw = probs(v, cls[static_cast<std::size_t>(v)]);
    const Scalar p = std::min(std::max(raw, eps), Scalar(1) - eps);
    const Scalar q = Scalar(1) - p;
    const Scalar lp = std::log(p);
    total -= std::pow(q, gamma) * lp;
    const bool clamped = raw < eps || raw > Scalar(1) - eps;
    const Scalar dpow = gamma == Scalar(0) ? Scalar(0) : gamma * std::pow(q, gamma - Scalar(1));
    dfdp(v) = clamped ? Scalar(0) : dpow * lp - std::pow(q, gamma) / p;
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = total / n;
  return t.push(std::move(out), t.needs_grad(logits.id),
                [il = logits.id, probs = std::move(probs), dfdp = std::move(dfdp), cls, n](Tape<Scalar>& t, int self) {
                  const Scalar g = t.grad(self)(0, 0) / n;
                  Matrix<Scalar> d = -probs;
                  for (Eigen::Index v = 0; v < d.rows(); ++v) d(v, cls[static_cast<std::size_t>(v)]) += Scalar(1);
                  // dp_c/dz_k = p_c (delta_ck - p_k)
                  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> pc(d.rows());
                  for (Eigen::Index v = 0; v < d.rows(); ++v) pc(v) = probs(v, cls[static_cast<std::size_t>(v)]);
                  d.array().colwise() *= (dfdp.cwiseProduct(pc)).array() * g;
                  t.grad(il) += d;
                });
}

template <typename Scalar>
Var<Scalar> dice_loss_from_logits(Var<Scalar> logits, const Matrix<Scalar>& onehot, Scalar eps) {
  Tape<Scalar>& t = *logits.tape;
  if (logits.cols() != SegMask::kClasses || onehot.rows() != logits.rows() || onehot.cols() != logits.cols())
    throw std::invalid_argument("dice_loss_from_logits: shape mismatch");
  Matrix<Scalar> probs = softmax_rows(logits.value());
  const Scalar regions = Scalar(SegMask::kClasses - 1);
  Matrix<Scalar> dldp = Matrix<Scalar>::Zero(probs.rows(), probs.cols());
  Scalar total = 0;
  for (int r = 1; r < SegMask::kClasses; ++r) {
    const Scalar inter = probs.col(r).dot(onehot.col(r));
    const Scalar denom = probs.col(r).sum() + onehot.col(r).sum() + eps;
    total += Scalar(1) - Scalar(2) * inter / denom;
    dldp.col(r) = (-(Scalar(2) / denom) * onehot.col(r)).array() + Scalar(2) * inter / (denom * denom);
  }
  dldp /= regions;
  Matrix<Scalar> out(1, 1);
  out(0, 0) = total / regions;
  return t.push(std::move(out), t.needs_grad(logits.id),
                [il = logits.id, probs = std::move(probs), dldp = std::move(dldp)](Tape<Scalar>& t, int self) {
                  const Scalar g = t.grad(self)(0, 0);
                  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot = dldp.cwiseProduct(probs).rowwise().sum();
                  Matrix<Scalar> dz = probs.cwiseProduct(dldp.colwise() - dot) * g;
                  t.grad(il) += dz;
                });
}

}  // namespace ad

// Parameter indices of the mask aligner inside a ParamStore.
struct AlignerParams {
  std::vector<int> tap_weight;  // one per tap, ordered shallow to deep
  std::vector<int> tap_bias;
  int out_weight = -1;
  int out_bias = -1;
};

template <typename Scalar>
AlignerParams add_aligner_params(ParamStore<Scalar>& store, int taps, int width, int features, std::mt19937_64& rng);

// Top-down pyramid fusion. `taps` are (latent tokens x width) features ordered
// shallow to deep; returns (voxels x 4) logits on the `volume` grid.
template <typename Scalar>
ad::Var<Scalar> pyramid_fuse(ParamBinder<Scalar>& bind, const AlignerParams& params,
                             const std::vector<ad::Var<Scalar>>& taps, Shape3 latent, Shape3 volume);

// Resolution of each fusion stage, deepest first; the last entry is the final
// full-resolution grid.
std::vector<Shape3> pyramid_stages(Shape3 latent, Shape3 volume, int taps);

}  // namespace bwm
