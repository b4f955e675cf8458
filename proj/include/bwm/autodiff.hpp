#pragma once

// Reverse-mode differentiation over dense Eigen matrices.
//
// A Tape records every intermediate value together with a closure that
// propagates the node's gradient to its inputs. Nodes live in a deque so that
// references handed out during the forward pass stay valid while the tape
// grows.

#include <Eigen/Dense>

#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace bwm {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

namespace ad {

template <typename Scalar>
class Tape;

template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Matrix<Scalar>& value() const { return tape->value(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Scalar item() const { return value()(0, 0); }
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using Backward = std::function<void(Tape&, int)>;

  Var<Scalar> constant(Mat value) { return push(std::move(value), false, {}); }
  Var<Scalar> leaf(Mat value) { return push(std::move(value), true, {}); }

  Var<Scalar> push(Mat value, bool needs_grad, Backward fn) {
    nodes_.push_back(Node{std::move(value), Mat(), std::move(fn), needs_grad});
    return Var<Scalar>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Mat& value(int id) const { return nodes_[id].value; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  bool has_grad(int id) const { return nodes_[id].grad.size() != 0; }

  Mat& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  // Accumulate `g` into node `id` if that node participates in differentiation.
  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    if (!nodes_[id].needs_grad) return;
    grad(id) += g;
  }

  void backward(Var<Scalar> root, Scalar seed = Scalar(1)) {
    if (root.value().size() != 1) throw std::invalid_argument("backward: root must be a scalar");
    grad(root.id)(0, 0) += seed;
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.fn && n.grad.size() != 0) n.fn(*this, id);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    Backward fn;
    bool needs_grad;
  };
  std::deque<Node> nodes_;
};

namespace detail {

template <typename Scalar>
void check_same_tape(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.tape != b.tape) throw std::invalid_argument("autodiff: operands recorded on different tapes");
}

template <typename Scalar>
void check_shape(bool ok, const char* op) {
  if (!ok) throw std::invalid_argument(std::string("autodiff: shape mismatch in ") + op);
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  detail::check_same_tape(a, b);
  detail::check_shape<Scalar>(a.cols() == b.rows(), "matmul");
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out;
  out.noalias() = a.value() * b.value();
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  return t.push(std::move(out), ng, [ia = a.id, ib = b.id](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia).noalias() += g * t.value(ib).transpose();
    if (t.needs_grad(ib)) t.grad(ib).noalias() += t.value(ia).transpose() * g;
  });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  detail::check_same_tape(a, b);
  detail::check_shape<Scalar>(a.rows() == b.rows() && a.cols() == b.cols(), "add");
  Tape<Scalar>& t = *a.tape;
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  return t.push(a.value() + b.value(), ng, [ia = a.id, ib = b.id](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) {
  return add(a, b);
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  detail::check_same_tape(a, b);
  detail::check_shape<Scalar>(a.rows() == b.rows() && a.cols() == b.cols(), "sub");
  Tape<Scalar>& t = *a.tape;
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  return t.push(a.value() - b.value(), ng, [ia = a.id, ib = b.id](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

// a + broadcast(row) where row is 1 x cols(a).
template <typename Scalar>
Var<Scalar> add_row(Var<Scalar> a, Var<Scalar> row) {
  detail::check_same_tape(a, row);
  detail::check_shape<Scalar>(row.rows() == 1 && row.cols() == a.cols(), "add_row");
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out = a.value();
  out.rowwise() += row.value().row(0);
  const bool ng = t.needs_grad(a.id) || t.needs_grad(row.id);
  return t.push(std::move(out), ng, [ia = a.id, ir = row.id](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    t.accumulate(ia, g);
    if (t.needs_grad(ir)) t.grad(ir) += g.colwise().sum();
  });
}

// a * broadcast(row), elementwise, where row is 1 x cols(a).
template <typename Scalar>
Var<Scalar> mul_row(Var<Scalar> a, Var<Scalar> row) {
  detail::check_same_tape(a, row);
  detail::check_shape<Scalar>(row.rows() == 1 && row.cols() == a.cols(), "mul_row");
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out = a.value();
  out.array().rowwise() *= row.value().row(0).array();
  const bool ng = t.needs_grad(a.id) || t.needs_grad(row.id);
  return t.push(std::move(out), ng, [ia = a.id, ir = row.id](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ir)) t.grad(ir) += g.cwiseProduct(t.value(ia)).colwise().sum();
    if (t.needs_grad(ia)) {
      Matrix<Scalar> da = g;
      da.array().rowwise() *= t.value(ir).row(0).array();
      t.grad(ia) += da;
    }
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  Tape<Scalar>& t = *a.tape;
  return t.push(a.value() * s, t.needs_grad(a.id), [ia = a.id, s](Tape<Scalar>& t, int self) {
    t.accumulate(ia, t.grad(self) * s);
  });
}

template <typename Scalar>
Var<Scalar> hadamard(Var<Scalar> a, Var<Scalar> b) {
  detail::check_same_tape(a, b);
  detail::check_shape<Scalar>(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard");
  Tape<Scalar>& t = *a.tape;
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  return t.push(a.value().cwiseProduct(b.value()), ng, [ia = a.id, ib = b.id](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia) += g.cwiseProduct(t.value(ib));
    if (t.needs_grad(ib)) t.grad(ib) += g.cwiseProduct(t.value(ia));
  });
}

template <typename Scalar>
Var<Scalar> silu(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> sig = (Scalar(1) + (-a.value().array()).exp()).inverse().matrix();
  Matrix<Scalar> out = a.value().cwiseProduct(sig);
  return t.push(std::move(out), t.needs_grad(a.id), [ia = a.id, sig = std::move(sig)](Tape<Scalar>& t, int self) {
    const auto& x = t.value(ia).array();
    const auto s = sig.array();
    t.accumulate(ia, (t.grad(self).array() * s * (Scalar(1) + x * (Scalar(1) - s))).matrix());
  });
}

// Row-wise layer normalization; gain/bias may be invalid Vars for the
// parameter-free variant used under adaptive modulation.
template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gain = {}, Var<Scalar> bias = {}, Scalar eps = Scalar(1e-5)) {
  Tape<Scalar>& t = *x.tape;
  const auto& xv = x.value();
  const Eigen::Index n = xv.cols();
  Matrix<Scalar> centered = xv.colwise() - xv.rowwise().mean();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std =
      ((centered.array().square().rowwise().sum() / Scalar(n)) + eps).rsqrt();
  Matrix<Scalar> xhat = centered.array().colwise() * inv_std.array();
  Matrix<Scalar> out = xhat;
  if (gain.valid()) {
    detail::check_shape<Scalar>(gain.rows() == 1 && gain.cols() == n, "layer_norm gain");
    out.array().rowwise() *= gain.value().row(0).array();
  }
  if (bias.valid()) {
    detail::check_shape<Scalar>(bias.rows() == 1 && bias.cols() == n, "layer_norm bias");
    out.rowwise() += bias.value().row(0);
  }
  bool ng = t.needs_grad(x.id);
  if (gain.valid()) ng = ng || t.needs_grad(gain.id);
  if (bias.valid()) ng = ng || t.needs_grad(bias.id);
  const int ig = gain.valid() ? gain.id : -1;
  const int ib = bias.valid() ? bias.id : -1;
  return t.push(std::move(out), ng,
                [ix = x.id, ig, ib, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<Scalar>& t, int self) {
                  const auto& g = t.grad(self);
                  if (ib >= 0 && t.needs_grad(ib)) t.grad(ib) += g.colwise().sum();
                  if (ig >= 0 && t.needs_grad(ig)) t.grad(ig) += g.cwiseProduct(xhat).colwise().sum();
                  if (!t.needs_grad(ix)) return;
                  Matrix<Scalar> dxhat = g;
                  if (ig >= 0) dxhat.array().rowwise() *= t.value(ig).row(0).array();
                  auto mean_d = dxhat.rowwise().mean();
                  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mean_dx = dxhat.cwiseProduct(xhat).rowwise().sum() / Scalar(n);
                  Matrix<Scalar> dx = dxhat.colwise() - mean_d;
                  dx -= (xhat.array().colwise() * mean_dx.array()).matrix();
                  dx.array().colwise() *= inv_std.array();
                  t.grad(ix) += dx;
                });
}

// x * (1 + scale) + shift with 1 x cols rows broadcast over all rows.
template <typename Scalar>
Var<Scalar> modulate(Var<Scalar> x, Var<Scalar> shift, Var<Scalar> scale_row) {
  detail::check_shape<Scalar>(shift.rows() == 1 && shift.cols() == x.cols(), "modulate shift");
  detail::check_shape<Scalar>(scale_row.rows() == 1 && scale_row.cols() == x.cols(), "modulate scale");
  Tape<Scalar>& t = *x.tape;
  Matrix<Scalar> out = x.value();
  out.array().rowwise() *= (scale_row.value().row(0).array() + Scalar(1));
  out.rowwise() += shift.value().row(0);
  const bool ng = t.needs_grad(x.id) || t.needs_grad(shift.id) || t.needs_grad(scale_row.id);
  return t.push(std::move(out), ng, [ix = x.id, ish = shift.id, isc = scale_row.id](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ish)) t.grad(ish) += g.colwise().sum();
    if (t.needs_grad(isc)) t.grad(isc) += g.cwiseProduct(t.value(ix)).colwise().sum();
    if (t.needs_grad(ix)) {
      Matrix<Scalar> dx = g;
      dx.array().rowwise() *= (t.value(isc).row(0).array() + Scalar(1));
      t.grad(ix) += dx;
    }
  });
}

template <typename Scalar>
Var<Scalar> gather_rows(Var<Scalar> a, std::vector<int> index) {
  Tape<Scalar>& t = *a.tape;
  const auto& av = a.value();
  Matrix<Scalar> out(static_cast<Eigen::Index>(index.size()), av.cols());
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] < 0 || index[k] >= av.rows()) throw std::out_of_range("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(k)) = av.row(index[k]);
  }
  return t.push(std::move(out), t.needs_grad(a.id), [ia = a.id, index = std::move(index)](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (std::size_t k = 0; k < index.size(); ++k) ga.row(index[k]) += g.row(static_cast<Eigen::Index>(k));
  });
}

template <typename Scalar>
Var<Scalar> slice_rows(Var<Scalar> a, Eigen::Index start, Eigen::Index count) {
  detail::check_shape<Scalar>(start >= 0 && start + count <= a.rows(), "slice_rows");
  Tape<Scalar>& t = *a.tape;
  return t.push(a.value().middleRows(start, count), t.needs_grad(a.id),
                [ia = a.id, start, count](Tape<Scalar>& t, int self) {
                  t.grad(ia).middleRows(start, count) += t.grad(self);
                });
}

template <typename Scalar>
Var<Scalar> slice_cols(Var<Scalar> a, Eigen::Index start, Eigen::Index count) {
  detail::check_shape<Scalar>(start >= 0 && start + count <= a.cols(), "slice_cols");
  Tape<Scalar>& t = *a.tape;
  return t.push(a.value().middleCols(start, count), t.needs_grad(a.id),
                [ia = a.id, start, count](Tape<Scalar>& t, int self) {
                  t.grad(ia).middleCols(start, count) += t.grad(self);
                });
}

template <typename Scalar>
Var<Scalar> concat_rows(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  Tape<Scalar>& t = *parts.front().tape;
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  bool ng = false;
  for (const auto& p : parts) {
    detail::check_same_tape(parts.front(), p);
    detail::check_shape<Scalar>(p.cols() == cols, "concat_rows");
    rows += p.rows();
    ng = ng || t.needs_grad(p.id);
  }
  Matrix<Scalar> out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    spans.emplace_back(p.id, p.rows());
    offset += p.rows();
  }
  return t.push(std::move(out), ng, [spans = std::move(spans)](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    Eigen::Index offset = 0;
    for (const auto& [id, rows] : spans) {
      if (t.needs_grad(id)) t.grad(id) += g.middleRows(offset, rows);
      offset += rows;
    }
  });
}

template <typename Scalar>
Var<Scalar> concat_cols(Var<Scalar> a, Var<Scalar> b) {
  detail::check_same_tape(a, b);
  detail::check_shape<Scalar>(a.rows() == b.rows(), "concat_cols");
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  return t.push(std::move(out), ng, [ia = a.id, ib = b.id, ca = a.cols(), cb = b.cols()](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia) += g.leftCols(ca);
    if (t.needs_grad(ib)) t.grad(ib) += g.rightCols(cb);
  });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return t.push(std::move(out), t.needs_grad(a.id), [ia = a.id](Tape<Scalar>& t, int self) {
    const Scalar g = t.grad(self)(0, 0);
    t.grad(ia).array() += g;
  });
}

// Multi-head scaled dot-product attention on pre-projected q, k, v (L x d each).
// `mask` is an additive L x L matrix with entries in {0, -inf}; null means unmasked.
template <typename Scalar>
Var<Scalar> attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, int heads,
                      std::shared_ptr<const Matrix<Scalar>> mask = nullptr) {
  detail::check_same_tape(q, k);
  detail::check_same_tape(q, v);
  const Eigen::Index L = q.rows();
  const Eigen::Index d = q.cols();
  if (heads <= 0 || d % heads != 0) throw std::invalid_argument("attention: width not divisible by head count");
  detail::check_shape<Scalar>(k.rows() == L && v.rows() == L && k.cols() == d && v.cols() == d, "attention");
  if (mask) detail::check_shape<Scalar>(mask->rows() == L && mask->cols() == L, "attention mask");
  Tape<Scalar>& t = *q.tape;
  const Eigen::Index dh = d / heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  auto probs = std::make_shared<std::vector<Matrix<Scalar>>>(static_cast<std::size_t>(heads));
  Matrix<Scalar> out(L, d);
  for (int h = 0; h < heads; ++h) {
    Matrix<Scalar>& p = (*probs)[static_cast<std::size_t>(h)];
    p.noalias() = q.value().middleCols(h * dh, dh) * k.value().middleCols(h * dh, dh).transpose();
    p *= inv_sqrt;
    if (mask) p += *mask;
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> row_max = p.rowwise().maxCoeff();
    p = (p.colwise() - row_max).array().exp().matrix();
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> row_sum = p.rowwise().sum();
    p.array().colwise() /= row_sum.array();
    out.middleCols(h * dh, dh).noalias() = p * v.value().middleCols(h * dh, dh);
  }
  const bool ng = t.needs_grad(q.id) || t.needs_grad(k.id) || t.needs_grad(v.id);
  return t.push(std::move(out), ng,
                [iq = q.id, ik = k.id, iv = v.id, heads, dh, inv_sqrt, probs](Tape<Scalar>& t, int self) {
                  const auto& g = t.grad(self);
                  const auto& qv = t.value(iq);
                  const auto& kv = t.value(ik);
                  const auto& vv = t.value(iv);
                  Matrix<Scalar> dp;
                  for (int h = 0; h < heads; ++h) {
                    const Matrix<Scalar>& p = (*probs)[static_cast<std::size_t>(h)];
                    const auto gh = g.middleCols(h * dh, dh);
                    if (t.needs_grad(iv)) t.grad(iv).middleCols(h * dh, dh).noalias() += p.transpose() * gh;
                    if (!t.needs_grad(iq) && !t.needs_grad(ik)) continue;
                    dp.noalias() = gh * vv.middleCols(h * dh, dh).transpose();
                    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> row_dot = dp.cwiseProduct(p).rowwise().sum();
                    dp = (p.array() * (dp.colwise() - row_dot).array()).matrix() * inv_sqrt;
                    if (t.needs_grad(iq)) t.grad(iq).middleCols(h * dh, dh).noalias() += dp * kv.middleCols(h * dh, dh);
                    if (t.needs_grad(ik))
                      t.grad(ik).middleCols(h * dh, dh).noalias() += dp.transpose() * qv.middleCols(h * dh, dh);
                  }
                });
}

// Mean next-token negative log-likelihood of `targets` under row-wise softmax(logits).
template <typename Scalar>
Var<Scalar> softmax_cross_entropy(Var<Scalar> logits, std::vector<int> targets) {
  detail::check_shape<Scalar>(static_cast<Eigen::Index>(targets.size()) == logits.rows(), "softmax_cross_entropy");
  if (targets.empty()) throw std::invalid_argument("softmax_cross_entropy: empty target");
  Tape<Scalar>& t = *logits.tape;
  const auto& z = logits.value();
  Matrix<Scalar> p = (z.colwise() - z.rowwise().maxCoeff()).array().exp().matrix();
  p.array().colwise() /= p.rowwise().sum().array();
  Scalar loss = 0;
  const Scalar n = static_cast<Scalar>(targets.size());
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] < 0 || targets[r] >= z.cols()) throw std::out_of_range("softmax_cross_entropy: target id");
    const Eigen::Index row = static_cast<Eigen::Index>(r);
    const Scalar zmax = z.row(row).maxCoeff();
    const Scalar lse = zmax + std::log((z.row(row).array() - zmax).exp().sum());
    loss += lse - z(row, targets[r]);
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = loss / n;
  return t.push(std::move(out), t.needs_grad(logits.id),
                [il = logits.id, p = std::move(p), targets = std::move(targets), n](Tape<Scalar>& t, int self) {
                  const Scalar g = t.grad(self)(0, 0) / n;
                  Matrix<Scalar> d = p;
                  for (std::size_t r = 0; r < targets.size(); ++r) d(static_cast<Eigen::Index>(r), targets[r]) -= Scalar(1);
                  t.grad(il) += d * g;
                });
}

// Mean of squared differences against a constant target.
template <typename Scalar>
Var<Scalar> mse(Var<Scalar> pred, const Matrix<Scalar>& target) {
  detail::check_shape<Scalar>(pred.rows() == target.rows() && pred.cols() == target.cols(), "mse");
  Tape<Scalar>& t = *pred.tape;
  Matrix<Scalar> diff = pred.value() - target;
  const Scalar n = static_cast<Scalar>(diff.size());
  Matrix<Scalar> out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  return t.push(std::move(out), t.needs_grad(pred.id), [ip = pred.id, diff = std::move(diff), n](Tape<Scalar>& t, int self) {
    t.grad(ip) += diff * (Scalar(2) * t.grad(self)(0, 0) / n);
  });
}

// Applies a fixed linear operator out = apply(in) whose adjoint is supplied for
// the backward pass. Both callbacks map matrices of the documented shapes.
template <typename Scalar>
Var<Scalar> linear_map(Var<Scalar> a, std::function<Matrix<Scalar>(const Matrix<Scalar>&)> apply,
                       std::function<Matrix<Scalar>(const Matrix<Scalar>&)> adjoint) {
  Tape<Scalar>& t = *a.tape;
  return t.push(apply(a.value()), t.needs_grad(a.id), [ia = a.id, adjoint = std::move(adjoint)](Tape<Scalar>& t, int self) {
    t.grad(ia) += adjoint(t.grad(self));
  });
}

}  // namespace ad
}  // namespace bwm
