#pragma once

#include <Eigen/Dense>

#include <array>
#include <stdexcept>
#include <string>

namespace bwm {

// Voxel counts along (depth, height, width). Voxel (z, y, x) has linear index
// (z * height + y) * width + x, so width is the fastest-varying axis.
struct Shape3 {
  int depth = 0;
  int height = 0;
  int width = 0;

  long voxels() const { return static_cast<long>(depth) * height * width; }
  long index(int z, int y, int x) const { return (static_cast<long>(z) * height + y) * width + x; }
  std::array<int, 3> coords(long i) const {
    const int x = static_cast<int>(i % width);
    const int y = static_cast<int>((i / width) % height);
    const int z = static_cast<int>(i / (static_cast<long>(width) * height));
    return {z, y, x};
  }
  bool operator==(const Shape3&) const = default;
  std::string str() const {
    return std::to_string(depth) + "x" + std::to_string(height) + "x" + std::to_string(width);
  }
};

enum class Axis { axial, coronal, sagittal };

// Three-channel intensity volume (FLAIR-like, T1CE-like, T2W-like); one row per
// channel, one column per voxel.
struct Volume {
  static constexpr int kChannels = 3;
  Shape3 shape;
  Eigen::ArrayXXf data;

  Volume() = default;
  explicit Volume(Shape3 s) : shape(s), data(Eigen::ArrayXXf::Zero(kChannels, s.voxels())) {}
};

enum class SegClass : int { background = 0, edema = 1, enhancing = 2, non_enhancing = 3 };

// One-hot segmentation over {BG, ED, ET, NET}.
struct SegMask {
  static constexpr int kClasses = 4;
  Shape3 shape;
  Eigen::ArrayXXf data;

  SegMask() = default;
  explicit SegMask(Shape3 s) : shape(s), data(Eigen::ArrayXXf::Zero(kClasses, s.voxels())) { data.row(0).setOnes(); }

  int label(long voxel) const {
    int best = 0;
    for (int c = 1; c < kClasses; ++c)
      if (data(c, voxel) > data(best, voxel)) best = c;
    return best;
  }
  void set_label(long voxel, int c) {
    data.col(voxel).setZero();
    data(c, voxel) = 1.0f;
  }
  long count(int c) const { return static_cast<long>((data.row(c) > 0.5f).count()); }
  long tumor_voxels() const { return shape.voxels() - count(0); }
};

// One of the 48 symmetries of a cube applied to the voxel columns of `a`:
// code / 8 picks the axis permutation, bits of code % 8 mirror depth, height
// and width of the result. Codes 0..7 are pure mirrors and work on any grid;
// permutations need a cubic grid.
inline Eigen::ArrayXXf reorient_voxels(const Eigen::ArrayXXf& a, Shape3 s, int code) {
  static constexpr int kPerm[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  if (code < 0 || code >= 48) throw std::invalid_argument("reorient_voxels: code outside [0, 48)");
  if (a.cols() != s.voxels()) throw std::invalid_argument("reorient_voxels: column count does not match grid");
  const int* perm = kPerm[code / 8];
  const int flips = code % 8;
  if (code >= 8 && !(s.depth == s.height && s.height == s.width))
    throw std::invalid_argument("reorient_voxels: axis permutations need a cubic grid");
  const int n[3] = {s.depth, s.height, s.width};
  Eigen::ArrayXXf out(a.rows(), a.cols());
  int src[3];
  for (int z = 0; z < s.depth; ++z)
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        const int dst[3] = {z, y, x};
        for (int k = 0; k < 3; ++k) {
          const int v = flips >> k & 1 ? n[k] - 1 - dst[k] : dst[k];
          src[perm[k]] = v;
        }
        out.col(s.index(z, y, x)) = a.col(s.index(src[0], src[1], src[2]));
      }
  return out;
}

// Builds a row-major label mask from per-voxel class ids.
inline SegMask mask_from_labels(Shape3 shape, const Eigen::ArrayXi& labels) {
  if (labels.size() != shape.voxels()) throw std::invalid_argument("mask_from_labels: size mismatch");
  SegMask m(shape);
  for (long v = 0; v < shape.voxels(); ++v) m.set_label(v, labels(v));
  return m;
}

// 1-D linear interpolation weights (half-pixel centres, edge clamped) mapping
// `in` samples onto `out` samples.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> linear_resample_matrix(int in, int out) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> a = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>::Zero(out, in);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    if (src > in - 1) src = in - 1;
    const int lo = static_cast<int>(src);
    const int hi = lo + 1 < in ? lo + 1 : lo;
    const double w = src - lo;
    a(o, lo) += static_cast<Scalar>(1.0 - w);
    a(o, hi) += static_cast<Scalar>(w);
  }
  return a;
}

// Separable trilinear resampling of a (voxels x features) matrix between grids.
template <typename Scalar>
class TrilinearResampler {
 public:
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  TrilinearResampler(Shape3 from, Shape3 to)
      : from_(from),
        to_(to),
        az_(linear_resample_matrix<Scalar>(from.depth, to.depth)),
        ay_(linear_resample_matrix<Scalar>(from.height, to.height)),
        ax_(linear_resample_matrix<Scalar>(from.width, to.width)) {}

  Shape3 from() const { return from_; }
  Shape3 to() const { return to_; }

  Mat apply(const Mat& in) const { return run(in, from_, to_, az_, ay_, ax_); }
  Mat adjoint(const Mat& in) const {
    return run(in, to_, from_, az_.transpose(), ay_.transpose(), ax_.transpose());
  }

 private:
  static Mat run(const Mat& in, Shape3 s, Shape3 t, const Mat& az, const Mat& ay, const Mat& ax) {
    if (in.rows() != s.voxels()) throw std::invalid_argument("TrilinearResampler: row count does not match grid");
    const Eigen::Index f = in.cols();
    Mat out(t.voxels(), f);
    Mat step_x(static_cast<Eigen::Index>(t.width) * s.height * s.depth, 1);
    Mat step_y(static_cast<Eigen::Index>(t.width) * t.height * s.depth, 1);
    for (Eigen::Index c = 0; c < f; ++c) {
      Eigen::Map<const Mat> vx(in.col(c).data(), s.width, static_cast<Eigen::Index>(s.height) * s.depth);
      Eigen::Map<Mat> rx(step_x.data(), t.width, static_cast<Eigen::Index>(s.height) * s.depth);
      rx.noalias() = ax * vx;
      for (int z = 0; z < s.depth; ++z) {
        Eigen::Map<const Mat> vy(step_x.data() + static_cast<Eigen::Index>(z) * t.width * s.height, t.width, s.height);
        Eigen::Map<Mat> ry(step_y.data() + static_cast<Eigen::Index>(z) * t.width * t.height, t.width, t.height);
        ry.noalias() = vy * ay.transpose();
      }
      Eigen::Map<const Mat> vz(step_y.data(), static_cast<Eigen::Index>(t.width) * t.height, s.depth);
      Eigen::Map<Mat> rz(out.col(c).data(), static_cast<Eigen::Index>(t.width) * t.height, t.depth);
      rz.noalias() = vz * az.transpose();
    }
    return out;
  }

  Shape3 from_, to_;
  Mat az_, ay_, ax_;
};

}  // namespace bwm
