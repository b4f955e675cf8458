#pragma once

#include "bwm/autodiff.hpp"
#include "bwm/cohort.hpp"
#include "bwm/grid.hpp"

#include <array>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace bwm {

enum class Task { plan, img };

inline std::string_view task_name(Task t) { return t == Task::plan ? "plan" : "img"; }

class UnknownPieceError : public std::invalid_argument {
 public:
  UnknownPieceError(std::size_t offset, std::string span)
      : std::invalid_argument("text_encode: no vocabulary piece matches \"" + span + "\" at offset " +
                              std::to_string(offset)),
        offset_(offset),
        span_(std::move(span)) {}
  std::size_t offset() const { return offset_; }
  const std::string& span() const { return span_; }

 private:
  std::size_t offset_;
  std::string span_;
};

// Closed word-level vocabulary over the clinical templates. Ids 0..4 are the
// boundary/padding specials, 5..9 the treatment tokens, the rest base pieces.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kBoi = 3;
  static constexpr int kEoi = 4;
  static constexpr int kFirstPlan = 5;
  static constexpr int kPlanCount = 5;
  static constexpr int kFirstBase = kFirstPlan + kPlanCount;

  Vocabulary();

  int size() const { return static_cast<int>(pieces_.size()); }
  const std::string& piece(int id) const { return pieces_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& pieces() const { return pieces_; }

  static int plan_id(TreatmentToken t) { return kFirstPlan + static_cast<int>(t); }
  static bool is_plan_id(int id) { return id >= kFirstPlan && id < kFirstPlan + kPlanCount; }
  static bool is_special(int id) { return id < kFirstBase; }
  static TreatmentToken token_of(int id) { return static_cast<TreatmentToken>(id - kFirstPlan); }

  // Greedy longest-match segmentation; throws UnknownPieceError naming the span.
  std::vector<int> encode(std::string_view text) const;
  std::string decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, int> index_;
  std::size_t longest_ = 0;
};

const Vocabulary& vocabulary();

std::string render_history(const Demographics& demo, const std::vector<TreatmentPlan>& history);
std::string render_context(const Demographics& demo, const std::vector<TreatmentPlan>& history, Task task,
                           const std::optional<TreatmentPlan>& plan = std::nullopt,
                           std::optional<int> interval_days = std::nullopt);

// Answer tokens of a plan in canonical order.
std::vector<int> plan_answer_ids(const TreatmentPlan& plan);

// Patch-latent representation: one row per latent-grid cell (row-major over the
// latent grid), one column per latent channel.
template <typename Scalar>
struct LatentGrid {
  Shape3 grid;
  Matrix<Scalar> tokens;

  int channels() const { return static_cast<int>(tokens.cols()); }
  long length() const { return grid.voxels(); }
  std::array<int, 3> position(long k) const { return grid.coords(k); }
};

// Learnable per-patch affine autoencoder standing in for the volumetric VAE.
template <typename Scalar>
class PatchCodec {
 public:
  PatchCodec() = default;
  // Exact identity codec: latent channels = 3 * patch^3.
  static PatchCodec identity(int patch);
  // Principal-subspace fit of the patches of `volumes` to `channels` latents,
  // rescaled so that latents have unit mean variance.
  static PatchCodec fit(const std::vector<const Volume*>& volumes, int patch, int channels);

  int patch() const { return patch_; }
  int channels() const { return static_cast<int>(enc_weight_.cols()); }
  int patch_dim() const { return Volume::kChannels * patch_ * patch_ * patch_; }

  LatentGrid<Scalar> encode(const Volume& v) const;
  Volume decode(const LatentGrid<Scalar>& g, Shape3 volume_shape) const;

  Matrix<Scalar> patchify(const Volume& v) const;
  Volume unpatchify(const Matrix<Scalar>& patches, Shape3 volume_shape) const;

  const Matrix<Scalar>& enc_weight() const { return enc_weight_; }
  const RowVector<Scalar>& enc_bias() const { return enc_bias_; }
  const Matrix<Scalar>& dec_weight() const { return dec_weight_; }
  const RowVector<Scalar>& dec_bias() const { return dec_bias_; }
  void set(int patch, Matrix<Scalar> ew, RowVector<Scalar> eb, Matrix<Scalar> dw, RowVector<Scalar> db);

  template <typename Other>
  PatchCodec<Other> cast() const {
    PatchCodec<Other> c;
    c.set(patch_, enc_weight_.template cast<Other>(), enc_bias_.template cast<Other>(),
          dec_weight_.template cast<Other>(), dec_bias_.template cast<Other>());
    return c;
  }

 private:
  void check_shape(Shape3 s) const;

  int patch_ = 0;
  Matrix<Scalar> enc_weight_;
  RowVector<Scalar> enc_bias_;
  Matrix<Scalar> dec_weight_;
  RowVector<Scalar> dec_bias_;
};

// Linear path from noise to data: t * z1 + (1 - t) * z0.
template <typename Scalar>
LatentGrid<Scalar> noise_augment(const LatentGrid<Scalar>& z1, Scalar t, const Matrix<Scalar>& z0) {
  if (z0.rows() != z1.tokens.rows() || z0.cols() != z1.tokens.cols())
    throw std::invalid_argument("noise_augment: noise shape does not match latent shape");
  if (!(t >= Scalar(0) && t <= Scalar(1))) throw std::invalid_argument("noise_augment: t outside [0, 1]");
  return LatentGrid<Scalar>{z1.grid, t * z1.tokens + (Scalar(1) - t) * z0};
}

template <typename Scalar>
Matrix<Scalar> standard_normal(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix<Scalar> m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<Scalar>(n(rng));
  return m;
}

// Interleaved [BOS][BOI]{MRI}[EOI]{TXT}[EOS] layout.
template <typename Scalar>
struct TokenSequence {
  Task task = Task::plan;
  std::vector<int> ids;  // vocabulary id per slot, -1 on image slots
  LatentGrid<Scalar> image;
  std::optional<Matrix<Scalar>> current;  // conditioning latent for the imaging task
  std::vector<int> text_index;
  std::vector<int> image_index;
  std::vector<int> boundary_index;

  int length() const { return static_cast<int>(ids.size()); }
  int image_begin() const { return 2; }
  // Channel width of an image slot before the input projection.
  int image_width() const { return image.channels() * (current ? 2 : 1); }
  // Text content plus boundary specials, the set that is causally masked.
  std::vector<int> causal_index() const;
  // Sequence position of text content token `j`.
  int text_position(int j) const { return text_index.at(static_cast<std::size_t>(j)); }
};

template <typename Scalar>
TokenSequence<Scalar> build_sequence(const LatentGrid<Scalar>& mri, const std::vector<int>& text_ids, Task task,
                                     const LatentGrid<Scalar>* current = nullptr, bool close = true);

}  // namespace bwm
