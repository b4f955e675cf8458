#include "bwm/tokenizer.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <stdexcept>

namespace bwm {

Vocabulary::Vocabulary() {
  pieces_ = {"<pad>", "<bos>", "<eos>", "<boi>", "<eoi>", "[SUR]", "[CRT]", "[RT]", "[TMZ]", "[AM]"};
  const std::vector<std::string> base = {
      "Female", "Male",    ",",          ".",     ":",          "?",     " ",         " years",    " old",
      " brain", " glioma", " grade",     " Prior", " treatment", " none", " What",     " is",       " the",
      " next-step", " plan", " Conducted", " over", " an",        " interval", " of",   " days",     " +",
      "0",      "1",       "2",          "3",     "4",          "5",     "6",         "7",         "8",
      "9"};
  pieces_.insert(pieces_.end(), base.begin(), base.end());
  for (int id = kFirstPlan; id < size(); ++id) {
    index_.emplace(pieces_[static_cast<std::size_t>(id)], id);
    longest_ = std::max(longest_, pieces_[static_cast<std::size_t>(id)].size());
  }
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids;
  std::size_t i = 0;
  while (i < text.size()) {
    int match = -1;
    std::size_t match_len = 0;
    for (std::size_t len = std::min(longest_, text.size() - i); len > 0; --len) {
      auto it = index_.find(std::string(text.substr(i, len)));
      if (it != index_.end()) {
        match = it->second;
        match_len = len;
        break;
      }
    }
    if (match < 0) {
      std::size_t end = text.find(' ', i + 1);
      if (end == std::string_view::npos) end = text.size();
      throw UnknownPieceError(i, std::string(text.substr(i, end - i)));
    }
    ids.push_back(match);
    i += match_len;
  }
  return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= size()) throw std::out_of_range("text_decode: id " + std::to_string(id) + " out of range");
    out += pieces_[static_cast<std::size_t>(id)];
  }
  return out;
}

const Vocabulary& vocabulary() {
  static const Vocabulary v;
  return v;
}

std::string render_history(const Demographics& demo, const std::vector<TreatmentPlan>& history) {
  std::string s = demo.sex == Sex::female ? "Female" : "Male";
  s += ", " + std::to_string(demo.age) + " years old, brain glioma grade " + std::to_string(demo.grade) + ".";
  s += " Prior treatment: ";
  if (history.empty()) {
    s += "none";
  } else {
    for (std::size_t i = 0; i < history.size(); ++i) {
      if (i) s += ", ";
      s += history[i].render();
    }
  }
  return s + ".";
}

std::string render_context(const Demographics& demo, const std::vector<TreatmentPlan>& history, Task task,
                           const std::optional<TreatmentPlan>& plan, std::optional<int> interval_days) {
  std::string s = render_history(demo, history);
  if (task == Task::plan) return s + " What is the next-step treatment plan?";
  if (!plan || plan->empty() || !interval_days)
    throw std::invalid_argument("render_context: imaging task requires a plan and an interval");
  return s + " Conducted treatment: " + plan->render() + " over an interval of " + std::to_string(*interval_days) +
         " days.";
}

std::vector<int> plan_answer_ids(const TreatmentPlan& plan) {
  std::vector<int> ids;
  for (auto t : plan.tokens()) ids.push_back(Vocabulary::plan_id(t));
  return ids;
}

template <typename Scalar>
PatchCodec<Scalar> PatchCodec<Scalar>::identity(int patch) {
  PatchCodec c;
  const int n = Volume::kChannels * patch * patch * patch;
  c.set(patch, Matrix<Scalar>::Identity(n, n), RowVector<Scalar>::Zero(n), Matrix<Scalar>::Identity(n, n),
        RowVector<Scalar>::Zero(n));
  return c;
}

template <typename Scalar>
PatchCodec<Scalar> PatchCodec<Scalar>::fit(const std::vector<const Volume*>& volumes, int patch, int channels) {
  if (volumes.empty()) throw std::invalid_argument("PatchCodec::fit: no volumes");
  PatchCodec<double> probe = PatchCodec<double>::identity(patch);
  const int n = probe.patch_dim();
  if (channels < 1 || channels > n) throw std::invalid_argument("PatchCodec::fit: latent channels out of range");
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(n);
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(n, n);
  double count = 0;
  for (const Volume* v : volumes) {
    Eigen::MatrixXd p = probe.patchify(*v);
    mean += p.colwise().sum();
    gram.noalias() += p.transpose() * p;
    count += static_cast<double>(p.rows());
  }
  mean /= count;
  Eigen::MatrixXd cov = gram / count - mean.transpose() * mean;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  // Eigenvalues ascend; keep the trailing `channels` directions, largest first.
  Eigen::MatrixXd basis = eig.eigenvectors().rightCols(channels).rowwise().reverse();
  const double mean_var = std::max(eig.eigenvalues().tail(channels).mean(), 1e-12);
  const double s = 1.0 / std::sqrt(mean_var);
  Eigen::MatrixXd ew = basis * s;
  Eigen::RowVectorXd eb = -(mean * ew);
  Eigen::MatrixXd dw = basis.transpose() / s;
  PatchCodec<Scalar> c;
  c.set(patch, ew.cast<Scalar>(), eb.cast<Scalar>(), dw.cast<Scalar>(), mean.cast<Scalar>());
  return c;
}

template <typename Scalar>
void PatchCodec<Scalar>::set(int patch, Matrix<Scalar> ew, RowVector<Scalar> eb, Matrix<Scalar> dw,
                             RowVector<Scalar> db) {
  const int n = Volume::kChannels * patch * patch * patch;
  if (ew.rows() != n || eb.cols() != ew.cols() || dw.rows() != ew.cols() || dw.cols() != n || db.cols() != n)
    throw std::invalid_argument("PatchCodec: parameter shapes inconsistent with patch size");
  patch_ = patch;
  enc_weight_ = std::move(ew);
  enc_bias_ = std::move(eb);
  dec_weight_ = std::move(dw);
  dec_bias_ = std::move(db);
}

template <typename Scalar>
void PatchCodec<Scalar>::check_shape(Shape3 s) const {
  if (patch_ <= 0) throw std::logic_error("PatchCodec: not initialized");
  if (s.depth % patch_ || s.height % patch_ || s.width % patch_)
    throw std::invalid_argument("volume shape " + s.str() + " is not divisible by patch size " + std::to_string(patch_));
}

template <typename Scalar>
Matrix<Scalar> PatchCodec<Scalar>::patchify(const Volume& v) const {
  check_shape(v.shape);
  const int p = patch_;
  const Shape3 g{v.shape.depth / p, v.shape.height / p, v.shape.width / p};
  Matrix<Scalar> out(g.voxels(), patch_dim());
  for (long k = 0; k < g.voxels(); ++k) {
    const auto [bz, by, bx] = g.coords(k);
    int col = 0;
    for (int c = 0; c < Volume::kChannels; ++c)
      for (int dz = 0; dz < p; ++dz)
        for (int dy = 0; dy < p; ++dy)
          for (int dx = 0; dx < p; ++dx)
            out(k, col++) = static_cast<Scalar>(v.data(c, v.shape.index(bz * p + dz, by * p + dy, bx * p + dx)));
  }
  return out;
}

template <typename Scalar>
Volume PatchCodec<Scalar>::unpatchify(const Matrix<Scalar>& patches, Shape3 volume_shape) const {
  check_shape(volume_shape);
  const int p = patch_;
  const Shape3 g{volume_shape.depth / p, volume_shape.height / p, volume_shape.width / p};
  if (patches.rows() != g.voxels() || patches.cols() != patch_dim())
    throw std::invalid_argument("unpatchify: patch matrix does not match volume shape");
  Volume v(volume_shape);
  for (long k = 0; k < g.voxels(); ++k) {
    const auto [bz, by, bx] = g.coords(k);
    int col = 0;
    for (int c = 0; c < Volume::kChannels; ++c)
      for (int dz = 0; dz < p; ++dz)
        for (int dy = 0; dy < p; ++dy)
          for (int dx = 0; dx < p; ++dx)
            v.data(c, volume_shape.index(bz * p + dz, by * p + dy, bx * p + dx)) = static_cast<float>(patches(k, col++));
  }
  return v;
}

template <typename Scalar>
LatentGrid<Scalar> PatchCodec<Scalar>::encode(const Volume& v) const {
  Matrix<Scalar> patches = patchify(v);
  LatentGrid<Scalar> g;
  g.grid = Shape3{v.shape.depth / patch_, v.shape.height / patch_, v.shape.width / patch_};
  g.tokens.noalias() = patches * enc_weight_;
  g.tokens.rowwise() += enc_bias_;
  return g;
}

template <typename Scalar>
Volume PatchCodec<Scalar>::decode(const LatentGrid<Scalar>& g, Shape3 volume_shape) const {
  if (g.tokens.cols() != channels()) throw std::invalid_argument("volume_decode: latent channel mismatch");
  const Shape3 expect{volume_shape.depth / patch_, volume_shape.height / patch_, volume_shape.width / patch_};
  if (!(g.grid == expect)) throw std::invalid_argument("volume_decode: latent grid does not match volume shape");
  Matrix<Scalar> patches = g.tokens * dec_weight_;
  patches.rowwise() += dec_bias_;
  return unpatchify(patches, volume_shape);
}

template <typename Scalar>
std::vector<int> TokenSequence<Scalar>::causal_index() const {
  std::vector<int> out = text_index;
  out.insert(out.end(), boundary_index.begin(), boundary_index.end());
  std::sort(out.begin(), out.end());
  return out;
}

template <typename Scalar>
TokenSequence<Scalar> build_sequence(const LatentGrid<Scalar>& mri, const std::vector<int>& text_ids, Task task,
                                     const LatentGrid<Scalar>* current, bool close) {
  if (mri.tokens.rows() != mri.grid.voxels()) throw std::invalid_argument("build_sequence: latent rows do not match grid");
  if (task == Task::img) {
    if (!current) throw std::invalid_argument("build_sequence: imaging task requires the current latent");
    if (!(current->grid == mri.grid) || current->tokens.rows() != mri.tokens.rows() ||
        current->tokens.cols() != mri.tokens.cols())
      throw std::invalid_argument("build_sequence: current latent grid " + current->grid.str() +
                                  " does not match noisy latent grid " + mri.grid.str());
  } else if (current) {
    throw std::invalid_argument("build_sequence: planning task takes no conditioning latent");
  }
  const int n_img = static_cast<int>(mri.length());
  TokenSequence<Scalar> seq;
  seq.task = task;
  seq.image = mri;
  if (current) seq.current = current->tokens;
  seq.ids.reserve(static_cast<std::size_t>(n_img) + text_ids.size() + 4);
  seq.ids.push_back(Vocabulary::kBos);
  seq.ids.push_back(Vocabulary::kBoi);
  seq.boundary_index = {0, 1};
  for (int k = 0; k < n_img; ++k) {
    seq.image_index.push_back(static_cast<int>(seq.ids.size()));
    seq.ids.push_back(-1);
  }
  seq.boundary_index.push_back(static_cast<int>(seq.ids.size()));
  seq.ids.push_back(Vocabulary::kEoi);
  for (int id : text_ids) {
    if (id < 0 || id >= vocabulary().size()) throw std::invalid_argument("build_sequence: text id out of range");
    seq.text_index.push_back(static_cast<int>(seq.ids.size()));
    seq.ids.push_back(id);
  }
  if (close) {
    seq.boundary_index.push_back(static_cast<int>(seq.ids.size()));
    seq.ids.push_back(Vocabulary::kEos);
  }
  return seq;
}

template class PatchCodec<float>;
template class PatchCodec<double>;
template struct TokenSequence<float>;
template struct TokenSequence<double>;
template TokenSequence<float> build_sequence(const LatentGrid<float>&, const std::vector<int>&, Task,
                                             const LatentGrid<float>*, bool);
template TokenSequence<double> build_sequence(const LatentGrid<double>&, const std::vector<int>&, Task,
                                              const LatentGrid<double>*, bool);

}  // namespace bwm
