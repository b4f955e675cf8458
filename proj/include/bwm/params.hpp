#pragma once

#include "bwm/autodiff.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace bwm {

struct ParamInfo {
  std::string name;
  std::string group;
  bool trainable = true;
  bool decay = true;
};

// Named parameter tensors with matching gradient buffers.
template <typename Scalar>
class ParamStore {
 public:
  using Mat = Matrix<Scalar>;

  int add(std::string name, std::string group, Mat init, bool trainable = true, bool decay = true) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    const int id = size();
    index_.emplace(name, id);
    info_.push_back(ParamInfo{std::move(name), std::move(group), trainable, decay});
    grads_.push_back(Mat::Zero(init.rows(), init.cols()));
    values_.push_back(std::move(init));
    return id;
  }

  int size() const { return static_cast<int>(values_.size()); }
  const ParamInfo& info(int i) const { return info_.at(static_cast<std::size_t>(i)); }
  Mat& value(int i) { return values_.at(static_cast<std::size_t>(i)); }
  const Mat& value(int i) const { return values_.at(static_cast<std::size_t>(i)); }
  Mat& grad(int i) { return grads_.at(static_cast<std::size_t>(i)); }
  const Mat& grad(int i) const { return grads_.at(static_cast<std::size_t>(i)); }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }
  int at(const std::string& name) const {
    const int i = find(name);
    if (i < 0) throw std::out_of_range("no parameter named " + name);
    return i;
  }

  void zero_grad() {
    for (auto& g : grads_) g.setZero();
  }

  long count(const std::string& group) const {
    long n = 0;
    for (int i = 0; i < size(); ++i)
      if (info(i).group == group) n += static_cast<long>(value(i).size());
    return n;
  }

  std::vector<std::string> groups() const {
    std::vector<std::string> out;
    for (const auto& in : info_)
      if (std::find(out.begin(), out.end(), in.group) == out.end()) out.push_back(in.group);
    return out;
  }

  template <typename Other>
  ParamStore<Other> cast() const {
    ParamStore<Other> out;
    for (int i = 0; i < size(); ++i) {
      const auto& in = info(i);
      out.add(in.name, in.group, value(i).template cast<Other>(), in.trainable, in.decay);
    }
    return out;
  }

 private:
  std::vector<ParamInfo> info_;
  std::vector<Mat> values_;
  std::vector<Mat> grads_;
  std::unordered_map<std::string, int> index_;
};

// Binds parameters into a tape on first use and scatters the tape gradients
// back into the store. Frozen parameters enter the tape as constants.
template <typename Scalar>
class ParamBinder {
 public:
  // With `differentiable` false every parameter enters as a constant, which
  // is what inference wants.
  ParamBinder(ad::Tape<Scalar>& tape, const ParamStore<Scalar>& store, bool differentiable = true)
      : tape_(tape), store_(store), node_(static_cast<std::size_t>(store.size()), -1), grad_(differentiable) {}

  ad::Var<Scalar> operator()(int i) {
    int& n = node_.at(static_cast<std::size_t>(i));
    if (n < 0) {
      const auto& v = store_.value(i);
      n = (grad_ && store_.info(i).trainable ? tape_.leaf(v) : tape_.constant(v)).id;
    }
    return ad::Var<Scalar>{&tape_, n};
  }

  ad::Tape<Scalar>& tape() { return tape_; }
  const ParamStore<Scalar>& store() const { return store_; }

  // Adds d(root)/d(param) into `store`'s gradient buffers.
  void collect(ParamStore<Scalar>& store, Scalar weight = Scalar(1)) const {
    for (std::size_t i = 0; i < node_.size(); ++i) {
      const int n = node_[i];
      if (n >= 0 && tape_.needs_grad(n) && tape_.has_grad(n)) store.grad(static_cast<int>(i)) += weight * tape_.grad(n);
    }
  }

 private:
  ad::Tape<Scalar>& tape_;
  const ParamStore<Scalar>& store_;
  std::vector<int> node_;
  bool grad_;
};

}  // namespace bwm
