#pragma once

#include <algorithm>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fairm2s/autodiff.hpp"

namespace fairm2s {

/// Ordered, uniquely named collection of parameter tensors.
///
/// Declaration order is the flatten order; two sets built by the same code
/// path always flatten identically.
template <typename Scalar>
class ParamSet {
 public:
  using tensor_type = Tensor<Scalar>;
  using entry_type = std::pair<std::string, tensor_type>;

  void add(std::string name, tensor_type value) {
    if (find(name) != entries_.end()) throw std::invalid_argument("ParamSet: duplicate name '" + name + "'");
    entries_.emplace_back(std::move(name), std::move(value));
  }

  const tensor_type& operator[](std::string_view name) const {
    auto it = find(name);
    if (it == entries_.end()) throw std::out_of_range("ParamSet: no entry '" + std::string(name) + "'");
    return it->second;
  }

  tensor_type& operator[](std::string_view name) {
    auto it = find(name);
    if (it == entries_.end()) throw std::out_of_range("ParamSet: no entry '" + std::string(name) + "'");
    return it->second;
  }

  bool contains(std::string_view name) const { return find(name) != entries_.end(); }

  std::size_t size() const { return entries_.size(); }
  const entry_type& entry(std::size_t i) const { return entries_.at(i); }
  tensor_type& tensor(std::size_t i) { return entries_.at(i).second; }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  Eigen::Index total_size() const {
    Eigen::Index n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }

  /// Same names and shapes, all zeros.
  ParamSet zeros_like() const {
    ParamSet out;
    for (const auto& [name, t] : entries_) out.add(name, tensor_type::Zero(t.rows(), t.cols()));
    return out;
  }

  template <typename Other>
  ParamSet<Other> cast() const {
    ParamSet<Other> out;
    for (const auto& [name, t] : entries_) out.add(name, t.template cast<Other>());
    return out;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      const auto& [na, ta] = a.entries_[i];
      const auto& [nb, tb] = b.entries_[i];
      if (na != nb || ta.rows() != tb.rows() || ta.cols() != tb.cols() || ta != tb) return false;
    }
    return true;
  }

 private:
  auto find(std::string_view name) const {
    return std::find_if(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
  }
  auto find(std::string_view name) {
    return std::find_if(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
  }

  std::vector<entry_type> entries_;
};

/// Concatenates all entries (row-major within each) in declaration order.
template <typename Scalar>
Vector<Scalar> flatten(const ParamSet<Scalar>& params) {
  Vector<Scalar> out(params.total_size());
  Eigen::Index off = 0;
  for (const auto& [_, t] : params) {
    out.segment(off, t.size()) = Eigen::Map<const Vector<Scalar>>(t.data(), t.size());
    off += t.size();
  }
  return out;
}

/// Inverse of flatten(): shapes and names taken from `like`.
template <typename Scalar>
ParamSet<Scalar> unflatten(const Eigen::Ref<const Vector<Scalar>>& vec, const ParamSet<Scalar>& like) {
  if (vec.size() != like.total_size()) {
    std::ostringstream os;
    os << "unflatten: vector length " << vec.size() << " != parameter count " << like.total_size();
    throw ShapeError(os.str());
  }
  ParamSet<Scalar> out;
  Eigen::Index off = 0;
  for (const auto& [name, t] : like) {
    Tensor<Scalar> v(t.rows(), t.cols());
    Eigen::Map<Vector<Scalar>>(v.data(), v.size()) = vec.segment(off, t.size());
    off += t.size();
    out.add(name, std::move(v));
  }
  return out;
}

/// Registers every entry as a differentiable leaf; result is parallel to `params`.
template <typename Scalar>
std::vector<Var<Scalar>> register_leaves(Tape<Scalar>& tape, const ParamSet<Scalar>& params) {
  std::vector<Var<Scalar>> leaves;
  leaves.reserve(params.size());
  for (const auto& [_, t] : params) leaves.push_back(tape.leaf(t));
  return leaves;
}

/// Flattened gradient for leaves created by register_leaves().
template <typename Scalar>
Vector<Scalar> flat_gradient(const Gradients<Scalar>& grads, const std::vector<Var<Scalar>>& leaves) {
  Eigen::Index n = 0;
  for (auto v : leaves) n += v.value().size();
  Vector<Scalar> out(n);
  Eigen::Index off = 0;
  for (auto v : leaves) {
    Tensor<Scalar> g = grads[v];
    out.segment(off, g.size()) = Eigen::Map<const Vector<Scalar>>(g.data(), g.size());
    off += g.size();
  }
  return out;
}

}  // namespace fairm2s
