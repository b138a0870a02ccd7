#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "owm/numerics/ops.hpp"
#include "owm/numerics/random.hpp"

namespace owm::numerics {

/// Named parameter arrays in insertion order (the order is part of the
/// checkpoint layout and of the optimizer's reduction order).
template <class T>
class ParamSet {
 public:
  void add(const std::string& name, Array<T> value) {
    if (index_.count(name)) throw StructuralError("ParamSet: duplicate parameter " + name);
    index_.emplace(name, arrays_.size());
    names_.push_back(name);
    arrays_.push_back(std::move(value));
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const Array<T>& get(const std::string& name) const { return arrays_[slot(name)]; }
  Array<T>& get(const std::string& name) { return arrays_[slot(name)]; }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return arrays_.size(); }
  const Array<T>& at(std::size_t i) const { return arrays_[i]; }
  Array<T>& at(std::size_t i) { return arrays_[i]; }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& a : arrays_) n += a.size();
    return n;
  }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (std::size_t i = 0; i < arrays_.size(); ++i) out.add(names_[i], arrays_[i].template cast<U>());
    return out;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    return a.names_ == b.names_ && a.arrays_ == b.arrays_;
  }

 private:
  std::size_t slot(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw StructuralError("ParamSet: unknown parameter " + name);
    return it->second;
  }

  std::vector<std::string> names_;
  std::vector<Array<T>> arrays_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Parameters placed on a tape as leaves.
template <class T>
class BoundParams {
 public:
  BoundParams(Tape<T>& tape, const ParamSet<T>& params,
              const std::function<bool(const std::string&)>& trainable = {})
      : tape_(&tape), names_(params.names()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const bool grad = trainable ? trainable(names_[i]) : true;
      vars_.emplace(names_[i], tape.leaf(params.at(i), grad));
    }
  }

  /// Binds already-created tape variables under the given names.
  BoundParams(Tape<T>& tape, std::vector<std::string> names, std::span<const Var<T>> vars)
      : tape_(&tape), names_(std::move(names)) {
    if (names_.size() != vars.size()) throw StructuralError("BoundParams: one variable per name required");
    for (std::size_t i = 0; i < names_.size(); ++i) vars_.emplace(names_[i], vars[i]);
  }

  Var<T> operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw StructuralError("BoundParams: unknown parameter " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return vars_.count(name) > 0; }
  Tape<T>& tape() const { return *tape_; }

  /// Gradients after Tape::backward, in parameter order.
  ParamSet<T> gradients() const {
    ParamSet<T> g;
    for (const auto& n : names_) g.add(n, tape_->grad(vars_.at(n)));
    return g;
  }

 private:
  Tape<T>* tape_;
  std::vector<std::string> names_;
  std::unordered_map<std::string, Var<T>> vars_;
};

template <class T>
Array<T> normal_array(Shape shape, double stddev, Rng& rng) {
  Buffer<T> v(element_count(shape));
  for (auto& x : v) x = static_cast<T>(stddev * rng.normal());
  return Array<T>(unchecked, std::move(shape), std::move(v));
}

/// Adds `<prefix>.weight` (in, out) and `<prefix>.bias` (out).
template <class T>
void add_linear(ParamSet<T>& ps, const std::string& prefix, int in, int out, Rng& rng,
                double stddev = -1) {
  const double s = stddev >= 0 ? stddev : 1.0 / std::sqrt(static_cast<double>(in));
  ps.add(prefix + ".weight", s == 0 ? Array<T>(Shape{in, out}, T{0}) : normal_array<T>(Shape{in, out}, s, rng));
  ps.add(prefix + ".bias", Array<T>(Shape{out}, T{0}));
}

template <class T>
Var<T> linear(const BoundParams<T>& p, const std::string& prefix, const Var<T>& x) {
  return affine(x, p[prefix + ".weight"], p[prefix + ".bias"]);
}

}  // namespace owm::numerics
