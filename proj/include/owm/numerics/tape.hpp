#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "owm/numerics/array.hpp"

namespace owm::numerics {

template <class T>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Array<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  int rank() const { return value().rank(); }
  int dim(int axis) const { return value().dim(axis); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode recording of array operations. Nodes whose inputs carry no
/// gradient are stored without a backward closure, so a tape built from
/// constants is a plain forward evaluator.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::span<const T>)>;

  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Array<T> value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, {}});
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  Var<T> constant(Array<T> value) { return leaf(std::move(value), false); }

  /// Appends an op result. `backward` receives the output gradient and must
  /// accumulate into parent buffers obtained from grad_accumulator().
  Var<T> record(Array<T> value, std::span<const Var<T>> parents, Backward backward) {
    bool needs = false;
    for (const auto& p : parents) {
      if (&p.tape() != this) throw StructuralError("record: operands live on different tapes");
      needs = needs || requires_grad(p.id());
    }
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : Backward{}});
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  Var<T> record(Array<T> value, std::initializer_list<Var<T>> parents, Backward backward) {
    return record(std::move(value), std::span<const Var<T>>(parents.begin(), parents.size()),
                  std::move(backward));
  }

  const Array<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Zero-initialized on first use.
  std::span<T> grad_accumulator(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
    return n.grad;
  }

  Array<T> grad(const Var<T>& v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (n.grad.empty()) return Array<T>(n.value.shape(), T{0});
    return Array<T>(unchecked, n.value.shape(), n.grad);
  }

  void backward(const Var<T>& loss) {
    if (loss.size() != 1) {
      throw StructuralError("backward: loss must be a single element, got shape " +
                            shape_string(loss.shape()));
    }
    for (auto& n : nodes_) n.grad.clear();
    if (!requires_grad(loss.id())) return;
    grad_accumulator(loss.id())[0] = T{1};
    for (int i = loss.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && !n.grad.empty()) {
        // Closures only touch parent buffers; nodes_ never grows during backward.
        n.backward(*this, std::span<const T>(n.grad));
      }
    }
  }

  /// Non-smooth ops report their distance to the nearest kink (|x| at 0,
  /// ties in a max). Gradient checks reject probe points with a small margin.
  void note_kink_margin(double margin) { kink_margin_ = std::min(kink_margin_, margin); }
  double kink_margin() const { return kink_margin_; }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Array<T> value;
    Buffer<T> grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
  double kink_margin_ = std::numeric_limits<double>::infinity();
};

}  // namespace owm::numerics
