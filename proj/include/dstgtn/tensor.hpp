#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dstgtn/errors.hpp"

namespace dstgtn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline std::uint64_t next_sequence() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables recording of backward rules for the lifetime of the guard (inference mode).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t sequence = detail::next_sequence();
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(const Node&)> backward;

  bool is_leaf() const { return !backward; }

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Dense row-major tensor with optional gradient tracking.
///
/// A Tensor is a shared handle; copies alias the same storage. Values produced by
/// operations are treated as immutable. Only leaves (parameters, inputs) are mutated,
/// and only through `mutable_values()`.
template <class T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (numel(shape) != values.size()) {
      throw DimensionError("tensor of shape " + to_string(shape) + " cannot hold " +
                           std::to_string(values.size()) + " values");
    }
    for (auto e : shape) {
      if (e == 0) throw DimensionError("zero extent in shape " + to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T fill) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, fill));
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::ptrdiff_t axis) const {
    const auto r = static_cast<std::ptrdiff_t>(rank());
    return node_->shape.at(static_cast<std::size_t>(axis < 0 ? axis + r : axis));
  }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  const std::vector<T>& vec() const { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient accumulated by backward; zeros if none has been accumulated yet.
  std::vector<T> grad() const {
    return has_grad() ? node_->grad : std::vector<T>(size(), T(0));
  }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  T at(std::initializer_list<std::size_t> index) const { return node_->value[offset(index)]; }

  std::size_t offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw DimensionError("index rank mismatch for " + to_string(shape()));
    std::size_t off = 0;
    std::size_t i = 0;
    for (auto v : index) {
      if (v >= node_->shape[i]) throw DimensionError("index out of range for " + to_string(shape()));
      off = off * node_->shape[i] + v;
      ++i;
    }
    return off;
  }

  /// Same values, no history.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds an operation result; records the backward rule only when gradient mode is on
/// and some input requires a gradient.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::vector<Tensor<T>> inputs,
                      std::function<void(const Node<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(values));
  if (!grad_enabled()) return out;
  const bool track = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor<T>& t) { return t.requires_grad(); });
  if (!track) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.parents.reserve(inputs.size());
  for (auto& in : inputs) node.parents.push_back(in.node());
  node.backward = std::move(backward);
  return out;
}

/// The recorded operations reachable from a loss, in reverse creation order.
///
/// Creation order is a valid topological order because every operation is recorded
/// after its inputs exist.
template <class T>
class Tape {
 public:
  static Tape record(const Tensor<T>& root) {
    Tape tape;
    std::unordered_set<const Node<T>*> seen;
    std::vector<Node<T>*> stack{root.node().get()};
    while (!stack.empty()) {
      Node<T>* n = stack.back();
      stack.pop_back();
      if (!n->requires_grad || !seen.insert(n).second) continue;
      tape.nodes_.push_back(n);
      for (auto& p : n->parents) stack.push_back(p.get());
    }
    std::sort(tape.nodes_.begin(), tape.nodes_.end(),
              [](const Node<T>* a, const Node<T>* b) { return a->sequence > b->sequence; });
    return tape;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Seeds the root with d(root)/d(root) = 1 and runs every backward rule.
  /// Intermediate gradients are reset first; leaf gradients accumulate.
  void replay() {
    if (nodes_.empty()) return;
    for (auto* n : nodes_) {
      if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
    }
    auto& root_grad = nodes_.front()->ensure_grad();
    for (auto& g : root_grad) g += T(1);
    for (auto* n : nodes_) {
      if (!n->is_leaf()) n->backward(*n);
    }
  }

 private:
  std::vector<Node<T>*> nodes_;
};

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires a gradient.
template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  Tape<T>::record(loss).replay();
}

}  // namespace dstgtn
