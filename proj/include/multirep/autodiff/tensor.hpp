#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "multirep/errors.hpp"

namespace multirep::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

enum class Mode { kTrain, kEval };

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct Storage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // sized iff requires_grad
  bool requires_grad = false;
  const void* tape = nullptr;
  std::optional<std::size_t> node_id;
};

}  // namespace detail

/// Dense row-major tensor. A handle with shared ownership; ops never mutate
/// their inputs. Only the optimizer writes through mutable_data().
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor data of length " + std::to_string(data.size()) +
                           " does not fill shape " + shape_string(shape));
    }
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("zero-sized dimension in " + shape_string(shape));
    }
    auto s = std::make_shared<detail::Storage<T>>();
    s->shape = std::move(shape);
    s->data = std::move(data);
    s->requires_grad = requires_grad;
    if (requires_grad) s->grad.assign(s->data.size(), T(0));
    return Tensor(std::move(s));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from({}, {value}, requires_grad);
  }

  static Tensor vector(std::vector<T> values, bool requires_grad = false) {
    Shape shape{values.size()};
    return from(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values,
                       bool requires_grad = false) {
    return from({rows, cols}, std::move(values), requires_grad);
  }

  bool defined() const { return s_ != nullptr; }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t numel() const { return s_->data.size(); }
  bool requires_grad() const { return s_->requires_grad; }
  std::optional<std::size_t> node_id() const { return s_->node_id; }

  std::span<const T> data() const { return s_->data; }
  std::span<T> mutable_data() { return s_->data; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
    return s_->data[0];
  }
  T operator[](std::size_t i) const { return s_->data[i]; }
  T at(std::size_t r, std::size_t c) const { return s_->data[r * s_->shape.at(1) + c]; }

  /// Accumulated gradient. All zeros for tensors that never received one.
  std::span<const T> grad() const { return s_->grad; }
  std::span<T> mutable_grad() { return s_->grad; }
  void zero_grad() { std::fill(s_->grad.begin(), s_->grad.end(), T(0)); }

  /// A copy of the values with no gradient history.
  Tensor detach() const { return from(shape(), s_->data, false); }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

  const std::shared_ptr<detail::Storage<T>>& storage() const { return s_; }
  explicit Tensor(std::shared_ptr<detail::Storage<T>> s) : s_(std::move(s)) {}

 private:
  std::shared_ptr<detail::Storage<T>> s_;
};

/// Ordered computation record. Nodes are appended as ops run, so creation
/// order is a topological order and backward is a reverse sweep.
template <typename T>
class Tape {
 public:
  struct Node {
    const char* tag;
    std::vector<std::size_t> inputs;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }

  /// Appends a node for `output`, produced from `inputs`.
  void record(const char* tag, std::initializer_list<const Tensor<T>*> inputs,
              const Tensor<T>& output, std::function<void()> backward) {
    std::vector<const Tensor<T>*> v(inputs);
    record(tag, v, output, std::move(backward));
  }

  void record(const char* tag, const std::vector<const Tensor<T>*>& inputs,
              const Tensor<T>& output, std::function<void()> backward) {
    Node node{tag, {}, std::move(backward)};
    for (const Tensor<T>* in : inputs) {
      const auto& s = in->storage();
      if (s->tape == this && s->node_id) node.inputs.push_back(*s->node_id);
    }
    output.storage()->tape = this;
    output.storage()->node_id = nodes_.size();
    nodes_.push_back(std::move(node));
  }

  /// Reverse sweep from a scalar loss. Gradients accumulate into every
  /// requires_grad tensor reachable from the loss.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
    }
    const auto& s = loss.storage();
    if (!s->requires_grad) return;
    s->grad[0] += T(1);
    if (s->tape != this || !s->node_id) return;
    for (std::size_t id = *s->node_id + 1; id-- > 0;) {
      nodes_[id].backward();
    }
  }

  void clear() { nodes_.clear(); }

  static Tape* active() { return active_; }

 private:
  template <typename U>
  friend class TapeScope;

  std::vector<Node> nodes_;
  inline static thread_local Tape* active_ = nullptr;
};

/// Makes `tape` the active record for ops on this thread while in scope.
/// Without an active tape, ops build no graph.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::active_) { Tape<T>::active_ = &tape; }
  ~TapeScope() { Tape<T>::active_ = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

}  // namespace multirep::ad
