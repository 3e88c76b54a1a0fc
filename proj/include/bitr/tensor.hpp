#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace bitr {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// Raised when operand shapes are inconsistent. The message names the axis.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

/// Row-major strides; the last axis has stride 1.
inline Shape strides_of(const Shape& shape) {
  Shape s(shape.size(), 1);
  for (Index i = static_cast<Index>(shape.size()) - 2; i >= 0; --i) s[i] = s[i + 1] * shape[i + 1];
  return s;
}

template <class Scalar>
struct TensorStorage {
  Shape shape;
  std::vector<Scalar> data;
  std::vector<Scalar> grad;  // empty until first accumulation
  bool requires_grad = false;
};

/// Dense row-major N-d array with optional participation in a gradient tape.
///
/// Copies share storage. Ops never mutate their inputs; only the optimizer
/// writes into parameter buffers and only backward() writes gradients.
template <class Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;

  Tensor() : node_(std::make_shared<TensorStorage<Scalar>>()) {}

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : Tensor() {
    for (std::size_t i = 0; i < shape.size(); ++i)
      if (shape[i] < 0) throw ShapeError("negative size on axis " + std::to_string(i));
    node_->data.assign(static_cast<std::size_t>(bitr::numel(shape)), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<Scalar> values) : Tensor() {
    if (bitr::numel(shape) != static_cast<Index>(values.size()))
      throw ShapeError("buffer of " + std::to_string(values.size()) + " elements cannot have shape " +
                       to_string(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  static Tensor scalar(Scalar v) { return Tensor(Shape{}, std::vector<Scalar>{v}); }

  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index axis) const {
    if (axis < 0) axis += rank();
    if (axis < 0 || axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range");
    return node_->shape[axis];
  }
  Index numel() const { return static_cast<Index>(node_->data.size()); }

  std::span<Scalar> data() { return node_->data; }
  std::span<const Scalar> data() const { return node_->data; }
  std::vector<Scalar>& buffer() { return node_->data; }
  const std::vector<Scalar>& buffer() const { return node_->data; }

  Scalar& operator[](Index i) { return node_->data[static_cast<std::size_t>(i)]; }
  Scalar operator[](Index i) const { return node_->data[static_cast<std::size_t>(i)]; }

  Scalar item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const Scalar> grad() const { return node_->grad; }
  /// Gradient buffer, allocated as zeros on first use. Handles share storage,
  /// so this is available through const handles captured by backward rules.
  std::span<Scalar> grad_buffer() const {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), Scalar(0));
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Deep copy without gradient or tape participation.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<TensorStorage<Scalar>> node_;
};

/// Records differentiable operations in evaluation order and replays their
/// backward rules in exact reverse order.
///
/// Constructing a tape makes it the active tape of the calling thread for the
/// given scalar type; destruction restores the previous one. Ops evaluated
/// with no active tape, or with no input requiring a gradient, are not
/// recorded.
template <class Scalar>
class Tape {
 public:
  Tape() : previous_(active_) { active_ = this; }
  ~Tape() { active_ = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  std::size_t size() const { return nodes_.size(); }

  void record(std::function<void()> backward_rule) { nodes_.push_back(std::move(backward_rule)); }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded rule in reverse.
  void backward(Tensor<Scalar> loss) {
    if (loss.numel() != 1) throw ShapeError("backward() needs a scalar loss, got " + to_string(loss.shape()));
    if (nodes_.empty()) throw std::logic_error("backward() on an empty tape");
    loss.grad_buffer()[0] += Scalar(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
  }

 private:
  std::vector<std::function<void()>> nodes_;
  Tape* previous_;
  static inline thread_local Tape* active_ = nullptr;
};

namespace detail {

template <class Scalar>
bool any_requires_grad(std::initializer_list<const Tensor<Scalar>*> inputs) {
  for (const auto* t : inputs)
    if (t && t->requires_grad()) return true;
  return false;
}

/// Registers `rule` on the active tape when any input needs a gradient.
/// Returns true when recorded; the output is then marked as requiring grad.
template <class Scalar, class Rule>
bool record(std::initializer_list<const Tensor<Scalar>*> inputs, Tensor<Scalar>& out, Rule&& rule) {
  auto* tape = Tape<Scalar>::active();
  if (!tape || !any_requires_grad<Scalar>(inputs)) return false;
  out.set_requires_grad(true);
  tape->record([out, rule = std::forward<Rule>(rule)]() mutable {
    if (!out.has_grad()) return;
    rule(out.grad());
  });
  return true;
}

template <class Scalar>
bool record_needed(std::initializer_list<const Tensor<Scalar>*> inputs) {
  return Tape<Scalar>::active() && any_requires_grad<Scalar>(inputs);
}

}  // namespace detail

}  // namespace bitr
