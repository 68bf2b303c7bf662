#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace apnea::nn {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape) noexcept;
std::string to_string(const Shape& shape);

/// Dense row-major array of doubles. Plain value type.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& vector() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  void fill(double v) noexcept;
  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const;
  /// this += other, shapes must match.
  void add_(const Tensor& other);
  void release() noexcept;

private:
  Shape shape_;
  std::vector<double> data_;
};

/// Graph node: a value, its accumulated gradient, and the closure that pushes
/// the gradient to its inputs.
struct Node {
  Tensor value;
  Tensor grad; ///< empty until something accumulates into it
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  /// Gradient buffer, zero-allocated on first use.
  Tensor& grad_buffer();
  bool has_graph() const noexcept { return static_cast<bool>(backward_fn); }
};

/// Shared handle on a graph node.
class Var {
public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  /// Empty tensor if no gradient was accumulated.
  const Tensor& grad() const { return node_->grad; }
  void zero_grad();

  Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const noexcept { return node_; }

private:
  std::shared_ptr<Node> node_;
};

/// Whether ops record their inputs for differentiation on this thread.
bool grad_enabled() noexcept;

/// Disables taping for the current thread within its scope.
class NoGradGuard {
public:
  NoGradGuard() noexcept;
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool previous_;
};

/// Wraps an op result. Records `inputs` and `backward_fn` only when taping is
/// enabled and some input requires a gradient.
Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);

/// Reverse sweep from a scalar root. Consumes the graph: intermediate
/// gradients, closures and input links are released as the sweep passes, so
/// a second call on the same root throws StateError. Leaf gradients
/// accumulate.
void backward(const Var& root);

} // namespace apnea::nn
