#pragma once

// Dense tensors with reverse-mode gradients recorded on an explicit tape.

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mflow::ad {

using Shape = std::vector<int>;

/// Tensor storage. Every buffer starts on an Eigen packet boundary, so the
/// vectorized kernels take the same path on every run and results are
/// bit-reproducible.
template <typename Scalar>
using Buffer = std::vector<Scalar, Eigen::aligned_allocator<Scalar>>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("Tensor: dimensions must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

template <typename Scalar>
struct Node {
  Shape shape;
  Buffer<Scalar> value;
  Buffer<Scalar> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::function<void()> backward;  // propagates `grad` into the parents it captured

  Buffer<Scalar>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), Scalar(0));
    return grad;
  }
};

template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, Buffer<Scalar> values, bool requires_grad = false) : node_(std::make_shared<Node<Scalar>>()) {
    if (values.size() != shape_numel(shape)) {
      throw std::invalid_argument("Tensor: data length " + std::to_string(values.size()) +
                                  " does not match shape " + shape_string(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, const std::vector<Scalar>& values, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer<Scalar>(values.begin(), values.end()), requires_grad) {}

  Tensor(Shape shape, std::initializer_list<Scalar> values, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer<Scalar>(values), requires_grad) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), Buffer<Scalar>(n, Scalar(0)), requires_grad);
  }

  static Tensor constant(Shape shape, Scalar v) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), Buffer<Scalar>(n, v));
  }

  static Tensor scalar(Scalar v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  const Buffer<Scalar>& data() const { return node_->value; }
  Buffer<Scalar>& mutable_data() { return node_->value; }
  Scalar item() const {
    if (numel() != 1) throw std::logic_error("Tensor::item on non-scalar " + shape_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  /// Gradient after backward; zeros when nothing reached this tensor.
  Buffer<Scalar> grad() const {
    return node_->grad.empty() ? Buffer<Scalar>(numel(), Scalar(0)) : node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Same values, no history.
  Tensor detach() const { return Tensor(shape(), data(), false); }

  const std::shared_ptr<Node<Scalar>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

/// Append-only record of differentiable operations in creation order; parents
/// always precede children, so a reverse sweep is a valid topological order.
template <typename Scalar>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<Node<Scalar>> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  void backward(const Tensor<Scalar>& loss) {
    if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be a scalar, got " + shape_string(loss.shape()));
    loss.node()->ensure_grad()[0] += Scalar(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<Scalar>& n = **it;
      if (!n.grad.empty() && n.backward) n.backward();
    }
  }

  /// Tape that new operations are recorded on, if any (per thread).
  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

 private:
  std::vector<std::shared_ptr<Node<Scalar>>> nodes_;
};

/// Makes `tape` the active recording target for the lifetime of the scope.
template <typename Scalar>
class TapeScope {
 public:
  explicit TapeScope(Tape<Scalar>& tape) : previous_(Tape<Scalar>::active()) { Tape<Scalar>::active() = &tape; }
  ~TapeScope() { Tape<Scalar>::active() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Scalar>* previous_;
};

namespace detail {

template <typename Scalar, typename... Ts>
bool any_requires_grad(const Ts&... ts) {
  return ((ts.defined() && ts.requires_grad()) || ...);
}

/// Output tensor of an operation. When recording is active and an input needs
/// gradients, the result joins the active tape with `make_backward(out_node)`.
template <typename Scalar, typename MakeBackward, typename... Inputs>
Tensor<Scalar> make_result(Shape shape, Buffer<Scalar> values, MakeBackward&& make_backward,
                           const Inputs&... inputs) {
  Tensor<Scalar> out(std::move(shape), std::move(values));
  Tape<Scalar>* tape = Tape<Scalar>::active();
  if (tape != nullptr && any_requires_grad<Scalar>(inputs...)) {
    Node<Scalar>* raw = out.node().get();
    raw->requires_grad = true;
    raw->backward = make_backward(raw);
    tape->record(out.node());
  }
  return out;
}

template <typename Scalar>
bool wants_grad(const Tensor<Scalar>& t) {
  return t.defined() && t.requires_grad();
}

}  // namespace detail

}  // namespace mflow::ad
