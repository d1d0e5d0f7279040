#pragma once

// Reverse-mode differentiable n-dimensional arrays.
//
// A tensor is a shared handle onto a graph node. Copying a handle aliases the
// node; use clone() for an independent leaf. Operations (see ops.hpp) record
// their inputs and a backward closure while gradient recording is enabled and
// at least one input requires a gradient. backward() walks the recorded graph
// once and consumes it.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mococxr::diffcore {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // sized only when requires_grad
  bool requires_grad = false;
  bool grad_populated = false;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Propagates this node's grad into its inputs' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn && inputs.empty() && !consumed; }
  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T{0});
    return grad;
  }
};

bool grad_mode_enabled();

}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
class BasicTensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, bool requires_grad = false);
  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static BasicTensor scalar(T value);
  static BasicTensor from_node(NodePtr node);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const T> values() const;
  // Direct mutation bypasses the graph; only meaningful on leaves.
  std::span<T> values_mut();
  T item() const;
  T at(std::size_t flat_index) const { return values()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  // True once a backward pass has reached this tensor since the last zero_grad.
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> grad_mut();
  void zero_grad();

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every reachable
  // tensor that requires one. Throws std::logic_error when called on a graph
  // that has already been consumed.
  void backward() const;

  // Independent leaf with copied values and no gradient.
  BasicTensor clone() const;
  // Leaf sharing no history; values are copied.
  BasicTensor detach() const { return clone(); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

template <class To, class From>
BasicTensor<To> cast(const BasicTensor<From>& source) {
  std::vector<To> out(source.numel());
  auto in = source.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(in[i]);
  return BasicTensor<To>(source.shape(), std::move(out), source.requires_grad());
}

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;

}  // namespace mococxr::diffcore
