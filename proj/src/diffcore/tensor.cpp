#include "mococxr/diffcore/tensor.hpp"

#include <sstream>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace mococxr::diffcore {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {
namespace {
thread_local bool g_grad_enabled = true;
}
bool grad_mode_enabled() { return g_grad_enabled; }
void set_grad_mode(bool enabled) { g_grad_enabled = enabled; }
}  // namespace detail

NoGradGuard::NoGradGuard() : previous_(detail::grad_mode_enabled()) { detail::set_grad_mode(false); }
NoGradGuard::~NoGradGuard() { detail::set_grad_mode(previous_); }

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, bool requires_grad)
    : BasicTensor(shape, std::vector<T>(shape_numel(shape), T{0}), requires_grad) {}

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values, bool requires_grad)
    : node_(std::make_shared<detail::Node<T>>()) {
  if (values.size() != shape_numel(shape)) {
    throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                " values do not fill shape " + shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  set_requires_grad(requires_grad);
}

template <class T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
  return BasicTensor(Shape{}, std::vector<T>{value});
}

template <class T>
BasicTensor<T> BasicTensor<T>::from_node(NodePtr node) {
  BasicTensor t;
  t.node_ = std::move(node);
  return t;
}

namespace {
template <class N>
const N& checked(const std::shared_ptr<N>& node) {
  if (!node) throw std::logic_error("tensor: use of undefined tensor");
  return *node;
}
}  // namespace

template <class T>
const Shape& BasicTensor<T>::shape() const {
  return checked(node_).shape;
}

template <class T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw std::out_of_range("tensor: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}

template <class T>
std::size_t BasicTensor<T>::numel() const {
  return checked(node_).value.size();
}

template <class T>
std::span<const T> BasicTensor<T>::values() const {
  return checked(node_).value;
}

template <class T>
std::span<T> BasicTensor<T>::values_mut() {
  checked(node_);
  return node_->value;
}

template <class T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw std::logic_error("tensor: item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <class T>
bool BasicTensor<T>::requires_grad() const {
  return checked(node_).requires_grad;
}

template <class T>
void BasicTensor<T>::set_requires_grad(bool flag) {
  checked(node_);
  node_->requires_grad = flag;
  if (flag) {
    node_->ensure_grad();
  } else {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
    node_->grad_populated = false;
  }
}

template <class T>
bool BasicTensor<T>::has_grad() const {
  return checked(node_).requires_grad && node_->grad_populated;
}

template <class T>
std::span<const T> BasicTensor<T>::grad() const {
  if (!requires_grad()) throw std::logic_error("tensor: grad() on tensor that does not require grad");
  return node_->grad;
}

template <class T>
std::span<T> BasicTensor<T>::grad_mut() {
  if (!requires_grad()) throw std::logic_error("tensor: grad_mut() on tensor that does not require grad");
  return node_->ensure_grad();
}

template <class T>
void BasicTensor<T>::zero_grad() {
  if (!requires_grad()) return;
  node_->ensure_grad();
  std::fill(node_->grad.begin(), node_->grad.end(), T{0});
  node_->grad_populated = false;
}

template <class T>
void BasicTensor<T>::backward() const {
  auto& root = checked(node_);
  if (root.consumed) throw std::logic_error("backward: graph already consumed; re-run the forward pass");
  if (root.value.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_str(root.shape));
  }
  if (!root.requires_grad) throw std::logic_error("backward: loss does not depend on any tensor requiring grad");

  // Iterative post-order DFS gives a topological order (inputs before users).
  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodeT* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (NodeT* n : order) {
    if (n->backward_fn) n->ensure_grad().assign(n->value.size(), T{0});
  }
  node_->ensure_grad()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
  for (NodeT* n : order) {
    n->grad_populated = true;
    if (n->backward_fn || !n->inputs.empty()) {
      n->backward_fn = nullptr;
      n->inputs.clear();
      n->consumed = true;
    }
  }
}

template <class T>
BasicTensor<T> BasicTensor<T>::clone() const {
  return BasicTensor(shape(), std::vector<T>(values().begin(), values().end()), false);
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace mococxr::diffcore
