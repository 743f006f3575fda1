#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace xsurv {

using Shape = std::vector<int64_t>;

// Storage aligned to 64 bytes. Vectorized kernels peel a pointer-dependent
// number of leading elements, so a fixed alignment keeps float results
// identical from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

// Base error for all library failures.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when tensor shapes disagree; the message names the offending axis.
class ShapeError : public Error {
 public:
  ShapeError(std::string_view op, int axis, int64_t got, int64_t expected)
      : Error(format(op, axis, got, expected)), axis_(axis) {}
  explicit ShapeError(const std::string& msg) : Error(msg) {}

  int axis() const { return axis_; }

 private:
  static std::string format(std::string_view op, int axis, int64_t got, int64_t expected) {
    std::ostringstream oss;
    oss << op << ": shape mismatch on axis " << axis << " (got " << got << ", expected "
        << expected << ")";
    return oss.str();
  }
  int axis_ = -1;
};

inline int64_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), int64_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream oss;
  oss << '[';
  for (size_t i = 0; i < s.size(); ++i) oss << (i ? "," : "") << s[i];
  oss << ']';
  return oss.str();
}

// Gradient recording switch; thread-local so replicas on other threads are unaffected.
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs that require grad.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }

  T* grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad.data();
  }
  // Grad of input i, or nullptr when that input does not need one.
  T* input_grad(size_t i) {
    auto& in = inputs[i];
    return in->requires_grad ? in->grad_buffer() : nullptr;
  }
  const T* input_value(size_t i) const { return inputs[i]->value.data(); }
};

template <typename T>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, const std::vector<T>& values, bool requires_grad = false) {
    return from(std::move(shape), Buffer<T>(values.begin(), values.end()), requires_grad);
  }
  static Tensor from(Shape shape, std::initializer_list<T> values, bool requires_grad = false) {
    return from(std::move(shape), Buffer<T>(values), requires_grad);
  }
  static Tensor from(Shape shape, Buffer<T> values, bool requires_grad = false) {
    for (auto d : shape)
      if (d <= 0) throw ShapeError("tensor: non-positive dimension in " + to_string(shape));
    if (numel_of(shape) != static_cast<int64_t>(values.size()))
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                       to_string(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    auto n = numel_of(shape);
    return from(std::move(shape), Buffer<T>(static_cast<size_t>(n), v), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }
  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  explicit operator bool() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int64_t dim(int axis) const {
    if (axis < 0) axis += ndim();
    return node_->shape.at(static_cast<size_t>(axis));
  }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

  T* data() { return node_->value.data(); }
  const T* data() const { return node_->value.data(); }
  std::span<T> values() { return node_->value; }
  std::span<const T> values() const { return node_->value; }
  const Buffer<T>& vec() const { return node_->value; }
  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
    return node_->value[0];
  }
  T at(int64_t i) const { return node_->value.at(static_cast<size_t>(i)); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<T> grad() { return {node_->grad_buffer(), node_->value.size()}; }
  std::span<const T> grad() const {
    return {const_cast<Node<T>*>(node_.get())->grad_buffer(), node_->value.size()};
  }
  void zero_grad() { node_->grad.clear(); }

  std::string_view op() const { return node_->op; }
  Node<T>* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }

  // Copy of the values without graph history.
  Tensor detach() const { return from(shape(), node_->value, false); }

 private:
  NodePtr node_;
};

// Builds an op output. History is attached only when grad mode is on and an
// input needs a gradient.
template <typename T>
Tensor<T> make_result(std::string_view op, Shape shape, Buffer<T> values,
                      std::initializer_list<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->op = op;
  bool needs = false;
  if (grad_mode_flag())
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    n->requires_grad = true;
    for (const auto& t : inputs) n->inputs.push_back(t.node_ptr());
    n->backward = std::move(backward);
  }
  return Tensor<T>(std::move(n));
}

template <typename T>
Tensor<T> make_result(std::string_view op, Shape shape, Buffer<T> values,
                      const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->op = op;
  bool needs = false;
  if (grad_mode_flag())
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    n->requires_grad = true;
    for (const auto& t : inputs) n->inputs.push_back(t.node_ptr());
    n->backward = std::move(backward);
  }
  return Tensor<T>(std::move(n));
}

// Operations recorded behind a root tensor, in topological order (every op's
// inputs precede it). Rebuilt for each backward pass.
template <typename T>
class Tape {
 public:
  static Tape record(const Tensor<T>& root) {
    Tape tape;
    std::unordered_set<const Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node<T>* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        tape.order_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  std::span<Node<T>* const> nodes() const { return order_; }
  size_t size() const { return order_.size(); }

 private:
  std::vector<Node<T>*> order_;
};

// Reverse-mode pass from a scalar loss. Leaf gradients accumulate across calls;
// intermediate gradients are recomputed on each call.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw Error("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  if (!loss.requires_grad()) throw Error("backward: loss does not depend on any parameter");
  auto tape = Tape<T>::record(loss);
  for (auto* n : tape.nodes())
    if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
  loss.node()->grad_buffer()[0] = T(1);
  auto nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it)
    if (!(*it)->is_leaf()) (*it)->backward(**it);
}

}  // namespace xsurv
