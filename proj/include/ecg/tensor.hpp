#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ecg::ad {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <class T>
struct Node;

/// Accumulates the gradient of `self` into the gradients of its inputs. Input
/// gradient buffers are allocated (zero-filled) by the engine before the call.
template <class T>
using BackwardFn = std::function<void(Node<T>& self)>;

/// One value in the differentiation graph. Interior nodes own their inputs, so
/// a graph lives exactly as long as the tensors that reference it.
template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient flows in
  bool requires_grad = false;
  bool stochastic = false;  // sampled randomness (dropout in train mode)
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn<T> backward;

  bool is_leaf() const { return inputs.empty(); }
};

/// Dense row-major n-d array participating in reverse-mode differentiation.
///
/// Copying a Tensor copies the handle, not the buffer. Values produced by an
/// operation are never modified afterwards; only leaves (parameters, inputs)
/// expose mutable storage.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, T value, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::span<const T> data() const { return node_->value; }
  /// Mutable storage; only meaningful on leaves (parameters, buffers, inputs).
  std::span<T> mutable_data() { return node_->value; }
  T item() const;
  T at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  /// Marks a leaf as trainable and allocates its gradient buffer.
  Tensor& set_requires_grad(bool flag);
  /// Gradient buffer; zero-filled for leaves that never received a gradient.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad();

  /// Reverse-mode sweep from this scalar. Gradients accumulate into leaves:
  /// calling backward twice without zero_grad() adds both contributions.
  void backward() const;

  /// Same values, cut from the graph.
  Tensor detach() const;
  /// Deep copy of the values into a fresh leaf.
  Tensor clone() const;

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Whether operations currently record graph nodes (thread-local).
bool grad_enabled();

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Builds the output of an operation. The node is linked into the graph only
/// if recording is enabled and some input requires a gradient.
template <class T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<Tensor<T>> inputs, BackwardFn<T> backward,
                      bool stochastic = false);

/// True if the graph reachable from `root` contains a stochastic node.
template <class T>
bool graph_has_stochastic(const Tensor<T>& root);

/// Number of nodes reachable from `root` that take part in backward.
template <class T>
std::size_t graph_size(const Tensor<T>& root);

}  // namespace ecg::ad
