#include "ecg/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "ecg/error.hpp"

namespace ecg::ad {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  if (shape.size() == 1) os << ',';
  os << ')';
  return os.str();
}

template <class T>
Tensor<T> Tensor<T>::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, T(0), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value, bool requires_grad) {
  for (auto d : shape)
    if (d <= 0) throw ShapeError("tensor: non-positive dimension in shape " + to_string(shape));
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->value.assign(static_cast<std::size_t>(ad::numel(shape)), value);
  Tensor t(std::move(node));
  t.set_requires_grad(requires_grad);
  return t;
}

template <class T>
Tensor<T> Tensor<T>::from(const Shape& shape, std::vector<T> values, bool requires_grad) {
  for (auto d : shape)
    if (d <= 0) throw ShapeError("tensor: non-positive dimension in shape " + to_string(shape));
  if (static_cast<std::int64_t>(values.size()) != ad::numel(shape)) {
    throw ShapeError("tensor: " + std::to_string(values.size()) + " values do not fill shape " +
                     to_string(shape));
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->value = std::move(values);
  Tensor t(std::move(node));
  t.set_requires_grad(requires_grad);
  return t;
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

template <class T>
std::int64_t Tensor<T>::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("tensor: axis out of range for shape " + to_string(shape()));
  return node_->shape[static_cast<std::size_t>(axis)];
}

template <class T>
T Tensor<T>::item() const {
  if (node_->value.size() != 1)
    throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
  return node_->value[0];
}

template <class T>
T Tensor<T>::at(std::initializer_list<std::int64_t> index) const {
  if (static_cast<int>(index.size()) != rank()) throw ShapeError("at: index rank mismatch");
  std::int64_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i < 0 || i >= node_->shape[axis]) throw ShapeError("at: index out of range");
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->value[static_cast<std::size_t>(flat)];
}

template <class T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  node_->requires_grad = flag;
  if (flag && node_->is_leaf() && node_->grad.size() != node_->value.size()) {
    node_->grad.assign(node_->value.size(), T(0));
  }
  return *this;
}

template <class T>
void Tensor<T>::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <class T>
void Tensor<T>::backward() const {
  if (node_->value.size() != 1)
    throw ShapeError("backward: loss must be a scalar, got shape " + to_string(shape()));
  if (!node_->requires_grad) throw Error("backward: loss does not depend on any tensor requiring grad");

  // Iterative post-order DFS gives a topological order with each node once.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node<T>* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  if (node_->grad.size() != 1) node_->grad.assign(1, T(0));
  node_->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf() || !n->backward) continue;
    for (auto& in : n->inputs) {
      if (in->requires_grad && in->grad.size() != in->value.size()) in->grad.assign(in->value.size(), T(0));
    }
    n->backward(*n);
    // Interior gradients are consumed exactly once; release them.
    std::vector<T>().swap(n->grad);
  }
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
  auto node = std::make_shared<Node<T>>();
  node->shape = node_->shape;
  node->value = node_->value;
  return Tensor(std::move(node));
}

template <class T>
Tensor<T> Tensor<T>::clone() const {
  return detach();
}

template <class T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<Tensor<T>> inputs, BackwardFn<T> backward, bool stochastic) {
  auto node = std::make_shared<Node<T>>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->stochastic = stochastic;
  bool any = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) any = any || in.requires_grad();
  }
  if (any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template <class T>
static void visit(const Tensor<T>& root, const std::function<void(const Node<T>&)>& fn) {
  std::vector<const Node<T>*> stack{root.node()};
  std::unordered_set<const Node<T>*> seen{root.node()};
  while (!stack.empty()) {
    const Node<T>* n = stack.back();
    stack.pop_back();
    fn(*n);
    for (const auto& in : n->inputs)
      if (seen.insert(in.get()).second) stack.push_back(in.get());
  }
}

template <class T>
bool graph_has_stochastic(const Tensor<T>& root) {
  bool found = false;
  visit<T>(root, [&](const Node<T>& n) { found = found || n.stochastic; });
  return found;
}

template <class T>
std::size_t graph_size(const Tensor<T>& root) {
  std::size_t count = 0;
  visit<T>(root, [&](const Node<T>& n) { count += n.requires_grad ? 1 : 0; });
  return count;
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> make_result(const char*, Shape, std::vector<float>, std::vector<Tensor<float>>,
                                   BackwardFn<float>, bool);
template Tensor<double> make_result(const char*, Shape, std::vector<double>, std::vector<Tensor<double>>,
                                    BackwardFn<double>, bool);
template bool graph_has_stochastic(const Tensor<float>&);
template bool graph_has_stochastic(const Tensor<double>&);
template std::size_t graph_size(const Tensor<float>&);
template std::size_t graph_size(const Tensor<double>&);

}  // namespace ecg::ad
