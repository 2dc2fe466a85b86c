#include "mvi2p/tensor.hpp"

#include <sstream>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace mvi2p {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

}  // namespace detail

Tensor::Tensor() : Tensor(Shape{}, 0.0) {}

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("tensor: shape " + shape_str(shape) + " needs " +
                                std::to_string(shape_numel(shape)) + " values, got " +
                                std::to_string(values.size()));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  Shape s{values.size()};
  return Tensor(std::move(s), std::move(values), requires_grad);
}

std::size_t Tensor::size(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    throw std::out_of_range("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                            shape_str(node_->shape));
  }
  return node_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) {
    throw std::logic_error("tensor: item() on shape " + shape_str(shape()));
  }
  return node_->data[0];
}

void Tensor::set_requires_grad(bool flag) {
  if (!node_->is_leaf()) throw std::logic_error("tensor: requires_grad can only be set on leaves");
  node_->requires_grad = flag;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const {
  auto n = std::make_shared<detail::Node>();
  n->shape = node_->shape;
  n->data = node_->data;
  return Tensor(std::move(n));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.node_->requires_grad = node_->requires_grad && node_->is_leaf();
  return t;
}

Tensor Tensor::make_result(Shape shape, std::vector<double> values, const char* op,
                           std::vector<Tensor> inputs,
                           std::function<void(detail::Node&)> backward_fn) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(values);
  n->op = op;
  bool tracked = false;
  for (const auto& in : inputs) tracked = tracked || in.node_->requires_grad;
  if (tracked) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.node_);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw std::logic_error("backward: loss must be a scalar, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) {
    throw std::logic_error("backward: loss does not depend on any tracked tensor");
  }

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (n->consumed) {
      throw std::logic_error(std::string("backward: graph through '") + n->op +
                             "' was already consumed; run a fresh forward pass");
    }
    if (next < n->inputs.size()) {
      detail::Node* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->is_leaf()) continue;
    if (!n->grad.empty() && n->backward_fn) n->backward_fn(*n);
    n->consumed = true;
    n->backward_fn = nullptr;
  }
}

}  // namespace mvi2p
