#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mvi2p {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One vertex of the dynamic tape. Non-leaf nodes hold a closure that pushes
// their own gradient into the gradients of `inputs`.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool consumed = false;  // set once backward has run through this node
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return inputs.empty(); }
  std::vector<double>& grad_buffer();
};

}  // namespace detail

/// Dense row-major float64 array with optional gradient tracking.
///
/// Tensor is a cheap handle: copies share the same storage and tape node.
/// Use clone() for an independent copy and detach() to cut the tape.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad();

  /// Same values, no tape history, no gradient tracking.
  Tensor detach() const;
  Tensor clone() const;

  /// Reverse-mode sweep from this scalar. Every reachable tensor with
  /// requires_grad receives d(this)/d(tensor), accumulated across fan-out.
  void backward() const;

  const char* op_tag() const { return node_->op; }
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  // Tape construction, used by the op implementations.
  static Tensor make_result(Shape shape, std::vector<double> values, const char* op,
                            std::vector<Tensor> inputs,
                            std::function<void(detail::Node&)> backward_fn);
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

}  // namespace mvi2p
