#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lorex::diff {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised when operand extents do not conform to an op's contract.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(std::string_view op, const std::string& detail);
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

/// Misuse of the autodiff graph (non-scalar loss, double backward, ...).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Node;
using BackwardFn = std::function<void(Node&)>;

/// One record of the define-by-run graph. Leaves have no parents.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool consumed = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  std::span<double> grad_buffer();
};

/// Shared handle to a graph node. Copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape);
  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor parameter(Shape shape, std::vector<double> values);
  static Tensor scalar(double v);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  /// Leading extents flattened; a rank-0/1 tensor is one row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient after backward(); zeros if nothing flowed here.
  std::vector<double> grad() const;
  void zero_grad() { node_->grad.clear(); }

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Builds an interior node. `backward` reads node.grad and accumulates into parents.
/// Custom ops (e.g. straight-through estimators) are written with this.
Tensor make_node(std::string_view op, Shape shape, std::vector<double> value,
                 std::vector<Tensor> parents, BackwardFn backward);

/// Adds `g` into the gradient buffer of `t` when it participates in differentiation.
void accumulate(const std::shared_ptr<Node>& t, std::span<const double> g);

}  // namespace lorex::diff
