#include "lorex/diff/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace lorex::diff {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

ShapeError::ShapeError(std::string_view op, const std::string& detail)
    : std::invalid_argument(std::string(op) + ": " + detail), op_(op) {}

std::span<double> Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

namespace {
std::shared_ptr<Node> leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (values.size() != numel(shape)) {
    throw ShapeError("tensor", "shape " + to_string(shape) + " holds " +
                                   std::to_string(numel(shape)) + " values, got " +
                                   std::to_string(values.size()));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return n;
}
}  // namespace

Tensor Tensor::zeros(Shape shape) {
  auto n = numel(shape);
  return Tensor(leaf(std::move(shape), std::vector<double>(n, 0.0), false));
}

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  return Tensor(leaf(std::move(shape), std::move(values), false));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  return Tensor(leaf(std::move(shape), std::move(values), true));
}

Tensor Tensor::scalar(double v) { return Tensor(leaf({}, {v}, false)); }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  if (s.size() < 2) return 1;
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
  return r;
}

std::size_t Tensor::cols() const {
  const auto& s = shape();
  return s.empty() ? 1 : s.back();
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item", "tensor " + to_string(shape()) + " is not a scalar");
  return node_->value[0];
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(size(), 0.0);
  return node_->grad;
}

Tensor make_node(std::string_view op, Shape shape, std::vector<double> value,
                 std::vector<Tensor> parents, BackwardFn backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  n->requires_grad = std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& p) { return p.requires_grad(); });
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node_ptr());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

void accumulate(const std::shared_ptr<Node>& t, std::span<const double> g) {
  if (!t->requires_grad) return;
  auto buf = t->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

}  // namespace lorex::diff
