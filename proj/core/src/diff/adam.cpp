#include "lorex/diff/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace lorex::diff {

void Adam::add(std::string name, Tensor param) {
  const auto n = param.size();
  slots_.push_back({std::move(name), std::move(param), std::vector<double>(n, 0.0),
                    std::vector<double>(n, 0.0)});
}

void Adam::add_all(const ParameterStore& store, const std::string& prefix) {
  for (const auto& [name, t] : store.entries())
    if (name.starts_with(prefix)) add(name, t);
}

void Adam::step() {
  for (const auto& s : slots_) {
    if (!s.param.has_grad()) continue;
    for (double g : s.param.node().grad)
      if (!std::isfinite(g)) throw std::domain_error("non-finite gradient in parameter '" + s.name + "'");
  }
  ++step_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  const double b1 = config_.beta1, b2 = config_.beta2, lr = config_.lr, eps = config_.eps;
  for (auto& s : slots_) {
    auto& node = s.param.node();
    const std::size_t n = node.value.size();
    const double* g = node.grad.empty() ? nullptr : node.grad.data();
    double* __restrict m = s.m.data();
    double* __restrict v = s.v.data();
    double* __restrict w = node.value.data();
    if (g) {
      for (std::size_t i = 0; i < n; ++i) {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        m[i] = b1 * m[i];
        v[i] = b2 * v[i];
        w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      }
    }
  }
}

void Adam::zero_grad() {
  for (auto& s : slots_) s.param.zero_grad();
}

void ExponentialLR::step() {
  ++epoch_;
  opt_->set_lr(base_ * std::pow(gamma_, epoch_));
}

}  // namespace lorex::diff
