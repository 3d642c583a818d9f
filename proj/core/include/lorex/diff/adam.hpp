#pragma once

#include <string>
#include <vector>

#include "lorex/diff/layers.hpp"
#include "lorex/diff/tensor.hpp"

namespace lorex::diff {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments start at zero; tensors that received no
/// gradient in a step are treated as having a zero gradient.
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig config) : config_(config) {}

  void add(std::string name, Tensor param);
  void add_all(const ParameterStore& store, const std::string& prefix = {});

  /// Throws std::domain_error naming the parameter when a gradient is not finite.
  void step();
  void zero_grad();

  double lr() const { return config_.lr; }
  void set_lr(double lr) { config_.lr = lr; }
  long steps() const { return step_; }

 private:
  struct Slot {
    std::string name;
    Tensor param;
    std::vector<double> m;
    std::vector<double> v;
  };
  AdamConfig config_;
  std::vector<Slot> slots_;
  long step_ = 0;
};

/// lr_epoch = lr_0 * gamma^epoch.
class ExponentialLR {
 public:
  ExponentialLR(Adam& opt, double gamma) : opt_(&opt), base_(opt.lr()), gamma_(gamma) {}
  void step();
  int epoch() const { return epoch_; }

 private:
  Adam* opt_;
  double base_;
  double gamma_;
  int epoch_ = 0;
};

}  // namespace lorex::diff
