#pragma once

#include <memory>
#include <vector>

#include "lorex/diff/tensor.hpp"

namespace lorex::diff {

/// Topologically ordered view of every node reachable from a root.
/// Parents always precede children.
class Graph {
 public:
  static Graph trace(const Tensor& root);

  const std::vector<std::shared_ptr<Node>>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::shared_ptr<Node>> nodes_;
};

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable tensor with requires_grad set. The graph is released afterwards;
/// calling backward on the same loss again throws GraphError.
void backward(const Tensor& loss);

}  // namespace lorex::diff
