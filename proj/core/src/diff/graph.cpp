#include "lorex/diff/graph.hpp"

#include <unordered_set>

namespace lorex::diff {

Graph Graph::trace(const Tensor& root) {
  Graph g;
  if (!root.defined()) return g;
  std::unordered_set<const Node*> seen;
  // Iterative post-order DFS; recursion depth would otherwise follow sequence length.
  std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack;
  stack.emplace_back(root.node_ptr(), 0);
  seen.insert(root.node_ptr().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto parent = node->parents[next++];
      if (seen.insert(parent.get()).second) stack.emplace_back(std::move(parent), 0);
      continue;
    }
    g.nodes_.push_back(node);
    stack.pop_back();
  }
  return g;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw GraphError("backward: undefined loss");
  if (loss.size() != 1) {
    throw GraphError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
  }
  if (loss.node().consumed) throw GraphError("backward: graph already consumed by a previous call");
  if (!loss.requires_grad()) return;

  auto graph = Graph::trace(loss);
  loss.node().grad_buffer()[0] += 1.0;
  const auto& nodes = graph.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    Node& n = **it;
    if (n.backward && !n.grad.empty()) n.backward(n);
  }
  for (const auto& n : nodes) {
    if (n->parents.empty()) continue;  // leaves keep their gradients
    n->consumed = true;
    n->backward = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

}  // namespace lorex::diff
