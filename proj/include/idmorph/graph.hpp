#pragma once

#include <functional>
#include <string>
#include <vector>

#include "idmorph/tensor.hpp"

namespace idmorph {

/// Tape of recorded operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so inputs always precede the node
/// that consumes them; backward() replays them in exact reverse order.
/// Gradients accumulate (+=) into leaf buffers; callers zero leaf gradients
/// between steps.
template <typename T>
class Graph {
 public:
  struct Node {
    std::string op;
    std::vector<TensorPtr<T>> inputs;
    TensorPtr<T> output;
    std::function<void()> backward;
  };

  Graph() = default;
  explicit Graph(bool recording) : recording_(recording) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  /// True when an op over `inputs` must be taped.
  bool wants(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!recording_) return false;
    for (const auto* t : inputs) {
      if (t != nullptr && t->requires_grad()) return true;
    }
    return false;
  }

  void record(std::string op, std::vector<TensorPtr<T>> inputs, TensorPtr<T> output,
              std::function<void()> backward) {
    output->set_requires_grad(true);
    nodes_.push_back({std::move(op), std::move(inputs), std::move(output), std::move(backward)});
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every taped input.
  void backward(const TensorPtr<T>& loss) {
    if (loss->numel() != 1) {
      throw DimensionError("backward requires a scalar loss, got shape " + shape_str(loss->shape()));
    }
    loss->ensure_grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output->grad().empty()) continue;  // not on a path to the loss
      it->backward();
    }
  }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

 private:
  std::vector<Node> nodes_;
  bool recording_ = true;
};

}  // namespace idmorph
