#pragma once

#include <string>

#include "idmorph/graph.hpp"
#include "idmorph/layers.hpp"
#include "idmorph/ops.hpp"
#include "idmorph/rng.hpp"

// Adaptive identity modulation: batch normalization whose re-scale and shift
// come from the identity feature, gated by an attention computed from the
// feature map being modulated.

namespace idmorph {

/// Two dense layers with a leaky-relu between them; the last layer is
/// linear or sigmoid.
template <typename T>
struct Mlp2 {
  DenseLayer<T> hidden;
  DenseLayer<T> output;
  bool sigmoid_output = false;

  static Mlp2 init(std::size_t in, std::size_t width, std::size_t out, bool sigmoid_output, Rng& rng);

  TensorPtr<T> operator()(Graph<T>& g, const TensorPtr<T>& x) const;
  void collect(const std::string& prefix, ParameterSet<T>& set) const {
    hidden.collect(prefix + ".0", set);
    output.collect(prefix + ".1", set);
  }
};

template <typename T>
struct AimParams {
  Mlp2<T> tau;    // C -> C_id, sigmoid output
  Mlp2<T> gamma;  // C_id -> C, output bias starts at 1
  Mlp2<T> beta;   // C_id -> C, output bias starts at 0
  BatchNormStats<T> stats;

  static AimParams init(std::size_t channels, std::size_t id_dim, Rng& rng);

  std::size_t channels() const { return gamma.output.out(); }
  std::size_t id_dim() const { return tau.output.out(); }
  void validate() const;
  void collect(const std::string& prefix, ParameterSet<T>& set) const;
  void buffers(const std::string& prefix, BufferList<T>& out);
};

/// B-hat: per-channel normalization, no affine re-scale.
template <typename T>
TensorPtr<T> batch_normalize(Graph<T>& g, const TensorPtr<T>& b, BatchNormStats<T>& stats, Mode mode) {
  return batch_norm(g, b, stats, mode);
}

/// att_B = tau(spatial mean of B), [N, C_id], entries in (0, 1).
template <typename T>
TensorPtr<T> channel_attention(Graph<T>& g, const TensorPtr<T>& b, const AimParams<T>& params);

/// gamma(f_id * att_B) * B-hat + beta(f_id * att_B), broadcast per item and channel.
template <typename T>
TensorPtr<T> aim_forward(Graph<T>& g, const TensorPtr<T>& b, const TensorPtr<T>& f_id, AimParams<T>& params,
                         Mode mode);

}  // namespace idmorph
