#pragma once

#include <cstddef>
#include <vector>

#include "idmorph/graph.hpp"
#include "idmorph/rng.hpp"
#include "idmorph/tensor.hpp"

// Constrained nonalignment connection: each decoder location attends over a
// (2r+1)x(2r+1) neighborhood of a same-resolution encoder map.

namespace idmorph {

template <typename T>
struct CncParams {
  TensorPtr<T> wq;  // [Ch, Cy, 1, 1]
  TensorPtr<T> wk;  // [Ch, Cx, 1, 1]
  TensorPtr<T> wv;  // [Ch, Cx, 1, 1]
  std::size_t radius = 1;
  /// Multiply logits by 1/sqrt(Ch). Off by default: logits are raw dot products.
  bool scale_logits = false;

  /// Bias-free projections drawn uniformly from [-0.05, 0.05].
  static CncParams init(std::size_t cx, std::size_t cy, std::size_t hidden, std::size_t radius, Rng& rng);

  std::size_t hidden() const { return wq->dim(0); }
  void validate() const;
};

template <typename T>
struct Qkv {
  TensorPtr<T> q, k, v;
};

template <typename T>
Qkv<T> project_qkv(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& y, const CncParams<T>& params);

/// In-bounds features of the window centered at (row, col) of batch item
/// `batch`. `features` is [Ch, valid] in window scan order; `mask` has one
/// entry per window cell, true where the cell lies inside the map.
template <typename T>
struct Window {
  Tensor<T> features;
  std::vector<bool> mask;
};

template <typename T>
Window<T> window_gather(const Tensor<T>& keys, std::size_t row, std::size_t col, std::size_t radius,
                        std::size_t batch = 0);

/// Per-location attention weights, [N, H*W, side*side], zero where masked.
template <typename T>
struct AttentionMap {
  std::size_t n = 0, h = 0, w = 0, side = 0;
  std::vector<T> weights;
  std::vector<bool> mask;

  T at(std::size_t b, std::size_t p, std::size_t cell) const {
    return weights[(b * h * w + p) * side * side + cell];
  }
};

template <typename T>
AttentionMap<T> attention_map(const Tensor<T>& q, const Tensor<T>& k, std::size_t radius,
                              bool scale_logits = false);

/// Masked windowed attention, Z_p = sum_i softmax(Q_p . K_i) V_i over the
/// valid cells of the window at p. Q, K, V are [N,Ch,H,W].
template <typename T>
TensorPtr<T> windowed_attention(Graph<T>& g, const TensorPtr<T>& q, const TensorPtr<T>& k,
                                const TensorPtr<T>& v, std::size_t radius, bool scale_logits = false);

/// Dense attention over every key location.
template <typename T>
TensorPtr<T> global_attention(Graph<T>& g, const TensorPtr<T>& q, const TensorPtr<T>& k,
                              const TensorPtr<T>& v, bool scale_logits = false);

/// F = [Y, Z] with Z from windowed attention. X is the encoder map (keys and
/// values), Y the decoder map (queries); spatial sizes must match.
template <typename T>
TensorPtr<T> cnc_forward(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& y, const CncParams<T>& params);

/// As cnc_forward, attending over the entire key map.
template <typename T>
TensorPtr<T> global_nc_forward(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& y,
                               const CncParams<T>& params);

/// Reference implementation with explicit per-location loops. Small inputs only.
template <typename T>
Tensor<T> cnc_oracle(const Tensor<T>& x, const Tensor<T>& y, const CncParams<T>& params);

}  // namespace idmorph
