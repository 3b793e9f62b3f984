#pragma once

#include <cstddef>
#include <vector>

#include "idmorph/graph.hpp"
#include "idmorph/tensor.hpp"

// Differentiable tensor operations. Every op computes its forward result
// eagerly and, when the graph is recording and some input requires a
// gradient, tapes a hand-derived backward closure.

namespace idmorph {

enum class Unary { relu, leaky_relu, sigmoid, tanh };

inline constexpr double kLeakySlope = 0.2;

/// [m,k] x [k,n] -> [m,n]
template <typename T>
TensorPtr<T> matmul(Graph<T>& g, const TensorPtr<T>& a, const TensorPtr<T>& b);

/// x [N,in], weight [out,in], optional bias [out] -> [N,out]
template <typename T>
TensorPtr<T> dense(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& weight,
                   const TensorPtr<T>& bias);

/// Cross-correlation with zero padding. weight is [Cout,Cin,kh,kw];
/// bias may be null.
template <typename T>
TensorPtr<T> conv2d(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& weight,
                    const TensorPtr<T>& bias, std::size_t stride, std::size_t pad);

/// Adjoint of conv2d used as a forward map. weight is [Cin,Cout,kh,kw];
/// output side is (in-1)*stride - 2*pad + k.
template <typename T>
TensorPtr<T> conv_transpose2d(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& weight,
                              const TensorPtr<T>& bias, std::size_t stride, std::size_t pad);

template <typename T>
TensorPtr<T> softmax_lastdim(Graph<T>& g, const TensorPtr<T>& x);

template <typename T>
TensorPtr<T> pointwise(Graph<T>& g, const TensorPtr<T>& x, Unary kind);

/// Elementwise a + b. b is either a's shape or broadcast along a's leading
/// and trailing dims: [C] or [N,C] over [N,C,H,W], [C] over [N,C].
template <typename T>
TensorPtr<T> add(Graph<T>& g, const TensorPtr<T>& a, const TensorPtr<T>& b);

/// Elementwise a * b, same broadcasting rule as add().
template <typename T>
TensorPtr<T> mul(Graph<T>& g, const TensorPtr<T>& a, const TensorPtr<T>& b);

template <typename T>
TensorPtr<T> scale(Graph<T>& g, const TensorPtr<T>& x, T factor);

/// [N,Ca,H,W] ++ [N,Cb,H,W] -> [N,Ca+Cb,H,W]. A null b is an empty operand.
template <typename T>
TensorPtr<T> concat_channels(Graph<T>& g, const TensorPtr<T>& a, const TensorPtr<T>& b);

/// Concatenates rank-2 tensors [N,a] ++ [N,b] along the feature axis.
template <typename T>
TensorPtr<T> concat_features(Graph<T>& g, const std::vector<TensorPtr<T>>& parts);

/// [N,C,H,W] -> [N,C]
template <typename T>
TensorPtr<T> spatial_mean(Graph<T>& g, const TensorPtr<T>& x);

/// Mean over rows of -log softmax(logits)[i, target[i]]. Labels are 0-based.
template <typename T>
TensorPtr<T> cross_entropy_logits(Graph<T>& g, const TensorPtr<T>& logits,
                                  const std::vector<std::size_t>& target);

template <typename T>
TensorPtr<T> sum(Graph<T>& g, const TensorPtr<T>& x);

template <typename T>
TensorPtr<T> reshape(Graph<T>& g, const TensorPtr<T>& x, Shape shape);

/// Per-channel statistics for batch normalization.
template <typename T>
struct BatchNormStats {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  explicit BatchNormStats(std::size_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

enum class Mode { train, eval };

/// Normalizes [N,C,...] per channel without affine re-scale. Train mode uses
/// batch statistics over N*H*W and updates the running buffers; eval mode
/// uses the running buffers.
template <typename T>
TensorPtr<T> batch_norm(Graph<T>& g, const TensorPtr<T>& x, BatchNormStats<T>& stats, Mode mode);

/// Cuts the graph: returns a copy that does not require a gradient.
template <typename T>
TensorPtr<T> detach(const TensorPtr<T>& x);

}  // namespace idmorph
