#pragma once

#include <cstdint>
#include <vector>

#include "idmorph/layers.hpp"

namespace idmorph {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed parameter set.
///
/// m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
/// p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
template <typename T>
class Adam {
 public:
  Adam(ParameterSet<T> params, AdamConfig config);

  /// Applies one update from the current gradient buffers. Tensors whose
  /// gradient was never allocated are treated as having zero gradient.
  void step();

  const ParameterSet<T>& params() const { return params_; }
  const AdamConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return t_; }

  // Moments, exposed for checkpointing.
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  void set_steps(std::uint64_t t) { t_ = t; }

 private:
  ParameterSet<T> params_;
  AdamConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace idmorph
