#pragma once

#include <functional>
#include <string>
#include <vector>

#include "idmorph/graph.hpp"
#include "idmorph/rng.hpp"

namespace idmorph {

/// Builds a scalar loss from tensors captured by the closure.
using LossFn = std::function<TensorPtr<double>(Graph<double>&)>;

struct GradCheckOptions {
  double eps = 1e-6;
  /// A coordinate failing at `eps` is re-measured with each of these steps
  /// and the smallest error kept. Guards against difference quotients that
  /// straddle a relu kink (large steps) or drown in round-off (small steps).
  std::vector<double> fallback_eps;
  /// Check at most this many coordinates per input (0 = all), chosen by `seed`.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

/// Compares backward() against central differences over every coordinate of
/// `inputs`. Returns max |a - n| / max(|a|, |n|, 1e-8).
double grad_check(const LossFn& loss, const std::vector<TensorPtr<double>>& inputs, const GradCheckOptions& opt = {});

constexpr double kGradTolerance = 1e-4;

struct GradCase {
  std::string name;
  /// Builds a random instance from `rng` and returns its grad_check error.
  std::function<double(Rng&)> run;
};

/// Every registered differentiable operation and composite network.
const std::vector<GradCase>& gradcheck_suite();

struct GradCaseResult {
  std::string name;
  double max_error = 0;
  std::size_t instances = 0;
  double seconds = 0;
};

/// Runs each case on `instances` random instances seeded from `seed`.
std::vector<GradCaseResult> run_gradcheck_suite(std::size_t instances, std::uint64_t seed,
                                                const std::string& filter = {});

}  // namespace idmorph
