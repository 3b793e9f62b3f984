#include "idmorph/adam.hpp"

#include <cmath>

namespace idmorph {

template <typename T>
Adam<T>::Adam(ParameterSet<T> params, AdamConfig config) : params_(std::move(params)), cfg_(config) {
  if (!(cfg_.lr > 0)) throw ConfigError("adam: learning rate must be positive");
  if (!(cfg_.beta1 >= 0 && cfg_.beta1 < 1) || !(cfg_.beta2 >= 0 && cfg_.beta2 < 1)) {
    throw ConfigError("adam: betas must lie in [0, 1)");
  }
  for (const auto& [name, t] : params_.entries()) {
    m_.emplace_back(t->numel(), T(0));
    v_.emplace_back(t->numel(), T(0));
  }
}

template <typename T>
void Adam<T>::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
  const T b1 = T(cfg_.beta1), b2 = T(cfg_.beta2);
  const T step_size = T(cfg_.lr / c1);
  const T inv_c2 = T(1.0 / c2);
  const T eps = T(cfg_.eps);
  const auto& entries = params_.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& p = *entries[i].second;
    auto g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    T* w = p.ptr();
    for (std::size_t j = 0; j < p.numel(); ++j) {
      const T gj = g.empty() ? T(0) : g[j];
      m[j] = b1 * m[j] + (T(1) - b1) * gj;
      v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
      w[j] -= step_size * m[j] / (std::sqrt(v[j] * inv_c2) + eps);
    }
  }
}

template class Adam<float>;
template class Adam<double>;

}  // namespace idmorph
