#include "idmorph/aim.hpp"

#include <algorithm>

namespace idmorph {

template <typename T>
Mlp2<T> Mlp2<T>::init(std::size_t in, std::size_t width, std::size_t out, bool sigmoid_output, Rng& rng) {
  return {DenseLayer<T>::init(in, width, rng), DenseLayer<T>::init(width, out, rng), sigmoid_output};
}

template <typename T>
TensorPtr<T> Mlp2<T>::operator()(Graph<T>& g, const TensorPtr<T>& x) const {
  auto h = pointwise(g, hidden(g, x), Unary::leaky_relu);
  auto y = output(g, h);
  return sigmoid_output ? pointwise(g, y, Unary::sigmoid) : y;
}

template <typename T>
AimParams<T> AimParams<T>::init(std::size_t channels, std::size_t id_dim, Rng& rng) {
  AimParams p{Mlp2<T>::init(channels, id_dim, id_dim, true, rng), Mlp2<T>::init(id_dim, id_dim, channels, false, rng),
              Mlp2<T>::init(id_dim, id_dim, channels, false, rng), BatchNormStats<T>(channels)};
  auto gb = p.gamma.output.bias->data();
  std::fill(gb.begin(), gb.end(), T(1));
  auto bb = p.beta.output.bias->data();
  std::fill(bb.begin(), bb.end(), T(0));
  return p;
}

template <typename T>
void AimParams<T>::validate() const {
  if (tau.hidden.in() != channels()) {
    throw DimensionError("AIM: tau consumes " + std::to_string(tau.hidden.in()) + " channels, modulating " +
                         std::to_string(channels()));
  }
  if (gamma.hidden.in() != id_dim() || beta.hidden.in() != id_dim()) {
    throw DimensionError("AIM: gamma/beta input width must equal the identity feature size");
  }
  if (beta.output.out() != channels()) throw DimensionError("AIM: beta output width must equal channel count");
  if (!tau.sigmoid_output) throw DimensionError("AIM: tau must end in a sigmoid");
  if (!(stats.eps > 0)) throw NumericError("AIM: eps must be positive");
}

template <typename T>
void AimParams<T>::collect(const std::string& prefix, ParameterSet<T>& set) const {
  tau.collect(prefix + ".tau", set);
  gamma.collect(prefix + ".gamma", set);
  beta.collect(prefix + ".beta", set);
}

template <typename T>
void AimParams<T>::buffers(const std::string& prefix, BufferList<T>& out) {
  out.emplace_back(prefix + ".running_mean", &stats.running_mean);
  out.emplace_back(prefix + ".running_var", &stats.running_var);
}

template <typename T>
TensorPtr<T> channel_attention(Graph<T>& g, const TensorPtr<T>& b, const AimParams<T>& params) {
  return params.tau(g, spatial_mean(g, b));
}

template <typename T>
TensorPtr<T> aim_forward(Graph<T>& g, const TensorPtr<T>& b, const TensorPtr<T>& f_id, AimParams<T>& params,
                         Mode mode) {
  params.validate();
  if (b->rank() != 4 || b->dim(1) != params.channels()) {
    throw DimensionError("AIM: feature map " + shape_str(b->shape()) + " does not have " +
                         std::to_string(params.channels()) + " channels");
  }
  if (f_id->rank() != 2 || f_id->dim(0) != b->dim(0) || f_id->dim(1) != params.id_dim()) {
    throw DimensionError("AIM: identity feature " + shape_str(f_id->shape()) + " does not match batch " +
                         std::to_string(b->dim(0)) + " x " + std::to_string(params.id_dim()));
  }
  auto normalized = batch_normalize(g, b, params.stats, mode);
  auto att = channel_attention(g, b, params);
  auto attended = mul(g, f_id, att);
  auto gamma = params.gamma(g, attended);
  auto beta = params.beta(g, attended);
  return add(g, mul(g, normalized, gamma), beta);
}

#define IDMORPH_INSTANTIATE(T)                                                                              \
  template struct Mlp2<T>;                                                                                  \
  template struct AimParams<T>;                                                                             \
  template TensorPtr<T> channel_attention(Graph<T>&, const TensorPtr<T>&, const AimParams<T>&);             \
  template TensorPtr<T> aim_forward(Graph<T>&, const TensorPtr<T>&, const TensorPtr<T>&, AimParams<T>&, Mode);

IDMORPH_INSTANTIATE(float)
IDMORPH_INSTANTIATE(double)

}  // namespace idmorph
