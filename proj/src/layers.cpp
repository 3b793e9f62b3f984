#include "idmorph/layers.hpp"

#include <cmath>

namespace idmorph {

template <typename T>
DenseLayer<T> DenseLayer<T>::init(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(double(in));
  std::vector<T> w(out * in), b(out);
  for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
  for (auto& v : b) v = static_cast<T>(rng.uniform(-bound, bound));
  return {parameter<T>({out, in}, std::move(w)), parameter<T>({out}, std::move(b))};
}

template <typename T>
ConvLayer<T> ConvLayer<T>::init(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride,
                                std::size_t pad, bool transposed, Rng& rng) {
  Shape shape = transposed ? Shape{cin, cout, kernel, kernel} : Shape{cout, cin, kernel, kernel};
  std::vector<T> w(shape_numel(shape));
  for (auto& v : w) v = static_cast<T>(0.02 * rng.normal());
  return {parameter<T>(shape, std::move(w)), parameter<T>({cout}, std::vector<T>(cout, T(0))), stride, pad,
          transposed};
}

template struct DenseLayer<float>;
template struct DenseLayer<double>;
template struct ConvLayer<float>;
template struct ConvLayer<double>;

}  // namespace idmorph
