#pragma once

#include <string>
#include <utility>
#include <vector>

#include "idmorph/graph.hpp"
#include "idmorph/ops.hpp"
#include "idmorph/rng.hpp"
#include "idmorph/tensor.hpp"

namespace idmorph {

/// Ordered, named collection of trainable tensors.
template <typename T>
class ParameterSet {
 public:
  using Entry = std::pair<std::string, TensorPtr<T>>;

  void add(std::string name, TensorPtr<T> t) {
    if (t) entries_.emplace_back(std::move(name), std::move(t));
  }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t->numel();
    return n;
  }
  void zero_grad() {
    for (auto& [name, t] : entries_) t->zero_grad();
  }
  void set_requires_grad(bool on) {
    for (auto& [name, t] : entries_) t->set_requires_grad(on);
  }
  std::vector<TensorPtr<T>> tensors() const {
    std::vector<TensorPtr<T>> out;
    for (const auto& [name, t] : entries_) out.push_back(t);
    return out;
  }

 private:
  std::vector<Entry> entries_;
};

/// Named non-trainable state (batch-norm running statistics).
template <typename T>
using BufferList = std::vector<std::pair<std::string, std::vector<T>*>>;

template <typename T>
struct DenseLayer {
  TensorPtr<T> weight;  // [out, in]
  TensorPtr<T> bias;    // [out]

  /// Uniform(-1/sqrt(in), 1/sqrt(in)) for weight and bias.
  static DenseLayer init(std::size_t in, std::size_t out, Rng& rng);

  std::size_t in() const { return weight->dim(1); }
  std::size_t out() const { return weight->dim(0); }
  TensorPtr<T> operator()(Graph<T>& g, const TensorPtr<T>& x) const { return dense(g, x, weight, bias); }
  void collect(const std::string& prefix, ParameterSet<T>& set) const {
    set.add(prefix + ".weight", weight);
    set.add(prefix + ".bias", bias);
  }
};

/// Convolution (or transposed convolution) with bias, N(0, 0.02) weights.
template <typename T>
struct ConvLayer {
  TensorPtr<T> weight;
  TensorPtr<T> bias;
  std::size_t stride = 1;
  std::size_t pad = 0;
  bool transposed = false;

  static ConvLayer init(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride,
                        std::size_t pad, bool transposed, Rng& rng);

  TensorPtr<T> operator()(Graph<T>& g, const TensorPtr<T>& x) const {
    return transposed ? conv_transpose2d(g, x, weight, bias, stride, pad)
                      : conv2d(g, x, weight, bias, stride, pad);
  }
  void collect(const std::string& prefix, ParameterSet<T>& set) const {
    set.add(prefix + ".weight", weight);
    set.add(prefix + ".bias", bias);
  }
};

}  // namespace idmorph
