#include "idmorph/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "blas.hpp"

namespace idmorph {

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](T v) { return std::isfinite(v); });
}

namespace {

using detail::gemm;

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

// How operand b is laid over a: a viewed as [outer, mid, inner], b as [mid].
struct Broadcast {
  std::size_t outer, mid, inner;
};

Broadcast broadcast_plan(const Shape& a, const Shape& b, const char* what) {
  for (std::size_t start = 0; start <= 1; ++start) {
    if (start + b.size() > a.size()) break;
    if (std::equal(b.begin(), b.end(), a.begin() + static_cast<std::ptrdiff_t>(start))) {
      Broadcast p{1, shape_numel(b), 1};
      for (std::size_t i = 0; i < start; ++i) p.outer *= a[i];
      for (std::size_t i = start + b.size(); i < a.size(); ++i) p.inner *= a[i];
      return p;
    }
  }
  throw DimensionError(std::string(what) + ": cannot broadcast " + shape_str(b) + " over " +
                       shape_str(a));
}

// Uninitialized scratch; every user overwrites it completely.
template <typename T>
std::unique_ptr<T[]> scratch(std::size_t n) {
  return std::unique_ptr<T[]>(new T[n]);
}

struct ConvGeom {
  std::size_t n, c, h, w;      // input of the correlation
  std::size_t kh, kw, stride, pad;
  std::size_t ho, wo;          // output of the correlation
  std::size_t cols() const { return n * ho * wo; }
};

// Output columns [lo, hi) whose input column ox*stride + j - pad is in bounds.
struct ValidRange {
  std::size_t lo, hi;
};

inline ValidRange valid_range(std::size_t out, std::size_t in, std::size_t offset, std::size_t stride,
                              std::size_t pad) {
  // index = o*stride + offset - pad must satisfy 0 <= index < in
  std::size_t lo = offset >= pad ? 0 : (pad - offset + stride - 1) / stride;
  std::size_t hi = in + pad > offset ? (in + pad - offset - 1) / stride + 1 : 0;
  lo = std::min(lo, out);
  hi = std::clamp(hi, lo, out);
  return {lo, hi};
}

// cols [c*kh*kw, n*ho*wo]
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::size_t ncols = g.cols();
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      const ValidRange ry = valid_range(g.ho, g.h, i, g.stride, g.pad);
      for (std::size_t j = 0; j < g.kw; ++j) {
        const ValidRange rx = valid_range(g.wo, g.w, j, g.stride, g.pad);
        T* row = cols + ((c * g.kh + i) * g.kw + j) * ncols;
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* src = x + (n * g.c + c) * g.h * g.w;
          T* dst_plane = row + n * plane;
          std::fill(dst_plane, dst_plane + ry.lo * g.wo, T(0));
          for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
            const T* line = src + (oy * g.stride + i - g.pad) * g.w + j - g.pad;
            T* dst = dst_plane + oy * g.wo;
            std::fill(dst, dst + rx.lo, T(0));
            for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) dst[ox] = line[ox * g.stride];
            std::fill(dst + rx.hi, dst + g.wo, T(0));
          }
          std::fill(dst_plane + ry.hi * g.wo, dst_plane + plane, T(0));
        }
      }
    }
  }
}

// Scatter-add of cols back onto x (adjoint of im2col).
template <typename T>
void col2im(const T* cols, const ConvGeom& g, T* x) {
  const std::size_t ncols = g.cols();
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      const ValidRange ry = valid_range(g.ho, g.h, i, g.stride, g.pad);
      for (std::size_t j = 0; j < g.kw; ++j) {
        const ValidRange rx = valid_range(g.wo, g.w, j, g.stride, g.pad);
        const T* row = cols + ((c * g.kh + i) * g.kw + j) * ncols;
        for (std::size_t n = 0; n < g.n; ++n) {
          T* dst_plane = x + (n * g.c + c) * g.h * g.w;
          for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
            T* line = dst_plane + (oy * g.stride + i - g.pad) * g.w + j - g.pad;
            const T* src = row + n * plane + oy * g.wo;
            for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) line[ox * g.stride] += src[ox];
          }
        }
      }
    }
  }
}

// [N,C,P] <-> [C,N*P]
template <typename T>
void nchw_to_cmajor(const T* x, std::size_t n, std::size_t c, std::size_t p, T* out) {
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      std::copy_n(x + (b * c + ch) * p, p, out + ch * n * p + b * p);
}

template <typename T>
void cmajor_to_nchw_add(const T* m, std::size_t n, std::size_t c, std::size_t p, T* out) {
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* src = m + ch * n * p + b * p;
      T* dst = out + (b * c + ch) * p;
      for (std::size_t i = 0; i < p; ++i) dst[i] += src[i];
    }
}

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                     const char* axis) {
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  std::size_t padded = in + 2 * pad;
  if (padded < k || (padded - k) % stride != 0) {
    throw DimensionError(std::string("conv2d: non-integral output ") + axis + " for input " +
                         std::to_string(in) + ", kernel " + std::to_string(k) + ", stride " +
                         std::to_string(stride) + ", pad " + std::to_string(pad));
  }
  return (padded - k) / stride + 1;
}

}  // namespace

template <typename T>
TensorPtr<T> detach(const TensorPtr<T>& x) {
  return tensor_new<T>(x->shape(), x->vec());
}

template <typename T>
TensorPtr<T> matmul(Graph<T>& g, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  require_rank(*a, 2, "matmul");
  require_rank(*b, 2, "matmul");
  const std::size_t m = a->dim(0), k = a->dim(1), n = b->dim(1);
  if (b->dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ: " + shape_str(a->shape()) + " x " +
                         shape_str(b->shape()));
  }
  auto c = tensor_new<T>({m, n});
  gemm<T>(false, false, int(m), int(n), int(k), a->ptr(), b->ptr(), c->ptr());
  if (g.wants({a.get(), b.get()})) {
    auto* A = a.get();
    auto* B = b.get();
    auto* C = c.get();
    g.record("matmul", {a, b}, c, [=] {
      if (A->requires_grad())
        gemm<T>(false, true, int(m), int(k), int(n), C->grad().data(), B->ptr(),
                A->ensure_grad().data(), T(1));
      if (B->requires_grad())
        gemm<T>(true, false, int(k), int(n), int(m), A->ptr(), C->grad().data(),
                B->ensure_grad().data(), T(1));
    });
  }
  return c;
}

template <typename T>
TensorPtr<T> dense(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& weight,
                   const TensorPtr<T>& bias) {
  require_rank(*x, 2, "dense input");
  require_rank(*weight, 2, "dense weight");
  const std::size_t n = x->dim(0), in = x->dim(1), out = weight->dim(0);
  if (weight->dim(1) != in) {
    throw DimensionError("dense: input " + shape_str(x->shape()) + " vs weight " +
                         shape_str(weight->shape()));
  }
  if (bias && bias->numel() != out) throw DimensionError("dense: bias length mismatch");
  auto y = tensor_new<T>({n, out});
  gemm<T>(false, true, int(n), int(out), int(in), x->ptr(), weight->ptr(), y->ptr());
  if (bias) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < out; ++o) (*y)[i * out + o] += (*bias)[o];
  }
  if (g.wants({x.get(), weight.get(), bias.get()})) {
    auto *X = x.get(), *W = weight.get(), *B = bias.get(), *Y = y.get();
    g.record("dense", {x, weight, bias}, y, [=] {
      const T* dy = Y->grad().data();
      if (X->requires_grad())
        gemm<T>(false, false, int(n), int(in), int(out), dy, W->ptr(), X->ensure_grad().data(), T(1));
      if (W->requires_grad())
        gemm<T>(true, false, int(out), int(in), int(n), dy, X->ptr(), W->ensure_grad().data(), T(1));
      if (B && B->requires_grad()) {
        auto db = B->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t o = 0; o < out; ++o) db[o] += dy[i * out + o];
      }
    });
  }
  return y;
}

template <typename T>
TensorPtr<T> conv2d(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& weight,
                    const TensorPtr<T>& bias, std::size_t stride, std::size_t pad) {
  require_rank(*x, 4, "conv2d input");
  require_rank(*weight, 4, "conv2d weight");
  if (weight->dim(1) != x->dim(1)) {
    throw DimensionError("conv2d: input channels " + shape_str(x->shape()) + " vs weight " +
                         shape_str(weight->shape()));
  }
  const std::size_t cout = weight->dim(0);
  if (bias && bias->numel() != cout) throw DimensionError("conv2d: bias length mismatch");
  ConvGeom geo{x->dim(0), x->dim(1), x->dim(2), x->dim(3), weight->dim(2), weight->dim(3), stride, pad, 0, 0};
  geo.ho = conv_out(geo.h, geo.kh, stride, pad, "height");
  geo.wo = conv_out(geo.w, geo.kw, stride, pad, "width");
  const std::size_t krows = geo.c * geo.kh * geo.kw;
  const std::size_t ncols = geo.cols();
  const std::size_t plane = geo.ho * geo.wo;

  std::shared_ptr<T[]> cols = scratch<T>(krows * ncols);
  im2col(x->ptr(), geo, cols.get());
  auto out = scratch<T>(cout * ncols);
  gemm<T>(false, false, int(cout), int(ncols), int(krows), weight->ptr(), cols.get(), out.get());

  auto y = tensor_new<T>({geo.n, cout, geo.ho, geo.wo});
  cmajor_to_nchw_add(out.get(), geo.n, cout, plane, y->ptr());
  if (bias) {
    for (std::size_t n = 0; n < geo.n; ++n)
      for (std::size_t c = 0; c < cout; ++c) {
        T* dst = y->ptr() + (n * cout + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] += (*bias)[c];
      }
  }
  if (g.wants({x.get(), weight.get(), bias.get()})) {
    auto *X = x.get(), *W = weight.get(), *B = bias.get(), *Y = y.get();
    g.record("conv2d", {x, weight, bias}, y, [=] {
      auto dy = scratch<T>(cout * ncols);
      nchw_to_cmajor(Y->grad().data(), geo.n, cout, plane, dy.get());
      if (W->requires_grad())
        gemm<T>(false, true, int(cout), int(krows), int(ncols), dy.get(), cols.get(),
                W->ensure_grad().data(), T(1));
      if (B && B->requires_grad()) {
        auto db = B->ensure_grad();
        for (std::size_t c = 0; c < cout; ++c) {
          T acc = 0;
          for (std::size_t i = 0; i < ncols; ++i) acc += dy[c * ncols + i];
          db[c] += acc;
        }
      }
      if (X->requires_grad()) {
        auto dcols = scratch<T>(krows * ncols);
        gemm<T>(true, false, int(krows), int(ncols), int(cout), W->ptr(), dy.get(), dcols.get());
        col2im(dcols.get(), geo, X->ensure_grad().data());
      }
    });
  }
  return y;
}

template <typename T>
TensorPtr<T> conv_transpose2d(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& weight,
                              const TensorPtr<T>& bias, std::size_t stride, std::size_t pad) {
  require_rank(*x, 4, "conv_transpose2d input");
  require_rank(*weight, 4, "conv_transpose2d weight");
  if (weight->dim(0) != x->dim(1)) {
    throw DimensionError("conv_transpose2d: input channels " + shape_str(x->shape()) +
                         " vs weight " + shape_str(weight->shape()));
  }
  if (stride == 0) throw DimensionError("conv_transpose2d: stride must be positive");
  const std::size_t n = x->dim(0), cin = x->dim(1), h = x->dim(2), w = x->dim(3);
  const std::size_t cout = weight->dim(1), kh = weight->dim(2), kw = weight->dim(3);
  if (bias && bias->numel() != cout) throw DimensionError("conv_transpose2d: bias length mismatch");
  const auto full_h = static_cast<std::ptrdiff_t>((h - 1) * stride + kh);
  const auto full_w = static_cast<std::ptrdiff_t>((w - 1) * stride + kw);
  const auto trim = static_cast<std::ptrdiff_t>(2 * pad);
  if (full_h - trim < 1 || full_w - trim < 1) {
    throw DimensionError("conv_transpose2d: padding " + std::to_string(pad) +
                         " leaves no output for input " + shape_str(x->shape()));
  }
  // Geometry of the correlation whose adjoint this op is: input = our output.
  ConvGeom geo{n, cout, std::size_t(full_h - trim), std::size_t(full_w - trim), kh, kw, stride, pad, h, w};
  const std::size_t krows = cout * kh * kw;
  const std::size_t ncols = geo.cols();
  const std::size_t plane = h * w;

  auto xm = std::make_shared<std::vector<T>>(cin * ncols);
  nchw_to_cmajor(x->ptr(), n, cin, plane, xm->data());
  auto cols = scratch<T>(krows * ncols);
  gemm<T>(true, false, int(krows), int(ncols), int(cin), weight->ptr(), xm->data(), cols.get());
  auto y = tensor_new<T>({n, cout, geo.h, geo.w});
  col2im(cols.get(), geo, y->ptr());
  const std::size_t oplane = geo.h * geo.w;
  if (bias) {
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t c = 0; c < cout; ++c) {
        T* dst = y->ptr() + (b * cout + c) * oplane;
        for (std::size_t i = 0; i < oplane; ++i) dst[i] += (*bias)[c];
      }
  }
  if (g.wants({x.get(), weight.get(), bias.get()})) {
    auto *X = x.get(), *W = weight.get(), *B = bias.get(), *Y = y.get();
    g.record("conv_transpose2d", {x, weight, bias}, y, [=] {
      auto dcols = scratch<T>(krows * ncols);
      im2col(Y->grad().data(), geo, dcols.get());
      if (X->requires_grad()) {
        auto dxm = scratch<T>(cin * ncols);
        gemm<T>(false, false, int(cin), int(ncols), int(krows), W->ptr(), dcols.get(), dxm.get());
        cmajor_to_nchw_add(dxm.get(), n, cin, plane, X->ensure_grad().data());
      }
      if (W->requires_grad())
        gemm<T>(false, true, int(cin), int(krows), int(ncols), xm->data(), dcols.get(),
                W->ensure_grad().data(), T(1));
      if (B && B->requires_grad()) {
        auto db = B->ensure_grad();
        auto dy = Y->grad();
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t c = 0; c < cout; ++c) {
            T acc = 0;
            const T* src = dy.data() + (b * cout + c) * oplane;
            for (std::size_t i = 0; i < oplane; ++i) acc += src[i];
            db[c] += acc;
          }
      }
    });
  }
  return y;
}

template <typename T>
TensorPtr<T> softmax_lastdim(Graph<T>& g, const TensorPtr<T>& x) {
  if (x->rank() == 0) throw DimensionError("softmax_lastdim: rank-0 tensor");
  const std::size_t last = x->shape().back();
  const std::size_t rows = x->numel() / last;
  auto y = tensor_new<T>(x->shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x->ptr() + r * last;
    T* out = y->ptr() + r * last;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < last; ++i) {
      if (std::isnan(in[i])) throw NumericError("softmax_lastdim: NaN input");
      mx = std::max(mx, in[i]);
    }
    T total = 0;
    for (std::size_t i = 0; i < last; ++i) total += (out[i] = std::exp(in[i] - mx));
    for (std::size_t i = 0; i < last; ++i) out[i] /= total;
  }
  if (g.wants({x.get()})) {
    auto *X = x.get(), *Y = y.get();
    g.record("softmax_lastdim", {x}, y, [=] {
      auto dx = X->ensure_grad();
      auto dy = Y->grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* yr = Y->ptr() + r * last;
        const T* gr = dy.data() + r * last;
        T dot = 0;
        for (std::size_t i = 0; i < last; ++i) dot += yr[i] * gr[i];
        for (std::size_t i = 0; i < last; ++i) dx[r * last + i] += yr[i] * (gr[i] - dot);
      }
    });
  }
  return y;
}

template <typename T>
TensorPtr<T> pointwise(Graph<T>& g, const TensorPtr<T>& x, Unary kind) {
  auto y = tensor_new<T>(x->shape());
  const std::size_t n = x->numel();
  const T* in = x->ptr();
  T* out = y->ptr();
  const T slope = T(kLeakySlope);
  switch (kind) {
    case Unary::relu:
      for (std::size_t i = 0; i < n; ++i) out[i] = in[i] > 0 ? in[i] : T(0);
      break;
    case Unary::leaky_relu:
      for (std::size_t i = 0; i < n; ++i) out[i] = in[i] > 0 ? in[i] : slope * in[i];
      break;
    case Unary::sigmoid:
      for (std::size_t i = 0; i < n; ++i) {
        // split by sign so exp never overflows
        if (in[i] >= 0) {
          out[i] = T(1) / (T(1) + std::exp(-in[i]));
        } else {
          T e = std::exp(in[i]);
          out[i] = e / (T(1) + e);
        }
      }
      break;
    case Unary::tanh:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(in[i]);
      break;
  }
  if (g.wants({x.get()})) {
    auto *X = x.get(), *Y = y.get();
    g.record("pointwise", {x}, y, [=] {
      auto dx = X->ensure_grad();
      auto dy = Y->grad();
      const T* xi = X->ptr();
      const T* yi = Y->ptr();
      switch (kind) {
        case Unary::relu:
          for (std::size_t i = 0; i < n; ++i) dx[i] += xi[i] > 0 ? dy[i] : T(0);
          break;
        case Unary::leaky_relu:
          for (std::size_t i = 0; i < n; ++i) dx[i] += xi[i] > 0 ? dy[i] : slope * dy[i];
          break;
        case Unary::sigmoid:
          for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i] * yi[i] * (T(1) - yi[i]);
          break;
        case Unary::tanh:
          for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i] * (T(1) - yi[i] * yi[i]);
          break;
      }
    });
  }
  return y;
}

namespace {

template <typename T, bool Multiply>
TensorPtr<T> binary(Graph<T>& g, const TensorPtr<T>& a, const TensorPtr<T>& b, const char* name) {
  const Broadcast p = broadcast_plan(a->shape(), b->shape(), name);
  auto y = tensor_new<T>(a->shape());
  const T* av = a->ptr();
  const T* bv = b->ptr();
  T* yv = y->ptr();
  for (std::size_t o = 0; o < p.outer; ++o)
    for (std::size_t m = 0; m < p.mid; ++m) {
      const std::size_t base = (o * p.mid + m) * p.inner;
      for (std::size_t i = 0; i < p.inner; ++i) {
        if constexpr (Multiply) {
          yv[base + i] = av[base + i] * bv[m];
        } else {
          yv[base + i] = av[base + i] + bv[m];
        }
      }
    }
  if (g.wants({a.get(), b.get()})) {
    auto *A = a.get(), *B = b.get(), *Y = y.get();
    g.record(name, {a, b}, y, [=] {
      auto dy = Y->grad();
      if (A->requires_grad()) {
        auto da = A->ensure_grad();
        for (std::size_t o = 0; o < p.outer; ++o)
          for (std::size_t m = 0; m < p.mid; ++m) {
            const std::size_t base = (o * p.mid + m) * p.inner;
            const T factor = Multiply ? B->ptr()[m] : T(1);
            for (std::size_t i = 0; i < p.inner; ++i) da[base + i] += dy[base + i] * factor;
          }
      }
      if (B->requires_grad()) {
        auto db = B->ensure_grad();
        for (std::size_t o = 0; o < p.outer; ++o)
          for (std::size_t m = 0; m < p.mid; ++m) {
            const std::size_t base = (o * p.mid + m) * p.inner;
            T acc = 0;
            for (std::size_t i = 0; i < p.inner; ++i)
              acc += Multiply ? dy[base + i] * A->ptr()[base + i] : dy[base + i];
            db[m] += acc;
          }
      }
    });
  }
  return y;
}

}  // namespace

template <typename T>
TensorPtr<T> add(Graph<T>& g, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  return binary<T, false>(g, a, b, "add");
}

template <typename T>
TensorPtr<T> mul(Graph<T>& g, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  return binary<T, true>(g, a, b, "mul");
}

template <typename T>
TensorPtr<T> scale(Graph<T>& g, const TensorPtr<T>& x, T factor) {
  auto y = tensor_new<T>(x->shape());
  for (std::size_t i = 0; i < x->numel(); ++i) (*y)[i] = (*x)[i] * factor;
  if (g.wants({x.get()})) {
    auto *X = x.get(), *Y = y.get();
    g.record("scale", {x}, y, [=] {
      auto dx = X->ensure_grad();
      auto dy = Y->grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * factor;
    });
  }
  return y;
}

template <typename T>
TensorPtr<T> concat_channels(Graph<T>& g, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (!b) return a;
  require_rank(*a, 4, "concat_channels");
  require_rank(*b, 4, "concat_channels");
  if (a->dim(0) != b->dim(0) || a->dim(2) != b->dim(2) || a->dim(3) != b->dim(3)) {
    throw DimensionError("concat_channels: " + shape_str(a->shape()) + " vs " + shape_str(b->shape()));
  }
  const std::size_t n = a->dim(0), ca = a->dim(1), cb = b->dim(1);
  const std::size_t plane = a->dim(2) * a->dim(3);
  auto y = tensor_new<T>({n, ca + cb, a->dim(2), a->dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a->ptr() + i * ca * plane, ca * plane, y->ptr() + i * (ca + cb) * plane);
    std::copy_n(b->ptr() + i * cb * plane, cb * plane, y->ptr() + (i * (ca + cb) + ca) * plane);
  }
  if (g.wants({a.get(), b.get()})) {
    auto *A = a.get(), *B = b.get(), *Y = y.get();
    g.record("concat_channels", {a, b}, y, [=] {
      auto dy = Y->grad();
      for (std::size_t i = 0; i < n; ++i) {
        const T* src = dy.data() + i * (ca + cb) * plane;
        if (A->requires_grad()) {
          T* da = A->ensure_grad().data() + i * ca * plane;
          for (std::size_t k = 0; k < ca * plane; ++k) da[k] += src[k];
        }
        if (B->requires_grad()) {
          T* db = B->ensure_grad().data() + i * cb * plane;
          for (std::size_t k = 0; k < cb * plane; ++k) db[k] += src[ca * plane + k];
        }
      }
    });
  }
  return y;
}

template <typename T>
TensorPtr<T> concat_features(Graph<T>& g, const std::vector<TensorPtr<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_features: no operands");
  const std::size_t n = parts.front()->dim(0);
  std::size_t width = 0;
  for (const auto& p : parts) {
    require_rank(*p, 2, "concat_features");
    if (p->dim(0) != n) throw DimensionError("concat_features: batch size mismatch");
    width += p->dim(1);
  }
  auto y = tensor_new<T>({n, width});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p->dim(1);
    for (std::size_t i = 0; i < n; ++i) std::copy_n(p->ptr() + i * w, w, y->ptr() + i * width + offset);
    offset += w;
  }
  bool any = false;
  for (const auto& p : parts) any = any || g.wants({p.get()});
  if (any) {
    auto* Y = y.get();
    g.record("concat_features", parts, y, [=] {
      auto dy = Y->grad();
      std::size_t off = 0;
      for (const auto& p : parts) {
        const std::size_t w = p->dim(1);
        if (p->requires_grad()) {
          auto dp = p->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < w; ++k) dp[i * w + k] += dy[i * width + off + k];
        }
        off += w;
      }
    });
  }
  return y;
}

template <typename T>
TensorPtr<T> spatial_mean(Graph<T>& g, const TensorPtr<T>& x) {
  require_rank(*x, 4, "spatial_mean");
  const std::size_t n = x->dim(0), c = x->dim(1), plane = x->dim(2) * x->dim(3);
  auto y = tensor_new<T>({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    T acc = 0;
    const T* src = x->ptr() + i * plane;
    for (std::size_t k = 0; k < plane; ++k) acc += src[k];
    (*y)[i] = acc / T(plane);
  }
  if (g.wants({x.get()})) {
    auto *X = x.get(), *Y = y.get();
    g.record("spatial_mean", {x}, y, [=] {
      auto dx = X->ensure_grad();
      auto dy = Y->grad();
      for (std::size_t i = 0; i < n * c; ++i) {
        const T share = dy[i] / T(plane);
        for (std::size_t k = 0; k < plane; ++k) dx[i * plane + k] += share;
      }
    });
  }
  return y;
}

template <typename T>
TensorPtr<T> cross_entropy_logits(Graph<T>& g, const TensorPtr<T>& logits,
                                  const std::vector<std::size_t>& target) {
  require_rank(*logits, 2, "cross_entropy_logits");
  const std::size_t n = logits->dim(0), k = logits->dim(1);
  if (target.size() != n) {
    throw DimensionError("cross_entropy_logits: " + std::to_string(target.size()) +
                         " targets for " + std::to_string(n) + " rows");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (target[i] >= k) {
      throw LabelError("cross_entropy_logits: target " + std::to_string(target[i]) +
                       " out of range for " + std::to_string(k) + " classes (row " +
                       std::to_string(i) + ")");
    }
  }
  auto probs = std::make_shared<std::vector<T>>(n * k);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits->ptr() + i * k;
    T mx = *std::max_element(row, row + k);
    T z = 0;
    for (std::size_t j = 0; j < k; ++j) z += ((*probs)[i * k + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] /= z;
    total += (mx + std::log(z)) - row[target[i]];
  }
  auto loss = tensor_new<T>({1}, total / T(n));
  if (g.wants({logits.get()})) {
    auto *L = logits.get(), *Y = loss.get();
    g.record("cross_entropy_logits", {logits}, loss, [=] {
      auto dl = L->ensure_grad();
      const T share = Y->grad()[0] / T(n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j)
          dl[i * k + j] += share * ((*probs)[i * k + j] - (j == target[i] ? T(1) : T(0)));
    });
  }
  return loss;
}

template <typename T>
TensorPtr<T> sum(Graph<T>& g, const TensorPtr<T>& x) {
  T acc = 0;
  for (T v : x->data()) acc += v;
  auto y = tensor_new<T>({1}, acc);
  if (g.wants({x.get()})) {
    auto *X = x.get(), *Y = y.get();
    g.record("sum", {x}, y, [=] {
      auto dx = X->ensure_grad();
      const T d = Y->grad()[0];
      for (auto& v : dx) v += d;
    });
  }
  return y;
}

template <typename T>
TensorPtr<T> reshape(Graph<T>& g, const TensorPtr<T>& x, Shape shape) {
  auto y = tensor_new<T>(x->shape(), x->vec());
  y->reshape(std::move(shape));
  if (g.wants({x.get()})) {
    auto *X = x.get(), *Y = y.get();
    g.record("reshape", {x}, y, [=] {
      auto dx = X->ensure_grad();
      auto dy = Y->grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
    });
  }
  return y;
}

template <typename T>
TensorPtr<T> batch_norm(Graph<T>& g, const TensorPtr<T>& x, BatchNormStats<T>& stats, Mode mode) {
  if (x->rank() < 2) throw DimensionError("batch_norm: expected [N,C,...], got " + shape_str(x->shape()));
  const std::size_t n = x->dim(0), c = x->dim(1);
  const std::size_t inner = x->numel() / (n * c);
  if (stats.running_mean.size() != c || stats.running_var.size() != c) {
    throw DimensionError("batch_norm: statistics sized for " + std::to_string(stats.running_mean.size()) +
                         " channels, input has " + std::to_string(c));
  }
  if (!(stats.eps > 0)) throw NumericError("batch_norm: eps must be positive");
  if (mode == Mode::train && n < 2) {
    throw BatchSizeError("batch_norm: train mode needs at least 2 samples, got " + std::to_string(n));
  }
  auto invstd = std::make_shared<std::vector<T>>(c);
  std::vector<T> mean(c);
  const std::size_t count = n * inner;
  for (std::size_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (mode == Mode::train) {
      T acc = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* src = x->ptr() + (b * c + ch) * inner;
        for (std::size_t k = 0; k < inner; ++k) acc += src[k];
      }
      mu = acc / T(count);
      T sq = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* src = x->ptr() + (b * c + ch) * inner;
        for (std::size_t k = 0; k < inner; ++k) sq += (src[k] - mu) * (src[k] - mu);
      }
      var = sq / T(count);
      stats.running_mean[ch] = (T(1) - stats.momentum) * stats.running_mean[ch] + stats.momentum * mu;
      stats.running_var[ch] = (T(1) - stats.momentum) * stats.running_var[ch] +
                              stats.momentum * (sq / T(count - 1));
    } else {
      mu = stats.running_mean[ch];
      var = stats.running_var[ch];
    }
    mean[ch] = mu;
    (*invstd)[ch] = T(1) / std::sqrt(var + stats.eps);
  }
  auto y = tensor_new<T>(x->shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* src = x->ptr() + (b * c + ch) * inner;
      T* dst = y->ptr() + (b * c + ch) * inner;
      for (std::size_t k = 0; k < inner; ++k) dst[k] = (src[k] - mean[ch]) * (*invstd)[ch];
    }
  if (g.wants({x.get()})) {
    auto *X = x.get(), *Y = y.get();
    const bool train = mode == Mode::train;
    g.record("batch_norm", {x}, y, [=] {
      auto dx = X->ensure_grad();
      auto dy = Y->grad();
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T is = (*invstd)[ch];
        T mean_dy = 0, mean_dy_xhat = 0;
        if (train) {
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t base = (b * c + ch) * inner;
            for (std::size_t k = 0; k < inner; ++k) {
              mean_dy += dy[base + k];
              mean_dy_xhat += dy[base + k] * Y->ptr()[base + k];
            }
          }
          mean_dy /= T(count);
          mean_dy_xhat /= T(count);
        }
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t base = (b * c + ch) * inner;
          for (std::size_t k = 0; k < inner; ++k)
            dx[base + k] += is * (dy[base + k] - mean_dy - Y->ptr()[base + k] * mean_dy_xhat);
        }
      }
    });
  }
  return y;
}

#define IDMORPH_INSTANTIATE(T)                                                                     \
  template bool all_finite(const Tensor<T>&);                                                      \
  template TensorPtr<T> detach(const TensorPtr<T>&);                                               \
  template TensorPtr<T> matmul(Graph<T>&, const TensorPtr<T>&, const TensorPtr<T>&);               \
  template TensorPtr<T> dense(Graph<T>&, const TensorPtr<T>&, const TensorPtr<T>&,                 \
                              const TensorPtr<T>&);                                                \
  template TensorPtr<T> conv2d(Graph<T>&, const TensorPtr<T>&, const TensorPtr<T>&,                \
                               const TensorPtr<T>&, std::size_t, std::size_t);                     \
  template TensorPtr<T> conv_transpose2d(Graph<T>&, const TensorPtr<T>&, const TensorPtr<T>&,      \
                                         const TensorPtr<T>&, std::size_t, std::size_t);           \
  template TensorPtr<T> softmax_lastdim(Graph<T>&, const TensorPtr<T>&);                           \
  template TensorPtr<T> pointwise(Graph<T>&, const TensorPtr<T>&, Unary);                          \
  template TensorPtr<T> add(Graph<T>&, const TensorPtr<T>&, const TensorPtr<T>&);                  \
  template TensorPtr<T> mul(Graph<T>&, const TensorPtr<T>&, const TensorPtr<T>&);                  \
  template TensorPtr<T> scale(Graph<T>&, const TensorPtr<T>&, T);                                  \
  template TensorPtr<T> concat_channels(Graph<T>&, const TensorPtr<T>&, const TensorPtr<T>&);      \
  template TensorPtr<T> concat_features(Graph<T>&, const std::vector<TensorPtr<T>>&);              \
  template TensorPtr<T> spatial_mean(Graph<T>&, const TensorPtr<T>&);                              \
  template TensorPtr<T> cross_entropy_logits(Graph<T>&, const TensorPtr<T>&,                       \
                                             const std::vector<std::size_t>&);                     \
  template TensorPtr<T> sum(Graph<T>&, const TensorPtr<T>&);                                       \
  template TensorPtr<T> reshape(Graph<T>&, const TensorPtr<T>&, Shape);                            \
  template TensorPtr<T> batch_norm(Graph<T>&, const TensorPtr<T>&, BatchNormStats<T>&, Mode);

IDMORPH_INSTANTIATE(float)
IDMORPH_INSTANTIATE(double)

}  // namespace idmorph
