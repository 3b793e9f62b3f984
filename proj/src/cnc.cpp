#include "idmorph/cnc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "blas.hpp"
#include "idmorph/ops.hpp"

namespace idmorph {

namespace {

using detail::gemm;

void require_map(const Shape& s, const char* what) {
  if (s.size() != 4) throw DimensionError(std::string(what) + ": expected [N,C,H,W], got " + shape_str(s));
}

template <typename T>
void require_same_qkv(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  require_map(q.shape(), "attention query");
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("attention: query " + shape_str(q.shape()) + ", key " + shape_str(k.shape()) +
                         ", value " + shape_str(v.shape()) + " must agree");
  }
}

// [C, P] -> [P, C] for one batch item
template <typename T>
void to_pixel_major(const T* src, std::size_t c, std::size_t p, T* dst) {
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < p; ++i) dst[i * c + ch] = src[ch * p + i];
}

template <typename T>
void add_channel_major(const T* src, std::size_t c, std::size_t p, T* dst) {
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < p; ++i) dst[ch * p + i] += src[i * c + ch];
}

// Valid window cells around (y, x): (cell index, flat key position).
struct Neighborhood {
  std::vector<std::size_t> cell;
  std::vector<std::size_t> pos;
};

Neighborhood neighborhood(std::size_t y, std::size_t x, std::size_t h, std::size_t w, std::size_t r) {
  Neighborhood nb;
  const auto ri = static_cast<std::ptrdiff_t>(r);
  const std::size_t side = 2 * r + 1;
  for (std::ptrdiff_t dy = -ri; dy <= ri; ++dy) {
    const auto yy = static_cast<std::ptrdiff_t>(y) + dy;
    if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
    for (std::ptrdiff_t dx = -ri; dx <= ri; ++dx) {
      const auto xx = static_cast<std::ptrdiff_t>(x) + dx;
      if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
      nb.cell.push_back(static_cast<std::size_t>(dy + ri) * side + static_cast<std::size_t>(dx + ri));
      nb.pos.push_back(static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx));
    }
  }
  return nb;
}

template <typename T>
T logit_scale(bool on, std::size_t hidden) {
  return on ? T(1) / std::sqrt(T(hidden)) : T(1);
}

}  // namespace

template <typename T>
CncParams<T> CncParams<T>::init(std::size_t cx, std::size_t cy, std::size_t hidden, std::size_t radius, Rng& rng) {
  auto draw = [&](std::size_t cin) {
    std::vector<T> w(hidden * cin);
    for (auto& v : w) v = static_cast<T>(rng.uniform(-0.05, 0.05));
    return parameter<T>({hidden, cin, 1, 1}, std::move(w));
  };
  CncParams p;
  p.wq = draw(cy);
  p.wk = draw(cx);
  p.wv = draw(cx);
  p.radius = radius;
  return p;
}

template <typename T>
void CncParams<T>::validate() const {
  if (!wq || !wk || !wv) throw DimensionError("CNC projections are not initialized");
  for (const auto* w : {wq.get(), wk.get(), wv.get()}) {
    if (w->rank() != 4 || w->dim(2) != 1 || w->dim(3) != 1) {
      throw DimensionError("CNC projection must be a 1x1 kernel, got " + shape_str(w->shape()));
    }
  }
  if (wk->dim(0) != wq->dim(0) || wv->dim(0) != wq->dim(0)) {
    throw DimensionError("CNC projections disagree on hidden channels");
  }
  if (wk->dim(1) != wv->dim(1)) throw DimensionError("CNC key/value projections disagree on input channels");
}

template <typename T>
Qkv<T> project_qkv(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& y, const CncParams<T>& params) {
  params.validate();
  require_map(x->shape(), "CNC encoder map");
  require_map(y->shape(), "CNC decoder map");
  if (x->dim(0) != y->dim(0) || x->dim(2) != y->dim(2) || x->dim(3) != y->dim(3)) {
    throw DimensionError("CNC requires equal batch and spatial size: encoder " + shape_str(x->shape()) +
                         ", decoder " + shape_str(y->shape()));
  }
  return {conv2d<T>(g, y, params.wq, nullptr, 1, 0), conv2d<T>(g, x, params.wk, nullptr, 1, 0),
          conv2d<T>(g, x, params.wv, nullptr, 1, 0)};
}

template <typename T>
Window<T> window_gather(const Tensor<T>& keys, std::size_t row, std::size_t col, std::size_t radius,
                        std::size_t batch) {
  require_map(keys.shape(), "window_gather");
  const std::size_t c = keys.dim(1), h = keys.dim(2), w = keys.dim(3);
  if (batch >= keys.dim(0) || row >= h || col >= w) {
    throw IndexError("window_gather: location (" + std::to_string(row) + "," + std::to_string(col) +
                     ") of item " + std::to_string(batch) + " outside " + shape_str(keys.shape()));
  }
  const auto nb = neighborhood(row, col, h, w, radius);
  const std::size_t side = 2 * radius + 1;
  Window<T> out{Tensor<T>({c, nb.pos.size()}), std::vector<bool>(side * side, false)};
  for (auto cell : nb.cell) out.mask[cell] = true;
  const T* base = keys.ptr() + batch * c * h * w;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < nb.pos.size(); ++i) out.features[ch * nb.pos.size() + i] = base[ch * h * w + nb.pos[i]];
  return out;
}

template <typename T>
AttentionMap<T> attention_map(const Tensor<T>& q, const Tensor<T>& k, std::size_t radius, bool scale_logits) {
  require_map(q.shape(), "attention_map");
  if (k.shape() != q.shape()) throw DimensionError("attention_map: query/key shapes differ");
  const std::size_t n = q.dim(0), c = q.dim(1), h = q.dim(2), w = q.dim(3), p = h * w;
  const std::size_t side = 2 * radius + 1, cells = side * side;
  const T s = logit_scale<T>(scale_logits, c);
  AttentionMap<T> map{n, h, w, side, std::vector<T>(n * p * cells, T(0)), std::vector<bool>(n * p * cells, false)};
  for (std::size_t b = 0; b < n; ++b) {
    const T* qb = q.ptr() + b * c * p;
    const T* kb = k.ptr() + b * c * p;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t loc = y * w + x;
        const auto nb = neighborhood(y, x, h, w, radius);
        std::vector<T> logits(nb.pos.size());
        for (std::size_t i = 0; i < nb.pos.size(); ++i) {
          T acc = 0;
          for (std::size_t ch = 0; ch < c; ++ch) acc += qb[ch * p + loc] * kb[ch * p + nb.pos[i]];
          logits[i] = acc * s;
        }
        const T mx = *std::max_element(logits.begin(), logits.end());
        T z = 0;
        for (auto& l : logits) z += (l = std::exp(l - mx));
        T* row = map.weights.data() + (b * p + loc) * cells;
        for (std::size_t i = 0; i < nb.pos.size(); ++i) {
          row[nb.cell[i]] = logits[i] / z;
          map.mask[(b * p + loc) * cells + nb.cell[i]] = true;
        }
      }
  }
  return map;
}

template <typename T>
TensorPtr<T> windowed_attention(Graph<T>& g, const TensorPtr<T>& q, const TensorPtr<T>& k,
                                const TensorPtr<T>& v, std::size_t radius, bool scale_logits) {
  require_same_qkv(*q, *k, *v);
  const std::size_t n = q->dim(0), c = q->dim(1), h = q->dim(2), w = q->dim(3), p = h * w;
  const std::size_t side = 2 * radius + 1, cells = side * side;
  const T s = logit_scale<T>(scale_logits, c);

  // Neighborhoods depend only on geometry; share them across the batch.
  auto hoods = std::make_shared<std::vector<Neighborhood>>();
  hoods->reserve(p);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) hoods->push_back(neighborhood(y, x, h, w, radius));

  auto alpha = std::make_shared<std::vector<T>>(n * p * cells, T(0));
  auto out = tensor_new<T>(q->shape());
  std::vector<T> qt(p * c), kt(p * c), vt(p * c), zt(p * c);
  std::vector<T> logits(cells);
  for (std::size_t b = 0; b < n; ++b) {
    to_pixel_major(q->ptr() + b * c * p, c, p, qt.data());
    to_pixel_major(k->ptr() + b * c * p, c, p, kt.data());
    to_pixel_major(v->ptr() + b * c * p, c, p, vt.data());
    std::fill(zt.begin(), zt.end(), T(0));
    for (std::size_t loc = 0; loc < p; ++loc) {
      const auto& nb = (*hoods)[loc];
      const T* qp = qt.data() + loc * c;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < nb.pos.size(); ++i) {
        const T* kp = kt.data() + nb.pos[i] * c;
        T acc = 0;
        for (std::size_t ch = 0; ch < c; ++ch) acc += qp[ch] * kp[ch];
        logits[i] = acc * s;
        mx = std::max(mx, logits[i]);
      }
      T z = 0;
      for (std::size_t i = 0; i < nb.pos.size(); ++i) z += (logits[i] = std::exp(logits[i] - mx));
      T* arow = alpha->data() + (b * p + loc) * cells;
      T* zp = zt.data() + loc * c;
      for (std::size_t i = 0; i < nb.pos.size(); ++i) {
        const T a = logits[i] / z;
        arow[nb.cell[i]] = a;
        const T* vp = vt.data() + nb.pos[i] * c;
        for (std::size_t ch = 0; ch < c; ++ch) zp[ch] += a * vp[ch];
      }
    }
    std::fill_n(out->ptr() + b * c * p, c * p, T(0));
    add_channel_major(zt.data(), c, p, out->ptr() + b * c * p);
  }

  if (g.wants({q.get(), k.get(), v.get()})) {
    auto *Q = q.get(), *K = k.get(), *V = v.get(), *Z = out.get();
    g.record("windowed_attention", {q, k, v}, out, [=] {
      std::vector<T> qt(p * c), kt(p * c), vt(p * c), dzt(p * c);
      std::vector<T> dqt(p * c), dkt(p * c), dvt(p * c);
      std::vector<T> dalpha(cells);
      for (std::size_t b = 0; b < n; ++b) {
        to_pixel_major(Q->ptr() + b * c * p, c, p, qt.data());
        to_pixel_major(K->ptr() + b * c * p, c, p, kt.data());
        to_pixel_major(V->ptr() + b * c * p, c, p, vt.data());
        to_pixel_major(Z->grad().data() + b * c * p, c, p, dzt.data());
        std::fill(dqt.begin(), dqt.end(), T(0));
        std::fill(dkt.begin(), dkt.end(), T(0));
        std::fill(dvt.begin(), dvt.end(), T(0));
        for (std::size_t loc = 0; loc < p; ++loc) {
          const auto& nb = (*hoods)[loc];
          const T* arow = alpha->data() + (b * p + loc) * cells;
          const T* dz = dzt.data() + loc * c;
          T weighted = 0;
          for (std::size_t i = 0; i < nb.pos.size(); ++i) {
            const T* vp = vt.data() + nb.pos[i] * c;
            T* dvp = dvt.data() + nb.pos[i] * c;
            const T a = arow[nb.cell[i]];
            T acc = 0;
            for (std::size_t ch = 0; ch < c; ++ch) {
              acc += dz[ch] * vp[ch];
              dvp[ch] += a * dz[ch];
            }
            dalpha[i] = acc;
            weighted += a * acc;
          }
          const T* qp = qt.data() + loc * c;
          T* dqp = dqt.data() + loc * c;
          for (std::size_t i = 0; i < nb.pos.size(); ++i) {
            const T dl = arow[nb.cell[i]] * (dalpha[i] - weighted) * s;
            const T* kp = kt.data() + nb.pos[i] * c;
            T* dkp = dkt.data() + nb.pos[i] * c;
            for (std::size_t ch = 0; ch < c; ++ch) {
              dqp[ch] += dl * kp[ch];
              dkp[ch] += dl * qp[ch];
            }
          }
        }
        if (Q->requires_grad()) add_channel_major(dqt.data(), c, p, Q->ensure_grad().data() + b * c * p);
        if (K->requires_grad()) add_channel_major(dkt.data(), c, p, K->ensure_grad().data() + b * c * p);
        if (V->requires_grad()) add_channel_major(dvt.data(), c, p, V->ensure_grad().data() + b * c * p);
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> global_attention(Graph<T>& g, const TensorPtr<T>& q, const TensorPtr<T>& k,
                              const TensorPtr<T>& v, bool scale_logits) {
  require_same_qkv(*q, *k, *v);
  const std::size_t n = q->dim(0), c = q->dim(1), p = q->dim(2) * q->dim(3);
  const T s = logit_scale<T>(scale_logits, c);
  auto attn = std::make_shared<std::vector<T>>(n * p * p);
  auto out = tensor_new<T>(q->shape());
  for (std::size_t b = 0; b < n; ++b) {
    T* a = attn->data() + b * p * p;
    gemm<T>(true, false, int(p), int(p), int(c), q->ptr() + b * c * p, k->ptr() + b * c * p, a);
    for (std::size_t r = 0; r < p; ++r) {
      T* row = a + r * p;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < p; ++j) mx = std::max(mx, row[j] *= s);
      T z = 0;
      for (std::size_t j = 0; j < p; ++j) z += (row[j] = std::exp(row[j] - mx));
      for (std::size_t j = 0; j < p; ++j) row[j] /= z;
    }
    gemm<T>(false, true, int(c), int(p), int(p), v->ptr() + b * c * p, a, out->ptr() + b * c * p);
  }
  if (g.wants({q.get(), k.get(), v.get()})) {
    auto *Q = q.get(), *K = k.get(), *V = v.get(), *Z = out.get();
    g.record("global_attention", {q, k, v}, out, [=] {
      std::vector<T> da(p * p);
      for (std::size_t b = 0; b < n; ++b) {
        const T* a = attn->data() + b * p * p;
        const T* dz = Z->grad().data() + b * c * p;
        if (V->requires_grad())
          gemm<T>(false, false, int(c), int(p), int(p), dz, a, V->ensure_grad().data() + b * c * p, T(1));
        if (!Q->requires_grad() && !K->requires_grad()) continue;
        gemm<T>(true, false, int(p), int(p), int(c), dz, V->ptr() + b * c * p, da.data());
        for (std::size_t r = 0; r < p; ++r) {
          T dot = 0;
          for (std::size_t j = 0; j < p; ++j) dot += a[r * p + j] * da[r * p + j];
          for (std::size_t j = 0; j < p; ++j) da[r * p + j] = a[r * p + j] * (da[r * p + j] - dot) * s;
        }
        if (Q->requires_grad())
          gemm<T>(false, true, int(c), int(p), int(p), K->ptr() + b * c * p, da.data(),
                  Q->ensure_grad().data() + b * c * p, T(1));
        if (K->requires_grad())
          gemm<T>(false, false, int(c), int(p), int(p), Q->ptr() + b * c * p, da.data(),
                  K->ensure_grad().data() + b * c * p, T(1));
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> cnc_forward(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& y, const CncParams<T>& params) {
  auto qkv = project_qkv(g, x, y, params);
  auto z = windowed_attention(g, qkv.q, qkv.k, qkv.v, params.radius, params.scale_logits);
  return concat_channels(g, y, z);
}

template <typename T>
TensorPtr<T> global_nc_forward(Graph<T>& g, const TensorPtr<T>& x, const TensorPtr<T>& y,
                               const CncParams<T>& params) {
  auto qkv = project_qkv(g, x, y, params);
  auto z = global_attention(g, qkv.q, qkv.k, qkv.v, params.scale_logits);
  return concat_channels(g, y, z);
}

template <typename T>
Tensor<T> cnc_oracle(const Tensor<T>& x, const Tensor<T>& y, const CncParams<T>& params) {
  params.validate();
  require_map(x.shape(), "cnc_oracle encoder map");
  require_map(y.shape(), "cnc_oracle decoder map");
  const std::size_t n = x.dim(0), cx = x.dim(1), cy = y.dim(1), h = x.dim(2), w = x.dim(3);
  if (y.dim(0) != n || y.dim(2) != h || y.dim(3) != w) {
    throw DimensionError("cnc_oracle: encoder " + shape_str(x.shape()) + " vs decoder " + shape_str(y.shape()));
  }
  const std::size_t ch = params.hidden();
  const long r = static_cast<long>(params.radius);
  const double s = params.scale_logits ? 1.0 / std::sqrt(double(ch)) : 1.0;
  auto X = [&](std::size_t b, std::size_t c, long i, long j) { return double(x[((b * cx + c) * h + i) * w + j]); };
  auto Y = [&](std::size_t b, std::size_t c, long i, long j) { return double(y[((b * cy + c) * h + i) * w + j]); };
  auto project = [](const Tensor<T>& wt, std::size_t o, std::size_t cin, auto&& src) {
    double acc = 0;
    for (std::size_t c = 0; c < cin; ++c) acc += double(wt[o * cin + c]) * src(c);
    return acc;
  };

  Tensor<T> out({n, cy + ch, h, w});
  for (std::size_t b = 0; b < n; ++b) {
    for (long i = 0; i < long(h); ++i) {
      for (long j = 0; j < long(w); ++j) {
        for (std::size_t c = 0; c < cy; ++c) out[((b * (cy + ch) + c) * h + i) * w + j] = y[((b * cy + c) * h + i) * w + j];
        std::vector<double> qp(ch);
        for (std::size_t o = 0; o < ch; ++o)
          qp[o] = project(*params.wq, o, cy, [&](std::size_t c) { return Y(b, c, i, j); });
        std::vector<double> logits;
        std::vector<std::vector<double>> values;
        for (long di = -r; di <= r; ++di) {
          for (long dj = -r; dj <= r; ++dj) {
            const long ii = i + di, jj = j + dj;
            if (ii < 0 || jj < 0 || ii >= long(h) || jj >= long(w)) continue;
            double logit = 0;
            std::vector<double> val(ch);
            for (std::size_t o = 0; o < ch; ++o) {
              const double kv = project(*params.wk, o, cx, [&](std::size_t c) { return X(b, c, ii, jj); });
              val[o] = project(*params.wv, o, cx, [&](std::size_t c) { return X(b, c, ii, jj); });
              logit += qp[o] * kv;
            }
            logits.push_back(logit * s);
            values.push_back(std::move(val));
          }
        }
        double mx = logits[0];
        for (double l : logits) mx = std::max(mx, l);
        double z = 0;
        for (double l : logits) z += std::exp(l - mx);
        for (std::size_t o = 0; o < ch; ++o) {
          double acc = 0;
          for (std::size_t t = 0; t < logits.size(); ++t) acc += std::exp(logits[t] - mx) / z * values[t][o];
          out[((b * (cy + ch) + cy + o) * h + i) * w + j] = static_cast<T>(acc);
        }
      }
    }
  }
  return out;
}

#define IDMORPH_INSTANTIATE(T)                                                                           \
  template struct CncParams<T>;                                                                          \
  template Qkv<T> project_qkv(Graph<T>&, const TensorPtr<T>&, const TensorPtr<T>&, const CncParams<T>&); \
  template Window<T> window_gather(const Tensor<T>&, std::size_t, std::size_t, std::size_t, std::size_t); \
  template AttentionMap<T> attention_map(const Tensor<T>&, const Tensor<T>&, std::size_t, bool);         \
  template TensorPtr<T> windowed_attention(Graph<T>&, const TensorPtr<T>&, const TensorPtr<T>&,          \
                                           const TensorPtr<T>&, std::size_t, bool);                      \
  template TensorPtr<T> global_attention(Graph<T>&, const TensorPtr<T>&, const TensorPtr<T>&,            \
                                         const TensorPtr<T>&, bool);                                     \
  template TensorPtr<T> cnc_forward(Graph<T>&, const TensorPtr<T>&, const TensorPtr<T>&,                 \
                                    const CncParams<T>&);                                                \
  template TensorPtr<T> global_nc_forward(Graph<T>&, const TensorPtr<T>&, const TensorPtr<T>&,           \
                                          const CncParams<T>&);                                          \
  template Tensor<T> cnc_oracle(const Tensor<T>&, const Tensor<T>&, const CncParams<T>&);

IDMORPH_INSTANTIATE(float)
IDMORPH_INSTANTIATE(double)

}  // namespace idmorph
