#include "idmorph/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include <spdlog/spdlog.h>

#include "idmorph/aim.hpp"
#include "idmorph/cnc.hpp"
#include "idmorph/networks.hpp"
#include "idmorph/ops.hpp"

namespace idmorph {

double grad_check(const LossFn& loss, const std::vector<TensorPtr<double>>& inputs, const GradCheckOptions& opt) {
  std::vector<bool> was(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    was[i] = inputs[i]->requires_grad();
    inputs[i]->set_requires_grad(true);
    inputs[i]->zero_grad();
  }
  {
    Graph<double> g;
    g.backward(loss(g));
  }
  Rng pick(opt.seed);
  double worst = 0;
  for (std::size_t input = 0; input < inputs.size(); ++input) {
    auto& x = inputs[input];
    std::vector<double> analytic(x->numel(), 0.0);
    if (!x->grad().empty()) std::copy(x->grad().begin(), x->grad().end(), analytic.begin());
    std::vector<std::size_t> coords(x->numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (opt.max_coords > 0 && coords.size() > opt.max_coords) {
      shuffle(coords.begin(), coords.end(), pick);
      coords.resize(opt.max_coords);
    }
    for (auto c : coords) {
      const double orig = (*x)[c];
      auto error_at = [&](double eps) {
        Graph<double> off(false);
        (*x)[c] = orig + eps;
        const double up = loss(off)->item();
        (*x)[c] = orig - eps;
        const double down = loss(off)->item();
        (*x)[c] = orig;
        const double numeric = (up - down) / (2 * eps);
        const double a = analytic[c];
        spdlog::trace("grad_check: input {} coordinate {} eps {:.0e} numeric {:.10e} analytic {:.10e}", input, c, eps,
                      numeric, a);
        return std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      };
      double err = error_at(opt.eps);
      for (double eps : opt.fallback_eps) {
        if (err < kGradTolerance) break;
        err = std::min(err, error_at(eps));
      }
      if (err > worst) {
        worst = err;
        spdlog::debug("grad_check: new worst {:.3e} at coordinate {} of input {} ({} elements), analytic {:.6e}", err,
                      c, input, x->numel(), analytic[c]);
      }
    }
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    inputs[i]->set_requires_grad(was[i]);
    inputs[i]->drop_grad();
  }
  return worst;
}

namespace {

// Round-off accumulated through a whole network makes eps=1e-6 differences
// noisy at the 1e-9 level; truncation error at 1e-4 is ~1e-11.
constexpr double kCompositeEps = 1e-4;

// Retry steps. Tiny gradients need a large step, coordinates near a kink a
// small one; a wrong backward fails at all of them.
GradCheckOptions suite_options(double eps, std::size_t max_coords = 0, std::uint64_t seed = 0) {
  GradCheckOptions opt;
  opt.eps = eps;
  opt.max_coords = max_coords;
  opt.seed = seed;
  for (double e : {1e-4, 1e-5, 1e-6, 1e-7, 1e-3})
    if (e != eps) opt.fallback_eps.push_back(e);
  return opt;
}

TensorPtr<double> random(const Shape& s, Rng& rng, double lo = -1, double hi = 1) {
  auto t = tensor_new<double>(s);
  for (auto& v : t->data()) v = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero so kinks of relu-like functions are not straddled.
TensorPtr<double> away_from_zero(const Shape& s, Rng& rng) {
  auto t = tensor_new<double>(s);
  for (auto& v : t->data()) v = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.05, 1.0);
  return t;
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); }

// sum(w * y) with fixed random weights w, so every output element matters.
// w is scaled to keep the loss O(1) whatever the output size; the 1e-8
// denominator floor assumes that scale.
TensorPtr<double> weighted(Graph<double>& g, const TensorPtr<double>& y, const TensorPtr<double>& w) {
  return sum(g, mul(g, y, w));
}

template <typename Build>
double check_weighted(Build build, std::vector<TensorPtr<double>> inputs, const Shape& out_shape, Rng& rng,
                      GradCheckOptions opt = suite_options(1e-6)) {
  auto w = random(out_shape, rng);
  const double norm = 1.0 / std::sqrt(static_cast<double>(w->numel()));
  for (auto& v : w->data()) v *= norm;
  return grad_check([&](Graph<double>& g) { return weighted(g, build(g), w); }, inputs, opt);
}

// The attention sigmoid sees un-normalized decoder maps; at full scale it
// saturates and its gradients sink below what differences can resolve.
void randomize(const ParameterSet<double>& set, Rng& rng, double scale) {
  for (const auto& [name, t] : set.entries()) {
    const double s = name.find(".tau.") != std::string::npos ? 0.5 * scale : scale;
    for (auto& v : t->data()) v = rng.uniform(-s, s);
  }
}

NetConfig tiny_net(Rng& rng, Ablation ablation) {
  NetConfig c;
  c.image_size = 16;
  c.blocks = 2;
  c.base_channels = pick(rng, 2, 3);
  c.id_dim = pick(rng, 3, 4);
  c.noise_dim = pick(rng, 2, 3);
  c.num_attributes = 3;
  c.num_identities = 3;
  c.ablation = ablation;
  c.link_resolutions = {8};
  c.link_radii = {1};
  c.balance_parameters = false;
  return c;
}

double check_generator(Rng& rng, Ablation ablation) {
  auto cfg = tiny_net(rng, ablation);
  Rng init(rng.next_u64());
  Generator<double> gen(cfg, init);
  // Default init scales leave many gradients near 1e-9, below what central
  // differences resolve; larger weights keep every path well conditioned.
  randomize(gen.parameters(), rng, 1.0);
  const std::size_t n = 3;
  auto img = random({n, 3, cfg.image_size, cfg.image_size}, rng);
  auto z = random({n, cfg.noise_dim}, rng);
  auto code = tensor_new<double>({n, cfg.num_attributes});
  for (std::size_t i = 0; i < n; ++i) (*code)[i * cfg.num_attributes + i % cfg.num_attributes] = 1;
  auto inputs = gen.parameters().tensors();
  inputs.push_back(img);
  const auto opt = suite_options(kCompositeEps, 12, rng.next_u64());
  return check_weighted([&](Graph<double>& g) { return gen.generate(g, img, z, code, Mode::train); }, inputs,
                        {n, 3, cfg.image_size, cfg.image_size}, rng, opt);
}

std::vector<GradCase> build_suite() {
  std::vector<GradCase> s;
  s.push_back({"matmul", [](Rng& rng) {
                 const std::size_t m = pick(rng, 1, 5), k = pick(rng, 1, 5), n = pick(rng, 1, 5);
                 auto a = random({m, k}, rng), b = random({k, n}, rng);
                 return check_weighted([&](Graph<double>& g) { return matmul(g, a, b); }, {a, b}, {m, n}, rng);
               }});
  s.push_back({"dense", [](Rng& rng) {
                 const std::size_t n = pick(rng, 1, 4), in = pick(rng, 1, 5), out = pick(rng, 1, 5);
                 auto x = random({n, in}, rng), w = random({out, in}, rng), b = random({out}, rng);
                 return check_weighted([&](Graph<double>& g) { return dense(g, x, w, b); }, {x, w, b}, {n, out}, rng);
               }});
  s.push_back({"conv2d", [](Rng& rng) {
                 const std::size_t n = pick(rng, 1, 2), cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
                 const std::size_t k = pick(rng, 1, 3), stride = pick(rng, 1, 2);
                 // choose an input size that gives an integral output
                 const std::size_t ho = pick(rng, 1, 3);
                 const std::size_t pad = (ho - 1) * stride + k > 2 ? pick(rng, 0, 1) : 0;
                 const std::size_t h = (ho - 1) * stride + k - 2 * pad;
                 auto x = random({n, cin, h, h}, rng), w = random({cout, cin, k, k}, rng), b = random({cout}, rng);
                 return check_weighted([&](Graph<double>& g) { return conv2d(g, x, w, b, stride, pad); }, {x, w, b},
                                       {n, cout, ho, ho}, rng);
               }});
  s.push_back({"conv_transpose2d", [](Rng& rng) {
                 const std::size_t n = pick(rng, 1, 2), cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
                 const std::size_t k = pick(rng, 2, 4), stride = pick(rng, 1, 2), h = pick(rng, 1, 3);
                 const std::size_t pad = (h - 1) * stride + k > 2 ? pick(rng, 0, 1) : 0;
                 const std::size_t ho = (h - 1) * stride + k - 2 * pad;
                 auto x = random({n, cin, h, h}, rng), w = random({cin, cout, k, k}, rng), b = random({cout}, rng);
                 return check_weighted([&](Graph<double>& g) { return conv_transpose2d(g, x, w, b, stride, pad); },
                                       {x, w, b}, {n, cout, ho, ho}, rng);
               }});
  s.push_back({"softmax_lastdim", [](Rng& rng) {
                 const Shape shape{pick(rng, 1, 3), pick(rng, 2, 5)};
                 auto x = random(shape, rng, -2, 2);
                 return check_weighted([&](Graph<double>& g) { return softmax_lastdim(g, x); }, {x}, shape, rng);
               }});
  const std::pair<const char*, Unary> unaries[] = {{"pointwise_relu", Unary::relu},
                                                   {"pointwise_leaky_relu", Unary::leaky_relu},
                                                   {"pointwise_sigmoid", Unary::sigmoid},
                                                   {"pointwise_tanh", Unary::tanh}};
  for (auto [name, kind] : unaries) {
    s.push_back({name, [kind](Rng& rng) {
                   const Shape shape{pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 3)};
                   auto x = away_from_zero(shape, rng);
                   return check_weighted([&](Graph<double>& g) { return pointwise(g, x, kind); }, {x}, shape, rng);
                 }});
  }
  s.push_back({"pointwise_mul", [](Rng& rng) {
                 const Shape a{pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 3)};
                 const Shape b = rng.uniform() < 0.5 ? a : Shape{a[0], a[1]};
                 auto x = random(a, rng), y = random(b, rng);
                 return check_weighted([&](Graph<double>& g) { return mul(g, x, y); }, {x, y}, a, rng);
               }});
  s.push_back({"pointwise_add", [](Rng& rng) {
                 const Shape a{pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 3)};
                 const Shape b = rng.uniform() < 0.5 ? a : Shape{a[1]};
                 auto x = random(a, rng), y = random(b, rng);
                 return check_weighted([&](Graph<double>& g) { return add(g, x, y); }, {x, y}, a, rng);
               }});
  s.push_back({"scale", [](Rng& rng) {
                 const Shape shape{pick(rng, 1, 4), pick(rng, 1, 4)};
                 auto x = random(shape, rng);
                 const double f = rng.uniform(-3, 3);
                 return check_weighted([&](Graph<double>& g) { return scale(g, x, f); }, {x}, shape, rng);
               }});
  s.push_back({"concat_channels", [](Rng& rng) {
                 const std::size_t n = pick(rng, 1, 2), ca = pick(rng, 1, 3), cb = pick(rng, 1, 3), h = pick(rng, 1, 3);
                 auto a = random({n, ca, h, h}, rng), b = random({n, cb, h, h}, rng);
                 return check_weighted([&](Graph<double>& g) { return concat_channels(g, a, b); }, {a, b},
                                       {n, ca + cb, h, h}, rng);
               }});
  s.push_back({"concat_features", [](Rng& rng) {
                 const std::size_t n = pick(rng, 1, 3), a = pick(rng, 1, 3), b = pick(rng, 1, 3), c = pick(rng, 1, 3);
                 auto x = random({n, a}, rng), y = random({n, b}, rng), z = random({n, c}, rng);
                 return check_weighted([&](Graph<double>& g) { return concat_features(g, {x, y, z}); }, {x, y, z},
                                       {n, a + b + c}, rng);
               }});
  s.push_back({"spatial_mean", [](Rng& rng) {
                 const std::size_t n = pick(rng, 1, 3), c = pick(rng, 1, 3), h = pick(rng, 1, 3), w = pick(rng, 1, 3);
                 auto x = random({n, c, h, w}, rng);
                 return check_weighted([&](Graph<double>& g) { return spatial_mean(g, x); }, {x}, {n, c}, rng);
               }});
  s.push_back({"cross_entropy_logits", [](Rng& rng) {
                 const std::size_t n = pick(rng, 1, 4), k = pick(rng, 2, 5);
                 auto x = random({n, k}, rng, -2, 2);
                 std::vector<std::size_t> y(n);
                 for (auto& v : y) v = rng.index(k);
                 return grad_check([&](Graph<double>& g) { return cross_entropy_logits(g, x, y); }, {x}, suite_options(1e-6));
               }});
  s.push_back({"batch_norm", [](Rng& rng) {
                 const std::size_t n = pick(rng, 2, 3), c = pick(rng, 1, 3), h = pick(rng, 1, 3);
                 auto x = random({n, c, h, h}, rng, -2, 2);
                 BatchNormStats<double> stats(c);
                 return check_weighted([&](Graph<double>& g) { return batch_norm(g, x, stats, Mode::train); }, {x},
                                       {n, c, h, h}, rng);
               }});
  s.push_back({"cnc_forward", [](Rng& rng) {
                 const std::size_t n = pick(rng, 1, 2), cx = pick(rng, 1, 3), cy = pick(rng, 1, 3), ch = pick(rng, 1, 3);
                 const std::size_t h = pick(rng, 2, 4), w = pick(rng, 2, 4), r = pick(rng, 0, 2);
                 auto p = CncParams<double>::init(cx, cy, ch, r, rng);
                 for (auto* t : {&p.wq, &p.wk, &p.wv})
                   for (auto& v : (*t)->data()) v = rng.uniform(-1, 1);
                 auto x = random({n, cx, h, w}, rng), y = random({n, cy, h, w}, rng);
                 return check_weighted([&](Graph<double>& g) { return cnc_forward(g, x, y, p); }, {x, y, p.wq, p.wk, p.wv},
                                       {n, cy + ch, h, w}, rng);
               }});
  s.push_back({"global_nc_forward", [](Rng& rng) {
                 const std::size_t n = pick(rng, 1, 2), cx = pick(rng, 1, 3), cy = pick(rng, 1, 3), ch = pick(rng, 1, 3);
                 const std::size_t h = pick(rng, 2, 4), w = pick(rng, 2, 4);
                 auto p = CncParams<double>::init(cx, cy, ch, 1, rng);
                 for (auto* t : {&p.wq, &p.wk, &p.wv})
                   for (auto& v : (*t)->data()) v = rng.uniform(-1, 1);
                 auto x = random({n, cx, h, w}, rng), y = random({n, cy, h, w}, rng);
                 return check_weighted([&](Graph<double>& g) { return global_nc_forward(g, x, y, p); },
                                       {x, y, p.wq, p.wk, p.wv}, {n, cy + ch, h, w}, rng);
               }});
  s.push_back({"aim_forward", [](Rng& rng) {
                 const std::size_t n = pick(rng, 2, 3), c = pick(rng, 1, 3), cid = pick(rng, 2, 4), h = pick(rng, 1, 3);
                 auto p = AimParams<double>::init(c, cid, rng);
                 ParameterSet<double> set;
                 p.collect("aim", set);
                 randomize(set, rng, 1.0);
                 auto b = random({n, c, h, h}, rng, -2, 2), f = random({n, cid}, rng);
                 auto inputs = set.tensors();
                 inputs.push_back(b);
                 inputs.push_back(f);
                 return check_weighted([&](Graph<double>& g) { return aim_forward(g, b, f, p, Mode::train); }, inputs,
                                       {n, c, h, h}, rng);
               }});
  s.push_back({"generator_full", [](Rng& rng) { return check_generator(rng, Ablation::full); }});
  s.push_back({"generator_global_nc", [](Rng& rng) { return check_generator(rng, Ablation::global_nc); }});
  s.push_back({"generator_unet", [](Rng& rng) { return check_generator(rng, Ablation::unet); }});
  s.push_back({"discriminator", [](Rng& rng) {
                 auto cfg = tiny_net(rng, Ablation::full);
                 Rng init(rng.next_u64());
                 Discriminator<double> disc(cfg, init);
                 randomize(disc.parameters(), rng, 1.0);
                 const std::size_t n = 2;
                 auto img = random({n, 3, cfg.image_size, cfg.image_size}, rng);
                 auto w1 = random({n, cfg.num_identities + 1}, rng), w2 = random({n, cfg.num_attributes}, rng);
                 auto inputs = disc.parameters().tensors();
                 inputs.push_back(img);
                 const auto opt = suite_options(kCompositeEps, 16, rng.next_u64());
                 return grad_check(
                     [&](Graph<double>& g) {
                       auto out = disc.discriminate(g, img);
                       return add(g, weighted(g, out.identity, w1), weighted(g, out.attribute, w2));
                     },
                     inputs, opt);
               }});
  return s;
}

}  // namespace

const std::vector<GradCase>& gradcheck_suite() {
  static const std::vector<GradCase> suite = build_suite();
  return suite;
}

std::vector<GradCaseResult> run_gradcheck_suite(std::size_t instances, std::uint64_t seed, const std::string& filter) {
  std::vector<GradCaseResult> out;
  for (const auto& c : gradcheck_suite()) {
    if (!filter.empty() && c.name.find(filter) == std::string::npos) continue;
    GradCaseResult r{c.name, 0.0, instances, 0.0};
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < instances; ++i) {
      std::uint64_t name_hash = 1469598103934665603ull;
      for (unsigned char ch : c.name) name_hash = (name_hash ^ ch) * 1099511628211ull;
      Rng rng(mix_seed(mix_seed(seed, name_hash), i));
      r.max_error = std::max(r.max_error, c.run(rng));
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(r);
  }
  return out;
}

}  // namespace idmorph
