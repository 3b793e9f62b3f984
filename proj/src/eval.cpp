#include "idmorph/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>

#include <fmt/format.h>

#include "idmorph/adam.hpp"

namespace idmorph {

namespace {

constexpr std::size_t kChunk = 32;

std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

std::vector<std::size_t> rank_row(const float* row, std::size_t k) {
  auto order = iota_n(k);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
  return order;
}

TensorPtr<float> repeat_image(std::span<const float> img, std::size_t times, std::size_t size) {
  std::vector<float> buf;
  buf.reserve(img.size() * times);
  for (std::size_t i = 0; i < times; ++i) buf.insert(buf.end(), img.begin(), img.end());
  return tensor_new<float>({times, 3, size, size}, std::move(buf));
}

}  // namespace

void EvalConfig::validate() const {
  if (n_c < 2) throw ConfigError("n_c must be >= 2");
  if (k < 1) throw ConfigError("k must be >= 1");
  if (shots < 1) throw ConfigError("shots must be >= 1");
  if (fakes_per_image % 5 != 0) throw ConfigError("fakes_per_image must be a multiple of 5 (interpolation grid)");
  if (classifier_width < 1) throw ConfigError("classifier_width must be >= 1");
  if (classifier_batch < 1) throw ConfigError("classifier_batch must be >= 1");
  if (!(classifier_lr > 0)) throw ConfigError("classifier_lr must be positive");
}

// ---------------------------------------------------------------- classifier

ConvClassifier::ConvClassifier(std::size_t image_size, std::size_t width, std::size_t classes, bool real_fake_bit,
                               Rng& rng)
    : image_size_(image_size), bit_(real_fake_bit) {
  if (image_size % 16 != 0) throw ConfigError("classifier: image size must be a multiple of 16");
  if (classes < 2) throw ConfigError("classifier: need at least 2 classes");
  std::size_t cin = 3;
  for (std::size_t b = 0; b < 4; ++b) {
    const std::size_t cout = width << b;
    trunk_.push_back(ConvLayer<float>::init(cin, cout, 4, 2, 1, false, rng));
    cin = cout;
  }
  head_ = DenseLayer<float>::init(cin + (bit_ ? 1 : 0), classes, rng);
}

TensorPtr<float> ConvClassifier::features(Graph<float>& g, const TensorPtr<float>& images) const {
  check_image_shape(images->shape(), image_size_);
  auto h = images;
  for (const auto& layer : trunk_) h = pointwise(g, layer(g, h), Unary::leaky_relu);
  return spatial_mean(g, h);
}

TensorPtr<float> ConvClassifier::logits(Graph<float>& g, const TensorPtr<float>& images,
                                        const std::vector<float>& bits) const {
  auto f = features(g, images);
  if (bit_) {
    if (bits.size() != images->dim(0)) throw DimensionError("classifier: one real/fake bit per image required");
    f = concat_features(g, {f, tensor_new<float>({bits.size(), 1}, bits)});
  }
  return head_(g, f);
}

ParameterSet<float> ConvClassifier::parameters() const {
  ParameterSet<float> set;
  for (std::size_t i = 0; i < trunk_.size(); ++i) trunk_[i].collect("cls.conv" + std::to_string(i), set);
  head_.collect("cls.head", set);
  return set;
}

std::vector<std::vector<std::size_t>> classifier_rank(const ConvClassifier& net, const Dataset& data,
                                                      const std::vector<float>& bits) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    std::vector<std::size_t> idx;
    std::vector<float> b;
    for (std::size_t i = start; i < std::min(data.size(), start + kChunk); ++i) {
      idx.push_back(i);
      b.push_back(bits.empty() ? 1.0f : bits[i]);
    }
    Graph<float> off(false);
    auto logits = net.logits(off, data.images<float>(idx), b);
    for (std::size_t r = 0; r < idx.size(); ++r) out.push_back(rank_row(logits->ptr() + r * net.classes(), net.classes()));
  }
  return out;
}

double train_classifier(ConvClassifier& net, const Dataset& data, std::size_t steps, std::size_t batch, double lr,
                        Rng& rng) {
  if (data.empty()) throw DataError("classifier training set is empty");
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.identity[i] >= net.classes()) {
      throw LabelError("classifier training row " + std::to_string(i) + ": label " + std::to_string(data.identity[i] + 1) +
                       " outside 1.." + std::to_string(net.classes()));
    }
  }
  auto params = net.parameters();
  Adam<float> opt(params, {lr, 0.9, 0.999, 1e-8});
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<std::size_t> idx(batch);
    for (auto& i : idx) i = rng.index(data.size());
    std::vector<std::size_t> labels;
    std::vector<float> bits;
    for (auto i : idx) {
      labels.push_back(data.identity[i]);
      bits.push_back(float(data.real[i]));
    }
    params.zero_grad();
    Graph<float> g;
    auto loss = cross_entropy_logits(g, net.logits(g, data.images<float>(idx), bits), labels);
    g.backward(loss);
    opt.step();
  }
  std::vector<float> bits(data.real.begin(), data.real.end());
  const auto ranks = classifier_rank(net, data, bits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) correct += ranks[i][0] == data.identity[i];
  return double(correct) / double(data.size());
}

std::vector<float> FeatureExtractor::extract(const TensorPtr<float>& images) const {
  Graph<float> off(false);
  return net->features(off, images)->vec();
}

std::vector<float> FeatureExtractor::extract(const Dataset& data) const {
  std::vector<float> out;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + kChunk); ++i) idx.push_back(i);
    auto f = extract(data.images<float>(idx));
    out.insert(out.end(), f.begin(), f.end());
  }
  return out;
}

FeatureExtractor train_feature_extractor(const Dataset& auxiliary, const EvalConfig& cfg) {
  if (auxiliary.empty()) throw DataError("feature extractor: auxiliary set is empty");
  const Dataset data = auxiliary.relabeled();
  Rng init(mix_seed(cfg.seed, 21));
  FeatureExtractor fx;
  fx.net = std::make_unique<ConvClassifier>(data.image_size, cfg.classifier_width, data.identities().size(), false, init);
  Rng train_rng(mix_seed(cfg.seed, 22));
  fx.train_accuracy = train_classifier(*fx.net, data, cfg.extractor_steps, cfg.classifier_batch, cfg.classifier_lr, train_rng);
  return fx;
}

// ---------------------------------------------------------------- KNN

Knn::Knn(std::vector<float> features, std::size_t dim, std::vector<std::size_t> labels, std::size_t k)
    : feats_(std::move(features)), dim_(dim), labels_(std::move(labels)), k_(k) {
  if (labels_.empty()) throw DataError("KNN: no training samples");
  if (feats_.size() != labels_.size() * dim_) throw DimensionError("KNN: feature matrix does not match label count");
  if (k_ == 0) throw ConfigError("KNN: k must be >= 1");
  classes_ = labels_;
  std::sort(classes_.begin(), classes_.end());
  classes_.erase(std::unique(classes_.begin(), classes_.end()), classes_.end());
}

std::vector<std::size_t> Knn::rank(std::span<const float> query) const {
  if (query.size() != dim_) throw DimensionError("KNN: query has wrong feature width");
  const std::size_t n = labels_.size();
  std::vector<double> dist(n);
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0;
    const float* f = feats_.data() + i * dim_;
    for (std::size_t j = 0; j < dim_; ++j) {
      const double diff = double(f[j]) - double(query[j]);
      d += diff * diff;
    }
    dist[i] = d;
  }
  auto order = iota_n(n);
  const std::size_t k = std::min(k_, n);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) { return dist[a] < dist[b] || (dist[a] == dist[b] && a < b); });
  std::map<std::size_t, std::size_t> votes;
  for (std::size_t i = 0; i < k; ++i) ++votes[labels_[order[i]]];
  std::map<std::size_t, double> nearest;
  for (std::size_t i = 0; i < n; ++i) {
    auto [it, fresh] = nearest.emplace(labels_[i], dist[i]);
    if (!fresh) it->second = std::min(it->second, dist[i]);
  }
  std::vector<std::size_t> ranked = classes_;
  std::stable_sort(ranked.begin(), ranked.end(), [&](std::size_t a, std::size_t b) {
    const std::size_t va = votes.count(a) ? votes.at(a) : 0, vb = votes.count(b) ? votes.at(b) : 0;
    if (va != vb) return va > vb;
    return nearest.at(a) < nearest.at(b);
  });
  return ranked;
}

// ---------------------------------------------------------------- reports

void ReportBuilder::add(std::size_t truth, const std::vector<std::size_t>& ranked) {
  auto it = std::find_if(counts_.begin(), counts_.end(), [&](const ClassCount& c) { return c.label == truth + 1; });
  if (it == counts_.end()) {
    counts_.push_back({truth + 1});
    it = counts_.end() - 1;
  }
  ++it->total;
  if (!ranked.empty() && ranked[0] == truth) ++it->top1;
  const std::size_t k = std::min<std::size_t>(5, ranked.size());
  if (std::find(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k), truth) != ranked.begin() + static_cast<std::ptrdiff_t>(k))
    ++it->top5;
}

EvalReport ReportBuilder::finish(std::string protocol, std::size_t n_c, std::string hash, std::uint64_t seed) const {
  EvalReport r;
  r.protocol = std::move(protocol);
  r.n_c = n_c;
  r.per_class = counts_;
  std::sort(r.per_class.begin(), r.per_class.end(), [](const auto& a, const auto& b) { return a.label < b.label; });
  std::size_t total = 0, t1 = 0, t5 = 0;
  for (const auto& c : counts_) {
    total += c.total;
    t1 += c.top1;
    t5 += c.top5;
  }
  if (total > 0) {
    r.top1 = double(t1) / double(total);
    r.top5 = double(t5) / double(total);
  }
  r.config_hash = std::move(hash);
  r.seed = seed;
  return r;
}

std::string EvalReport::to_tsv() const {
  std::string s;
  s += "protocol\t" + protocol + "\n";
  s += fmt::format("n_c\t{}\n", n_c);
  s += fmt::format("top1\t{:.6f}\n", top1);
  s += fmt::format("top5\t{:.6f}\n", top5);
  s += "config_hash\t" + config_hash + "\n";
  s += fmt::format("seed\t{}\n", seed);
  for (const auto& [k, v] : extra) s += k + "\t" + v + "\n";
  s += "\nclass\ttotal\ttop1_correct\ttop5_correct\n";
  for (const auto& c : per_class) s += fmt::format("{}\t{}\t{}\t{}\n", c.label, c.total, c.top1, c.top5);
  std::size_t total = 0;
  for (const auto& c : per_class) total += c.total;
  s += "\n# ---- summary ----\n";
  s += fmt::format("# {} over {} classes, {} evaluated images\n", protocol, n_c, total);
  s += fmt::format("# top-1 accuracy {:.2f}%   top-5 accuracy {:.2f}%\n", 100 * top1, 100 * top5);
  s += fmt::format("# seed {}   config {}\n", seed, config_hash);
  return s;
}

void EvalReport::write(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write report '" + path.string() + "'");
  f << to_tsv();
  if (!f) throw IoError("write failed for report '" + path.string() + "'");
}

std::string config_hash(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return fmt::format("{:016x}", h);
}

// ---------------------------------------------------------------- generators

TensorPtr<float> IdentityGenerator::generate(const TensorPtr<float>& images, const TensorPtr<float>&, Rng&) {
  return tensor_new<float>(images->shape(), images->vec());
}

TensorPtr<float> ConstantGenerator::generate(const TensorPtr<float>& images, const TensorPtr<float>&, Rng&) {
  return tensor_new<float>(images->shape(), value_);
}

TensorPtr<float> NetworkGenerator::generate(const TensorPtr<float>& images, const TensorPtr<float>& codes, Rng& rng) {
  auto z = tensor_new<float>({images->dim(0), gen_.config().noise_dim});
  for (auto& v : z->data()) v = float(rng.normal());
  Graph<float> off(false);
  return gen_.generate(off, images, z, codes, Mode::eval);
}

TensorPtr<float> one_hot_codes(const std::vector<std::size_t>& attrs, std::size_t na) {
  auto c = tensor_new<float>({attrs.size(), na});
  for (std::size_t i = 0; i < attrs.size(); ++i) {
    if (attrs[i] >= na) throw LabelError("attribute " + std::to_string(attrs[i] + 1) + " outside 1.." + std::to_string(na));
    (*c)[i * na + attrs[i]] = 1.0f;
  }
  return c;
}

// ---------------------------------------------------------------- protocols

std::vector<std::vector<std::size_t>> select_classes(const Dataset& data, std::size_t n_c, Rng& rng) {
  auto ids = data.identities();
  if (n_c > ids.size()) {
    throw ConfigError("N_c = " + std::to_string(n_c) + " exceeds the " + std::to_string(ids.size()) +
                      " classes available");
  }
  shuffle(ids.begin(), ids.end(), rng);
  ids.resize(n_c);
  std::sort(ids.begin(), ids.end());
  std::vector<std::vector<std::size_t>> members(n_c);
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto it = std::lower_bound(ids.begin(), ids.end(), data.identity[i]);
    if (it != ids.end() && *it == data.identity[i]) members[std::size_t(it - ids.begin())].push_back(i);
  }
  return members;
}

EvalReport knn_idpres(const Dataset& standard, ImageGenerator& gen, const FeatureExtractor& extractor,
                      const EvalConfig& cfg, std::size_t na) {
  cfg.validate();
  Rng rng(cfg.seed);
  const auto classes = select_classes(standard, cfg.n_c, rng);
  std::vector<std::size_t> train_idx, test_idx;
  for (auto members : classes) {
    if (members.size() < 2) throw ConfigError("knn_idpres: every class needs at least 2 images for an 8:2 split");
    shuffle(members.begin(), members.end(), rng);
    const auto n_train = std::clamp<std::size_t>((members.size() * 8 + 5) / 10, 1, members.size() - 1);
    train_idx.insert(train_idx.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_train));
    test_idx.insert(test_idx.end(), members.begin() + static_cast<std::ptrdiff_t>(n_train), members.end());
  }
  const Dataset train = standard.subset(train_idx);
  const Dataset test = standard.subset(test_idx);
  const Knn knn(extractor.extract(train), extractor.dim(), train.identity, cfg.k);

  ReportBuilder fakes, reals;
  Rng gen_rng(mix_seed(cfg.seed, 31));
  for (std::size_t start = 0; start < test.size(); start += kChunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(test.size(), start + kChunk); ++i) idx.push_back(i);
    auto images = test.images<float>(idx);
    const auto real_feats = extractor.extract(images);
    for (std::size_t r = 0; r < idx.size(); ++r)
      reals.add(test.identity[idx[r]], knn.rank(std::span<const float>(real_feats).subspan(r * extractor.dim(), extractor.dim())));
    for (std::size_t v = 0; v < na; ++v) {
      auto out = gen.generate(images, one_hot_codes(std::vector<std::size_t>(idx.size(), v), na), gen_rng);
      const auto feats = extractor.extract(out);
      for (std::size_t r = 0; r < idx.size(); ++r)
        fakes.add(test.identity[idx[r]], knn.rank(std::span<const float>(feats).subspan(r * extractor.dim(), extractor.dim())));
    }
  }
  const std::string hash = config_hash(fmt::format("knn_idpres n_c={} k={} seed={} gen={}", cfg.n_c, cfg.k, cfg.seed, gen.name()));
  auto report = fakes.finish("knn_idpres", cfg.n_c, hash, cfg.seed);
  const auto real_report = reals.finish("knn_real", cfg.n_c, hash, cfg.seed);
  report.extra = {{"generator", gen.name()},
                  {"k", std::to_string(cfg.k)},
                  {"train_images", std::to_string(train.size())},
                  {"test_images", std::to_string(test.size())},
                  {"generated_images", std::to_string(test.size() * na)},
                  {"real_top1", fmt::format("{:.6f}", real_report.top1)},
                  {"real_top5", fmt::format("{:.6f}", real_report.top5)}};
  return report;
}

std::vector<std::vector<float>> interpolation_codes(std::size_t pairs, std::size_t na, Rng& rng) {
  if (na < 2) throw ConfigError("interpolation needs at least 2 attributes");
  std::vector<std::vector<float>> codes;
  for (std::size_t p = 0; p < pairs; ++p) {
    const std::size_t a = rng.index(na);
    std::size_t b = rng.index(na - 1);
    if (b >= a) ++b;
    for (int step = 0; step <= 4; ++step) {
      const float t = 0.25f * float(step);
      std::vector<float> c(na, 0.0f);
      c[a] = 1.0f - t;
      c[b] += t;
      codes.push_back(std::move(c));
    }
  }
  return codes;
}

Dataset augment_fewshot(const Dataset& train, ImageGenerator& gen, std::size_t fakes_per_image, Rng& rng,
                        std::size_t na) {
  if (fakes_per_image % 5 != 0) throw ConfigError("fakes_per_image must be a multiple of 5");
  Dataset out;
  out.image_size = train.image_size;
  out.pixels.reserve(train.size() * (1 + fakes_per_image) * train.image_numel());
  for (std::size_t i = 0; i < train.size(); ++i) {
    out.add(train.image(i), train.identity[i], train.viewpoint[i], true, train.split[i], train.paths[i]);
    if (fakes_per_image == 0) continue;
    const auto codes = interpolation_codes(fakes_per_image / 5, na, rng);
    std::vector<float> flat;
    for (const auto& c : codes) flat.insert(flat.end(), c.begin(), c.end());
    auto fake = gen.generate(repeat_image(train.image(i), codes.size(), train.image_size),
                             tensor_new<float>({codes.size(), na}, flat), rng);
    const std::size_t numel = train.image_numel();
    for (std::size_t f = 0; f < codes.size(); ++f) {
      const auto dominant = std::size_t(std::max_element(codes[f].begin(), codes[f].end()) - codes[f].begin());
      out.add(std::span<const float>(fake->ptr() + f * numel, numel), train.identity[i], dominant, false, train.split[i]);
    }
  }
  return out;
}

std::pair<EvalReport, EvalReport> fewshot_eval(const Dataset& standard, ImageGenerator& gen, const EvalConfig& cfg,
                                               std::size_t na) {
  cfg.validate();
  Rng rng(cfg.seed);
  const auto classes = select_classes(standard, cfg.n_c, rng);
  std::vector<std::size_t> original(cfg.n_c);
  Dataset train, test;
  train.image_size = test.image_size = standard.image_size;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    auto members = classes[c];
    original[c] = standard.identity[members.front()];
    if (members.size() <= cfg.shots) {
      throw ConfigError("fewshot: class " + std::to_string(original[c] + 1) + " has " + std::to_string(members.size()) +
                        " images, need more than s = " + std::to_string(cfg.shots));
    }
    shuffle(members.begin(), members.end(), rng);
    for (std::size_t j = 0; j < members.size(); ++j) {
      const auto i = members[j];
      (j < cfg.shots ? train : test).add(standard.image(i), c, standard.viewpoint[i], true, standard.split[i], standard.paths[i]);
    }
  }
  Rng aug_rng(mix_seed(cfg.seed, 41));
  const Dataset augmented = augment_fewshot(train, gen, cfg.fakes_per_image, aug_rng, na);

  const std::string hash = config_hash(fmt::format("fewshot n_c={} s={} fakes={} steps={} width={} seed={} gen={}", cfg.n_c,
                                                   cfg.shots, cfg.fakes_per_image, cfg.classifier_steps,
                                                   cfg.classifier_width, cfg.seed, gen.name()));
  auto run = [&](const Dataset& data, const std::string& protocol) {
    Rng init(mix_seed(cfg.seed, 42));
    ConvClassifier net(standard.image_size, cfg.classifier_width, cfg.n_c, true, init);
    Rng train_rng(mix_seed(cfg.seed, 43));
    const double train_acc = train_classifier(net, data, cfg.classifier_steps, cfg.classifier_batch, cfg.classifier_lr, train_rng);
    const auto ranks = classifier_rank(net, test, std::vector<float>(test.size(), 1.0f));
    ReportBuilder b;
    for (std::size_t i = 0; i < test.size(); ++i) {
      std::vector<std::size_t> mapped;
      for (auto r : ranks[i]) mapped.push_back(original[r]);
      b.add(original[test.identity[i]], mapped);
    }
    auto report = b.finish(protocol, cfg.n_c, hash, cfg.seed);
    report.extra = {{"generator", gen.name()},
                    {"shots", std::to_string(cfg.shots)},
                    {"train_images", std::to_string(data.size())},
                    {"test_images", std::to_string(test.size())},
                    {"train_accuracy", fmt::format("{:.6f}", train_acc)}};
    return report;
  };
  return {run(train, "fewshot_baseline"), run(augmented, "fewshot_augmented")};
}

Image contact_sheet(const Dataset& inputs, ImageGenerator& gen, std::size_t na, Rng& rng) {
  if (inputs.empty()) throw DataError("contact sheet: no input images");
  const std::size_t S = inputs.image_size, gap = 2;
  const std::size_t cols = 1 + na;
  Image sheet{cols * S + (cols + 1) * gap, inputs.size() * S + (inputs.size() + 1) * gap, {}};
  sheet.rgb.assign(sheet.width * sheet.height * 3, 255);
  auto blit = [&](std::span<const float> chw, std::size_t row, std::size_t col) {
    const Image tile = from_planar(chw, S, S);
    const std::size_t x0 = gap + col * (S + gap), y0 = gap + row * (S + gap);
    for (std::size_t y = 0; y < S; ++y)
      std::copy_n(tile.rgb.begin() + static_cast<std::ptrdiff_t>(y * S * 3), S * 3,
                  sheet.rgb.begin() + static_cast<std::ptrdiff_t>(((y0 + y) * sheet.width + x0) * 3));
  };
  std::vector<std::size_t> views(na);
  for (std::size_t v = 0; v < na; ++v) views[v] = v;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    blit(inputs.image(i), i, 0);
    auto out = gen.generate(repeat_image(inputs.image(i), na, S), one_hot_codes(views, na), rng);
    for (std::size_t v = 0; v < na; ++v) blit(std::span<const float>(out->ptr() + v * inputs.image_numel(), inputs.image_numel()), i, v + 1);
  }
  return sheet;
}

}  // namespace idmorph
