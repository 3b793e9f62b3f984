#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "idmorph/dataset.hpp"
#include "idmorph/image_io.hpp"
#include "idmorph/layers.hpp"
#include "idmorph/networks.hpp"

namespace idmorph {

struct EvalConfig {
  std::size_t n_c = 10;              // classes per experiment
  std::size_t k = 5;                 // KNN neighbours
  std::size_t shots = 5;             // s in N_c-way s-shot
  std::size_t fakes_per_image = 20;  // multiple of the 5-point interpolation grid
  std::size_t extractor_steps = 1600;
  std::size_t classifier_steps = 400;
  std::size_t classifier_width = 16;
  std::size_t classifier_batch = 32;
  double classifier_lr = 3e-3;
  std::uint64_t seed = 7;

  void validate() const;
};

/// Small CNN: 4 stride-2 conv blocks with leaky relu, global average pooling
/// (the feature), optional real/fake bit appended, then a dense head.
class ConvClassifier {
 public:
  ConvClassifier(std::size_t image_size, std::size_t width, std::size_t classes, bool real_fake_bit, Rng& rng);

  std::size_t feature_dim() const { return head_.in() - (bit_ ? 1 : 0); }
  std::size_t classes() const { return head_.out(); }
  bool uses_bit() const { return bit_; }

  TensorPtr<float> features(Graph<float>& g, const TensorPtr<float>& images) const;
  /// bits: one value per row; ignored (may be empty) when the bit is unused.
  TensorPtr<float> logits(Graph<float>& g, const TensorPtr<float>& images, const std::vector<float>& bits) const;
  ParameterSet<float> parameters() const;

 private:
  std::size_t image_size_;
  std::vector<ConvLayer<float>> trunk_;
  DenseLayer<float> head_;
  bool bit_;
};

/// Trains with Adam on cross-entropy, batches drawn with replacement from
/// `data` (identities must be 0..classes-1). Returns final accuracy on `data`.
double train_classifier(ConvClassifier& net, const Dataset& data, std::size_t steps, std::size_t batch, double lr,
                        Rng& rng);

/// Row-major predictions: for each sample, classes ranked by logit.
std::vector<std::vector<std::size_t>> classifier_rank(const ConvClassifier& net, const Dataset& data,
                                                      const std::vector<float>& bits);

struct FeatureExtractor {
  std::unique_ptr<ConvClassifier> net;
  double train_accuracy = 0;

  std::size_t dim() const { return net->feature_dim(); }
  /// [n, dim] row-major features.
  std::vector<float> extract(const Dataset& data) const;
  std::vector<float> extract(const TensorPtr<float>& images) const;
};

FeatureExtractor train_feature_extractor(const Dataset& auxiliary, const EvalConfig& cfg);

/// Brute-force k-nearest-neighbour classifier under Euclidean distance.
class Knn {
 public:
  Knn(std::vector<float> features, std::size_t dim, std::vector<std::size_t> labels, std::size_t k);

  /// All known classes, best first: more votes among the k nearest first,
  /// then smaller distance to the class's nearest sample, then label.
  std::vector<std::size_t> rank(std::span<const float> query) const;

 private:
  std::vector<float> feats_;
  std::size_t dim_;
  std::vector<std::size_t> labels_;
  std::vector<std::size_t> classes_;
  std::size_t k_;
};

struct ClassCount {
  std::size_t label;  // 1-based identity label
  std::size_t total = 0;
  std::size_t top1 = 0;
  std::size_t top5 = 0;
};

struct EvalReport {
  std::string protocol;
  std::size_t n_c = 0;
  double top1 = 0;
  double top5 = 0;
  std::vector<ClassCount> per_class;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> extra;

  std::string to_tsv() const;
  void write(const std::filesystem::path& path) const;
};

/// Accumulates ranked predictions into a report.
class ReportBuilder {
 public:
  void add(std::size_t truth, const std::vector<std::size_t>& ranked);
  EvalReport finish(std::string protocol, std::size_t n_c, std::string config_hash, std::uint64_t seed) const;

 private:
  std::vector<ClassCount> counts_;
};

std::string config_hash(const std::string& text);

/// Image-to-image map under evaluation. codes: [N, N_a].
class ImageGenerator {
 public:
  virtual ~ImageGenerator() = default;
  virtual std::string name() const = 0;
  virtual TensorPtr<float> generate(const TensorPtr<float>& images, const TensorPtr<float>& codes, Rng& rng) = 0;
};

class IdentityGenerator : public ImageGenerator {
 public:
  std::string name() const override { return "identity"; }
  TensorPtr<float> generate(const TensorPtr<float>& images, const TensorPtr<float>& codes, Rng& rng) override;
};

class ConstantGenerator : public ImageGenerator {
 public:
  explicit ConstantGenerator(float value = 0.0f) : value_(value) {}
  std::string name() const override { return "constant"; }
  TensorPtr<float> generate(const TensorPtr<float>& images, const TensorPtr<float>& codes, Rng& rng) override;

 private:
  float value_;
};

/// Trained generator in eval mode with fresh z per image.
class NetworkGenerator : public ImageGenerator {
 public:
  explicit NetworkGenerator(Generator<float> gen) : gen_(std::move(gen)) {}
  std::string name() const override { return "network"; }
  TensorPtr<float> generate(const TensorPtr<float>& images, const TensorPtr<float>& codes, Rng& rng) override;

 private:
  Generator<float> gen_;
};

/// One-hot [n, na] codes for the given 0-based attributes.
TensorPtr<float> one_hot_codes(const std::vector<std::size_t>& attrs, std::size_t na);

/// Picks n_c identities (seeded) and returns their indices per class.
std::vector<std::vector<std::size_t>> select_classes(const Dataset& data, std::size_t n_c, Rng& rng);

/// KNN identity-preservation protocol.
EvalReport knn_idpres(const Dataset& standard, ImageGenerator& gen, const FeatureExtractor& extractor,
                      const EvalConfig& cfg, std::size_t num_attributes = 5);

/// Convex viewpoint codes (1-t) e_a + t e_b over `pairs` random pairs a != b
/// and t in {0, .25, .5, .75, 1}; 5 * pairs rows of width na.
std::vector<std::vector<float>> interpolation_codes(std::size_t pairs, std::size_t na, Rng& rng);

/// Reals (bit 1) followed, per image, by fakes (bit 0) labelled with the
/// source identity; viewpoint label is the code's dominant attribute.
Dataset augment_fewshot(const Dataset& train, ImageGenerator& gen, std::size_t fakes_per_image, Rng& rng,
                        std::size_t num_attributes = 5);

/// Baseline (reals only) and augmented N_c-way s-shot classifiers on the
/// same split and initialization; both evaluated on real test images, bit 1.
std::pair<EvalReport, EvalReport> fewshot_eval(const Dataset& standard, ImageGenerator& gen, const EvalConfig& cfg,
                                               std::size_t num_attributes = 5);

/// Grid: one row per input, input first then one column per viewpoint.
Image contact_sheet(const Dataset& inputs, ImageGenerator& gen, std::size_t num_attributes, Rng& rng);

}  // namespace idmorph
