#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include <fmt/format.h>

#include "idmorph/eval.hpp"
#include "idmorph/synthdata.hpp"
#include "test_util.hpp"

using namespace idmorph;

namespace {

Dataset sprites(std::size_t first_id, std::size_t ids, std::size_t per_cell, Split split) {
  Dataset d;
  d.image_size = 16;
  for (std::size_t id = first_id; id < first_id + ids; ++id)
    for (int v = 1; v <= 5; ++v)
      for (std::uint64_t s = 0; s < per_cell; ++s)
        d.add(render_sample(IdentitySpec::from_index(id), v, s * 131 + id, 16), id, std::size_t(v - 1), true, split);
  return d;
}

EvalConfig small_eval() {
  EvalConfig c;
  c.n_c = 4;
  c.extractor_steps = 60;
  c.classifier_steps = 40;
  c.classifier_width = 4;
  c.classifier_batch = 16;
  return c;
}

// shared by several tests; training it once keeps the suite quick
const FeatureExtractor& extractor() {
  static const FeatureExtractor fx = train_feature_extractor(sprites(0, 6, 2, Split::auxiliary), small_eval());
  return fx;
}

const Dataset& standard() {
  static const Dataset d = sprites(100, 6, 2, Split::standard);
  return d;
}

std::string value_of(const EvalReport& r, const std::string& key) {
  for (const auto& [k, v] : r.extra)
    if (k == key) return v;
  return {};
}

}  // namespace

TEST(Knn, SelfRetrievalWithKOne) {
  Rng rng(1);
  const std::size_t n = 40, dim = 6;
  std::vector<float> feats(n * dim);
  for (auto& v : feats) v = float(rng.uniform(-1, 1));
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i % 7;
  Knn knn(feats, dim, labels, 1);
  for (std::size_t i = 0; i < n; ++i)
    EXPECT_EQ(knn.rank(std::span<const float>(feats).subspan(i * dim, dim))[0], labels[i]);
}

TEST(Knn, MajorityVoteThenNearest) {
  // 1-D points: class 0 at 0, 1, 2; class 1 at 2.5; class 2 at 10
  Knn knn({0, 1, 2, 2.5f, 10}, 1, {0, 0, 0, 1, 2}, 3);
  const float q = 2.4f;
  auto r = knn.rank(std::span<const float>(&q, 1));
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r[0], 0u);  // 2 of 3 votes even though the single nearest is class 1
  EXPECT_EQ(r[1], 1u);
  EXPECT_EQ(r[2], 2u);
  EXPECT_THROW(Knn({}, 1, {}, 1), DataError);
  EXPECT_THROW(Knn({1, 2}, 1, {0, 1}, 0), ConfigError);
  EXPECT_THROW(knn.rank(std::vector<float>{1, 2}), DimensionError);
}

TEST(Report, CountsAndSummary) {
  ReportBuilder b;
  b.add(0, {0, 1, 2, 3, 4, 5});
  b.add(0, {1, 2, 3, 4, 0, 5});
  b.add(1, {5, 4, 3, 2, 0, 1});
  b.add(2, {2});
  auto r = b.finish("demo", 6, "abc", 9);
  EXPECT_DOUBLE_EQ(r.top1, 2.0 / 4);
  EXPECT_DOUBLE_EQ(r.top5, 3.0 / 4);
  ASSERT_EQ(r.per_class.size(), 3u);
  EXPECT_EQ(r.per_class[0].label, 1u);
  EXPECT_EQ(r.per_class[0].total, 2u);
  EXPECT_EQ(r.per_class[0].top5, 2u);
  EXPECT_EQ(r.per_class[1].top5, 0u);
  const auto tsv = r.to_tsv();
  for (const char* field : {"protocol\tdemo", "n_c\t6", "top1\t0.500000", "top5\t0.750000", "config_hash\tabc", "seed\t9",
                            "class\ttotal\ttop1_correct\ttop5_correct", "# top-1 accuracy 50.00%"})
    EXPECT_NE(tsv.find(field), std::string::npos) << field;
}

TEST(Report, ConfigHashStable) {
  EXPECT_EQ(config_hash("a"), config_hash("a"));
  EXPECT_NE(config_hash("a"), config_hash("b"));
  EXPECT_EQ(config_hash("").size(), 16u);
}

TEST(Eval, ConfigValidation) {
  EvalConfig c;
  EXPECT_NO_THROW(c.validate());
  c.n_c = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = EvalConfig{};
  c.fakes_per_image = 12;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Eval, FeatureExtractorContract) {
  const auto& fx = extractor();
  EXPECT_EQ(fx.dim(), 4u * 8);  // width doubles over 4 blocks
  EXPECT_GE(fx.train_accuracy, 0.0);
  auto feats = fx.extract(standard());
  EXPECT_EQ(feats.size(), standard().size() * fx.dim());
  auto again = train_feature_extractor(sprites(0, 6, 2, Split::auxiliary), small_eval());
  EXPECT_EQ(again.extract(standard()), feats);
  EXPECT_THROW(train_feature_extractor(Dataset{}, small_eval()), DataError);
}

TEST(Eval, SelectClassesSeeded) {
  Rng a(3), b(3);
  auto ca = select_classes(standard(), 4, a), cb = select_classes(standard(), 4, b);
  EXPECT_EQ(ca, cb);
  ASSERT_EQ(ca.size(), 4u);
  for (const auto& members : ca) {
    EXPECT_EQ(members.size(), 10u);
    for (auto i : members) EXPECT_EQ(standard().identity[i], standard().identity[members[0]]);
  }
  Rng c(3);
  EXPECT_THROW(select_classes(standard(), 7, c), ConfigError);
}

TEST(IdPres, IdentityGeneratorMatchesRealAccuracy) {
  IdentityGenerator gen;
  auto r = knn_idpres(standard(), gen, extractor(), small_eval());
  EXPECT_EQ(value_of(r, "real_top1"), fmt::format("{:.6f}", r.top1));
  EXPECT_EQ(value_of(r, "real_top5"), fmt::format("{:.6f}", r.top5));
  EXPECT_GE(r.top5, r.top1);
  EXPECT_EQ(r.n_c, 4u);
  std::size_t total = 0;
  for (const auto& c : r.per_class) total += c.total;
  EXPECT_EQ(total, 4u * 2 * 5);  // 2 test images per class, one fake per viewpoint
}

TEST(IdPres, ConstantGeneratorAtChance) {
  ConstantGenerator gen(0.0f);
  auto r = knn_idpres(standard(), gen, extractor(), small_eval());
  const double n = std::stod(value_of(r, "test_images"));
  EXPECT_NEAR(r.top1, 1.0 / 4, 3.0 / std::sqrt(n));
  EXPECT_GE(r.top5, r.top1);
}

TEST(IdPres, SameSeedSameReport) {
  IdentityGenerator gen;
  auto a = knn_idpres(standard(), gen, extractor(), small_eval());
  auto b = knn_idpres(standard(), gen, extractor(), small_eval());
  EXPECT_EQ(a.to_tsv(), b.to_tsv());
}

TEST(IdPres, TooManyClasses) {
  IdentityGenerator gen;
  auto cfg = small_eval();
  cfg.n_c = 7;
  EXPECT_THROW(knn_idpres(standard(), gen, extractor(), cfg), ConfigError);
}

TEST(Fewshot, InterpolationCodesConvex) {
  Rng rng(4);
  auto codes = interpolation_codes(4, 5, rng);
  ASSERT_EQ(codes.size(), 20u);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    EXPECT_NEAR(std::accumulate(codes[i].begin(), codes[i].end(), 0.0), 1.0, 1e-6);
    std::size_t nonzero = 0;
    for (float v : codes[i]) {
      EXPECT_GE(v, 0.0f);
      nonzero += v > 0;
    }
    EXPECT_LE(nonzero, 2u);
    // pair grid: t = 0, .25, .5, .75, 1
    const float largest = *std::max_element(codes[i].begin(), codes[i].end());
    const float expect_max = std::max(1.0f - 0.25f * float(i % 5), 0.25f * float(i % 5));
    EXPECT_FLOAT_EQ(largest, expect_max);
  }
  EXPECT_THROW(interpolation_codes(1, 1, rng), ConfigError);
}

TEST(Fewshot, AugmentSizesLabelsAndBits) {
  auto train = sprites(100, 3, 1, Split::standard);
  IdentityGenerator gen;
  Rng rng(5);
  auto aug = augment_fewshot(train, gen, 20, rng);
  ASSERT_EQ(aug.size(), train.size() * 21);
  for (std::size_t i = 0; i < train.size(); ++i) {
    const std::size_t base = i * 21;
    EXPECT_EQ(aug.real[base], 1);
    EXPECT_EQ(aug.identity[base], train.identity[i]);
    for (std::size_t f = 1; f <= 20; ++f) {
      EXPECT_EQ(aug.real[base + f], 0);
      EXPECT_EQ(aug.identity[base + f], train.identity[i]);
      EXPECT_LT(aug.viewpoint[base + f], 5u);
    }
  }
  EXPECT_THROW(augment_fewshot(train, gen, 7, rng), ConfigError);
  Rng r2(5);
  EXPECT_EQ(augment_fewshot(train, gen, 0, r2).size(), train.size());
}

TEST(Fewshot, SharedSplitAndBothReports) {
  IdentityGenerator gen;
  auto cfg = small_eval();
  cfg.shots = 3;
  auto [base, aug] = fewshot_eval(standard(), gen, cfg);
  EXPECT_EQ(base.protocol, "fewshot_baseline");
  EXPECT_EQ(aug.protocol, "fewshot_augmented");
  EXPECT_EQ(value_of(base, "test_images"), value_of(aug, "test_images"));
  EXPECT_EQ(value_of(base, "train_images"), "12");
  EXPECT_EQ(value_of(aug, "train_images"), "252");
  ASSERT_EQ(base.per_class.size(), aug.per_class.size());
  for (std::size_t i = 0; i < base.per_class.size(); ++i) {
    EXPECT_EQ(base.per_class[i].label, aug.per_class[i].label);
    EXPECT_EQ(base.per_class[i].total, aug.per_class[i].total);
  }
  for (const auto* r : {&base, &aug}) {
    EXPECT_GE(r->top5, r->top1);
    EXPECT_GE(r->top1, 0.0);
    EXPECT_LE(r->top5, 1.0);
  }
  auto [base2, aug2] = fewshot_eval(standard(), gen, cfg);
  EXPECT_EQ(base.to_tsv(), base2.to_tsv());
  EXPECT_EQ(aug.to_tsv(), aug2.to_tsv());
}

TEST(Fewshot, AllShotsLeavesNoTestSet) {
  IdentityGenerator gen;
  auto cfg = small_eval();
  cfg.shots = 10;
  EXPECT_THROW(fewshot_eval(standard(), gen, cfg), ConfigError);
  cfg.shots = 3;
  cfg.n_c = 9;
  EXPECT_THROW(fewshot_eval(standard(), gen, cfg), ConfigError);
}

TEST(Eval, ContactSheetLayout) {
  auto inputs = sprites(100, 2, 1, Split::standard).subset({0, 7});
  IdentityGenerator gen;
  Rng rng(6);
  auto sheet = contact_sheet(inputs, gen, 5, rng);
  EXPECT_EQ(sheet.width, 6u * 16 + 7 * 2);
  EXPECT_EQ(sheet.height, 2u * 16 + 3 * 2);
  EXPECT_THROW(contact_sheet(Dataset{}, gen, 5, rng), DataError);
}
