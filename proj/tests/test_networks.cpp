#include <gtest/gtest.h>

#include <cmath>

#include "idmorph/networks.hpp"
#include "test_util.hpp"

using namespace idmorph;
using testutil::random;
using testutil::tiny_net;

namespace {

TensorPtr<double> one_hot(std::size_t n, std::size_t na, std::size_t hot) {
  auto c = tensor_new<double>({n, na});
  for (std::size_t i = 0; i < n; ++i) (*c)[i * na + hot] = 1;
  return c;
}

double l2(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += std::pow(a[i] - b[i], 2);
  return std::sqrt(s);
}

}  // namespace

TEST(Networks, AblationNamesRoundTrip) {
  for (auto a : {Ablation::full, Ablation::vanilla, Ablation::global_nc, Ablation::unet, Ablation::cnc_only})
    EXPECT_EQ(parse_ablation(to_string(a)), a);
  EXPECT_THROW(parse_ablation("resnet"), ConfigError);
}

TEST(Networks, ConfigValidation) {
  auto c = tiny_net();
  c.link_resolutions = {6};
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_net();
  c.image_size = 18;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_net();
  c.link_radii = {1, 2};
  EXPECT_THROW(c.validate(), ConfigError);
  NetConfig d;
  EXPECT_EQ(d.radius_for(0), 4u);  // 16x16 link
}

TEST(Networks, EncodeShapes) {
  Rng rng(1);
  auto cfg = tiny_net();
  Generator<double> gen(cfg, rng);
  Graph<double> g(false);
  auto enc = gen.encode(g, random({3, 3, 16, 16}, rng));
  EXPECT_EQ(enc.f_id->shape(), (Shape{3, cfg.id_dim}));
  ASSERT_EQ(enc.blocks.size(), cfg.blocks);
  EXPECT_EQ(enc.blocks[0]->shape(), (Shape{3, 4, 8, 8}));
  EXPECT_EQ(enc.blocks[1]->shape(), (Shape{3, 8, 4, 4}));
}

TEST(Networks, EncodeDeterministicAndFinite) {
  Rng rng(2);
  Generator<double> gen(tiny_net(), rng);
  auto img = random({1, 3, 16, 16}, rng);
  auto twice = tensor_new<double>({2, 3, 16, 16});
  std::copy(img->vec().begin(), img->vec().end(), twice->vec().begin());
  std::copy(img->vec().begin(), img->vec().end(), twice->vec().begin() + 768);
  Graph<double> g(false);
  auto f = gen.encode(g, twice).f_id;
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ((*f)[i], (*f)[6 + i]);
  auto z = gen.encode(g, tensor_new<double>({1, 3, 16, 16})).f_id;
  for (double v : z->data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Networks, WrongImageSize) {
  Rng rng(3);
  Generator<double> gen(tiny_net(), rng);
  Discriminator<double> disc(tiny_net(), rng);
  Graph<double> g(false);
  EXPECT_THROW(gen.encode(g, random({1, 3, 32, 32}, rng)), DimensionError);
  EXPECT_THROW(disc.discriminate(g, random({1, 1, 16, 16}, rng)), DimensionError);
}

class AblationRun : public ::testing::TestWithParam<Ablation> {};

TEST_P(AblationRun, GenerateContract) {
  Rng rng(4);
  auto cfg = tiny_net(GetParam());
  Generator<double> gen(cfg, rng);
  auto img = random({3, 3, 16, 16}, rng);
  auto z = random({3, cfg.noise_dim}, rng);
  Graph<double> g(false);
  auto out = gen.generate(g, img, z, one_hot(3, 5, 1), Mode::train);
  EXPECT_EQ(out->shape(), img->shape());
  for (double v : out->data()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  auto a = gen.generate(g, img, z, one_hot(3, 5, 1), Mode::eval);
  auto b = gen.generate(g, img, z, one_hot(3, 5, 1), Mode::eval);
  EXPECT_EQ(a->vec(), b->vec());
  auto other_z = gen.generate(g, img, random({3, cfg.noise_dim}, rng), one_hot(3, 5, 1), Mode::eval);
  EXPECT_GT(l2(*a, *other_z), 0.0);
  auto other_c = gen.generate(g, img, z, one_hot(3, 5, 4), Mode::eval);
  EXPECT_GT(l2(*a, *other_c), 0.0);
}

INSTANTIATE_TEST_SUITE_P(All, AblationRun,
                         ::testing::Values(Ablation::full, Ablation::vanilla, Ablation::global_nc, Ablation::unet,
                                           Ablation::cnc_only),
                         [](const auto& info) { return to_string(info.param); });

TEST(Networks, InterpolatedCodesAccepted) {
  Rng rng(5);
  auto cfg = tiny_net();
  Generator<double> gen(cfg, rng);
  auto code = tensor_new<double>({2, 5});
  (*code)[0] = 0.25;
  (*code)[3] = 0.75;
  (*code)[5 + 2] = 1;
  Graph<double> g(false);
  EXPECT_NO_THROW(gen.generate(g, random({2, 3, 16, 16}, rng), random({2, cfg.noise_dim}, rng), code, Mode::eval));
}

TEST(Networks, DiscriminatorHeads) {
  Rng rng(6);
  auto cfg = tiny_net();
  Discriminator<double> disc(cfg, rng);
  auto x = random({3, 3, 16, 16}, rng);
  Graph<double> g(false);
  auto out = disc.discriminate(g, x);
  EXPECT_EQ(out.identity->shape(), (Shape{3, cfg.num_identities + 1}));
  EXPECT_EQ(out.attribute->shape(), (Shape{3, cfg.num_attributes}));
  auto p = softmax_lastdim(g, out.identity);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0;
    for (std::size_t c = 0; c <= cfg.num_identities; ++c) s += (*p)[r * (cfg.num_identities + 1) + c];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  auto again = disc.discriminate(g, x);
  EXPECT_EQ(out.attribute->vec(), again.attribute->vec());
}

TEST(Networks, ParameterNamesUnique) {
  Rng rng(7);
  Generator<double> gen(tiny_net(), rng);
  auto ps = gen.parameters();
  std::set<std::string> names;
  for (const auto& [name, t] : ps.entries()) EXPECT_TRUE(names.insert(name).second) << name;
  EXPECT_TRUE(names.count("gen.link0.wq"));
  EXPECT_TRUE(names.count("gen.aim0.tau.0.weight"));
}

TEST(Networks, ParameterCountFormulaMatches) {
  for (auto a : {Ablation::full, Ablation::vanilla, Ablation::global_nc, Ablation::unet, Ablation::cnc_only}) {
    Rng rng(8);
    auto cfg = tiny_net(a);
    Generator<double> gen(cfg, rng);
    EXPECT_EQ(Generator<double>::parameter_count(cfg, gen.latent_hidden_width()), gen.parameters().count())
        << to_string(a);
  }
}

TEST(Networks, AblationCapacityWithinTenPercent) {
  NetConfig full;  // desk-scale default
  Rng rng(9);
  const double ref = double(Generator<float>(full, rng).parameters().count());
  for (auto a : {Ablation::vanilla, Ablation::global_nc, Ablation::unet, Ablation::cnc_only}) {
    auto c = full;
    c.ablation = a;
    Rng r2(9);
    const double n = double(Generator<float>(c, r2).parameters().count());
    EXPECT_LT(std::abs(n - ref) / ref, 0.10) << to_string(a) << " " << n << " vs " << ref;
  }
}
