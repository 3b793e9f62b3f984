#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "idmorph/adam.hpp"
#include "idmorph/checkpoint.hpp"
#include "idmorph/synthdata.hpp"
#include "idmorph/training.hpp"
#include "test_util.hpp"

using namespace idmorph;
using testutil::tiny_net;

namespace {

// Rendered sprites at 16 px: 4 identities x 5 viewpoints x 2 samples.
Dataset sprite_data(std::size_t ids = 4) {
  Dataset d;
  d.image_size = 16;
  for (std::size_t id = 0; id < ids; ++id)
    for (int v = 1; v <= 5; ++v)
      for (std::uint64_t s = 0; s < 2; ++s)
        d.add(render_sample(IdentitySpec::from_index(id), v, s * 31 + id, 16), id, std::size_t(v - 1));
  return d;
}

TrainConfig tiny_train(std::uint64_t seed = 3) {
  TrainConfig c;
  c.net = tiny_net();
  c.batch_size = 4;
  c.steps = 10;
  c.checkpoint_every = 0;
  c.seed = seed;
  return c;
}

// -log softmax(row)[target], computed directly
double ce_row(const double* row, std::size_t width, std::size_t target) {
  double mx = row[0];
  for (std::size_t c = 1; c < width; ++c) mx = std::max(mx, row[c]);
  double z = 0;
  for (std::size_t c = 0; c < width; ++c) z += std::exp(row[c] - mx);
  return std::log(z) + mx - row[target];
}

double ce_mean(const Tensor<double>& logits, const std::vector<std::size_t>& target) {
  const std::size_t n = logits.dim(0), w = logits.dim(1);
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += ce_row(logits.ptr() + i * w, w, target[i]);
  return s / double(n);
}

std::vector<std::vector<double>> snapshot(const ParameterSet<double>& ps) {
  std::vector<std::vector<double>> out;
  for (const auto& [name, t] : ps.entries()) out.push_back(t->vec());
  return out;
}

}  // namespace

TEST(Adam, MatchesScriptedOracle) {
  auto p = parameter<double>({2}, {0.3, -1.2});
  ParameterSet<double> set;
  set.add("p", p);
  AdamConfig cfg{0.01, 0.5, 0.999, 1e-8};
  Adam<double> opt(set, cfg);
  double x[2] = {0.3, -1.2}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 5; ++t) {
    // loss = sum (x - 0.5)^3, gradient 3 (x - 0.5)^2
    auto gr = p->ensure_grad();
    for (int i = 0; i < 2; ++i) gr[i] = 3 * std::pow((*p)[i] - 0.5, 2);
    opt.step();
    for (int i = 0; i < 2; ++i) {
      const double g = 3 * std::pow(x[i] - 0.5, 2);
      m[i] = 0.5 * m[i] + 0.5 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.5, t)), vh = v[i] / (1 - std::pow(0.999, t));
      x[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR((*p)[i], x[i], 1e-8) << "step " << t;
    }
  }
  EXPECT_EQ(opt.steps(), 5u);
}

TEST(Adam, MissingGradientIsZero) {
  auto p = parameter<double>({1}, {2.0});
  ParameterSet<double> set;
  set.add("p", p);
  Adam<double> opt(set, {});
  opt.step();
  EXPECT_EQ((*p)[0], 2.0);
}

TEST(Checkpoint, RoundTripAllTypes) {
  Checkpoint ck;
  std::vector<float> f{1.5f, -2.25f, 3e-20f};
  std::vector<double> d{1.0 / 3, -0.0, 1e300};
  std::vector<std::uint8_t> b{0, 255, 7};
  ck.put<float>("a/f", {3}, f);
  ck.put<double>("a/d", {1, 3}, d);
  ck.put<std::uint8_t>("raw", b);
  ck.put_u64("n", 1234567890123ull);
  ck.put_string("s", "key = value\nline two");
  auto back = Checkpoint::deserialize(ck.serialize());
  EXPECT_TRUE(back == ck);
  EXPECT_EQ(back.get<float>("a/f"), f);
  EXPECT_EQ(back.get<double>("a/d"), d);
  EXPECT_TRUE(std::signbit(back.get<double>("a/d")[1]));
  EXPECT_EQ(back.get_u64("n"), 1234567890123ull);
  EXPECT_EQ(back.get_string("s"), "key = value\nline two");
  EXPECT_EQ(back.entry("a/d").dims, (std::vector<std::uint64_t>{1, 3}));
}

TEST(Checkpoint, LookupErrors) {
  Checkpoint ck;
  ck.put_u64("n", 1);
  EXPECT_THROW(ck.get<double>("missing"), DataError);
  EXPECT_THROW(ck.get<double>("n"), FormatError);
}

TEST(Checkpoint, HeaderValidation) {
  Checkpoint ck;
  ck.put_u64("n", 1);
  auto bytes = ck.serialize();
  ASSERT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "MGCK");
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(Checkpoint::deserialize(bad), FormatError);
  auto ver = bytes;
  ver[4] = 99;
  EXPECT_THROW(Checkpoint::deserialize(ver), FormatError);
  for (std::size_t cut : {std::size_t(6), bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> t(bytes.begin(), bytes.begin() + static_cast<long>(cut));
    EXPECT_THROW(Checkpoint::deserialize(t), CorruptionError) << cut;
  }
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(Checkpoint::deserialize(extra), CorruptionError);
}

TEST(Checkpoint, FileErrorsNamePath) {
  auto dir = testutil::scratch_dir("ckpt_files");
  EXPECT_THROW(Checkpoint::load(dir / "nope.mgck"), IoError);
  {
    std::ofstream f(dir / "junk.mgck", std::ios::binary);
    f << "JUNKJUNKJUNK";
  }
  try {
    Checkpoint::load(dir / "junk.mgck");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("junk.mgck"), std::string::npos);
  }
}

TEST(Training, ConfigValidation) {
  auto c = tiny_train();
  c.batch_size = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_train();
  c.lr = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_train();
  c.lambda = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Training, LabelErrorsNameRow) {
  try {
    check_labels({0, 1, 4}, {0, 0, 0}, 4, 5);
    FAIL();
  } catch (const LabelError& e) {
    EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos);
  }
  EXPECT_THROW(check_labels({0}, {5}, 4, 5), LabelError);
  Trainer<double> tr(tiny_train());
  auto b = tr.sample_batch(sprite_data());
  b.identity[1] = 4;
  EXPECT_THROW(tr.d_step(b), LabelError);
}

TEST(Training, DiscriminatorLossMatchesScriptedCe) {
  for (double lambda : {5.0, 0.0}) {
    auto cfg = tiny_train();
    cfg.lambda = lambda;
    Trainer<double> tr(cfg);
    auto b = tr.sample_batch(sprite_data());
    Graph<double> off(false);
    auto fake = tr.generator().generate(off, b.images, b.z, b.code, Mode::train);
    auto real = tr.discriminator().discriminate(off, b.images);
    auto gen = tr.discriminator().discriminate(off, fake);
    const std::vector<std::size_t> fake_class(b.images->dim(0), cfg.net.num_identities);
    const double expect = ce_mean(*real.identity, b.identity) + lambda * ce_mean(*real.attribute, b.viewpoint) +
                          ce_mean(*gen.identity, fake_class);
    auto g_before = snapshot(tr.generator().parameters());
    auto d_before = snapshot(tr.discriminator().parameters());
    EXPECT_NEAR(tr.d_step(b), expect, 1e-6);
    EXPECT_EQ(snapshot(tr.generator().parameters()), g_before);
    EXPECT_NE(snapshot(tr.discriminator().parameters()), d_before);
  }
}

TEST(Training, GeneratorLossMatchesScriptedCe) {
  for (double lambda : {5.0, 0.0}) {
    auto cfg = tiny_train();
    cfg.lambda = lambda;
    Trainer<double> tr(cfg);
    auto b = tr.sample_batch(sprite_data());
    tr.d_step(b);
    Graph<double> off(false);
    auto fake = tr.generator().generate(off, b.images, b.z, b.code, Mode::train);
    auto logits = tr.discriminator().discriminate(off, fake);
    const double expect = lambda * ce_mean(*logits.attribute, b.target) + ce_mean(*logits.identity, b.identity);
    auto d_before = snapshot(tr.discriminator().parameters());
    EXPECT_NEAR(tr.g_step(b), expect, 1e-6);
    EXPECT_EQ(snapshot(tr.discriminator().parameters()), d_before);
  }
}

TEST(Training, ConfidentCorrectLogitsGiveZeroLoss) {
  auto logits = tensor_new<double>({2, 3}, std::vector<double>{50, 0, 0, 0, 0, 50});
  Graph<double> g(false);
  EXPECT_LT(cross_entropy_logits(g, logits, {0, 2})->item(), 1e-20);
}

TEST(Training, SampledBatchContract) {
  Trainer<double> tr(tiny_train());
  auto b = tr.sample_batch(sprite_data());
  EXPECT_EQ(b.images->shape(), (Shape{4, 3, 16, 16}));
  EXPECT_EQ(b.z->shape(), (Shape{4, 4}));
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0;
    for (std::size_t a = 0; a < 5; ++a) s += (*b.code)[i * 5 + a];
    EXPECT_EQ(s, 1.0);
    EXPECT_EQ((*b.code)[i * 5 + b.target[i]], 1.0);
  }
  Dataset wrong;
  wrong.image_size = 32;
  wrong.add(std::vector<float>(3 * 32 * 32), 0, 0);
  EXPECT_THROW(tr.sample_batch(wrong), ConfigError);
  EXPECT_THROW(tr.sample_batch(Dataset{}), DataError);
}

TEST(Training, EveryGeneratorTensorGetsGradient) {
  for (auto a : {Ablation::full, Ablation::global_nc}) {
    auto cfg = tiny_train();
    cfg.net.ablation = a;
    Trainer<double> tr(cfg);
    auto b = tr.sample_batch(sprite_data());
    tr.g_step(b);
    for (const auto& [name, t] : tr.generator().parameters().entries()) {
      ASSERT_FALSE(t->grad().empty()) << name;
      bool nonzero = false;
      for (double v : t->grad()) nonzero = nonzero || v != 0.0;
      EXPECT_TRUE(nonzero) << name;
    }
  }
}

TEST(Training, IdentityLossDecreasesWithFrozenDiscriminator) {
  auto cfg = tiny_train();
  cfg.lambda = 0;
  Trainer<double> tr(cfg);
  auto b = tr.sample_batch(sprite_data());
  auto d_before = snapshot(tr.discriminator().parameters());
  double prev = tr.g_step(b);
  for (int i = 0; i < 20; ++i) {
    const double cur = tr.g_step(b);
    EXPECT_LT(cur, prev) << "step " << i;
    prev = cur;
  }
  EXPECT_EQ(snapshot(tr.discriminator().parameters()), d_before);
}

TEST(Training, ZeroStepsLeavesInitialization) {
  auto cfg = tiny_train();
  cfg.steps = 0;
  Trainer<float> tr(cfg);
  const auto before = tr.to_checkpoint();
  tr.train(sprite_data());
  EXPECT_EQ(tr.step_count(), 0u);
  EXPECT_TRUE(tr.to_checkpoint() == before);
}

TEST(Training, MetricsLogDeterministic) {
  auto dir = testutil::scratch_dir("train_determinism");
  auto data = sprite_data();
  for (const char* name : {"a.tsv", "b.tsv"}) {
    auto cfg = tiny_train(11);
    cfg.steps = 50;
    Trainer<float> tr(cfg);
    tr.train(data, {dir / name, {}, {}});
  }
  const auto a = testutil::slurp(dir / "a.tsv");
  EXPECT_EQ(a, testutil::slurp(dir / "b.tsv"));
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 50);
  std::istringstream in(a);
  std::size_t step;
  double d, g;
  while (in >> step >> d >> g) {
    EXPECT_TRUE(std::isfinite(d));
    EXPECT_TRUE(std::isfinite(g));
  }
}

TEST(Training, CheckpointRoundTripIsBitExact) {
  auto dir = testutil::scratch_dir("train_ckpt");
  Trainer<double> tr(tiny_train());
  tr.train(sprite_data());
  auto ck = tr.to_checkpoint();
  ck.save(dir / "t.mgck");
  auto loaded = Checkpoint::load(dir / "t.mgck");
  EXPECT_TRUE(loaded == ck);
  auto again = Trainer<double>::from_checkpoint(loaded);
  EXPECT_EQ(again.step_count(), tr.step_count());
  EXPECT_TRUE(again.to_checkpoint() == ck);
  EXPECT_THROW(Trainer<float>(tiny_train()).restore(ck), FormatError);
}

TEST(Training, ResumeMatchesUninterrupted) {
  auto dir = testutil::scratch_dir("train_resume");
  auto data = sprite_data();
  auto cfg = tiny_train(5);
  cfg.steps = 15;
  Trainer<double> straight(cfg);
  straight.train(data, {dir / "straight.tsv", {}, {}});

  auto first = cfg;
  first.steps = 5;
  Trainer<double> part(first);
  part.train(data, {dir / "resumed.tsv", {}, {}});
  auto ck = part.to_checkpoint();
  ck.save(dir / "mid.mgck");
  auto resumed = Trainer<double>::from_checkpoint(Checkpoint::load(dir / "mid.mgck"));
  // the stored config says 5 steps; continue to 15 with everything else equal
  Trainer<double> cont(cfg);
  cont.restore(Checkpoint::load(dir / "mid.mgck"));
  cont.train(data, {dir / "resumed.tsv", {}, {}});

  EXPECT_EQ(testutil::slurp(dir / "straight.tsv"), testutil::slurp(dir / "resumed.tsv"));
  EXPECT_TRUE(cont.to_checkpoint().serialize() == straight.to_checkpoint().serialize());
  EXPECT_EQ(resumed.step_count(), 5u);
}

TEST(Training, PeriodicCheckpointsWritten) {
  auto dir = testutil::scratch_dir("train_periodic");
  auto cfg = tiny_train();
  cfg.steps = 6;
  cfg.checkpoint_every = 3;
  Trainer<float> tr(cfg);
  tr.train(sprite_data(), {{}, dir, {}});
  EXPECT_TRUE(std::filesystem::exists(dir / "step_3.mgck"));
  EXPECT_TRUE(std::filesystem::exists(dir / "step_6.mgck"));
  EXPECT_TRUE(Checkpoint::load(dir / "final.mgck") == tr.to_checkpoint());
  auto gen = load_generator<float>(Checkpoint::load(dir / "final.mgck"));
  EXPECT_EQ(gen.parameters().count(), tr.generator().parameters().count());
  EXPECT_EQ(config_from_checkpoint(Checkpoint::load(dir / "final.mgck")).steps, 6u);
}

TEST(Training, MetricsPathErrorNamesFile) {
  Trainer<float> tr(tiny_train());
  try {
    tr.train(sprite_data(), {"/nonexistent_dir/metrics.tsv", {}, {}});
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent_dir/metrics.tsv"), std::string::npos);
  }
}

TEST(Training, AttributeAccuracyInRange) {
  Trainer<float> tr(tiny_train());
  const double acc = attribute_accuracy(tr.discriminator(), sprite_data(), 7);
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
  EXPECT_THROW(attribute_accuracy(tr.discriminator(), Dataset{}), DataError);
}
