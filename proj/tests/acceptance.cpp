// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
// Criterion 5 trains the default 64 px model for 2000 steps; criteria 6 and 7
// reuse that model, so the whole run takes most of an hour on one core.
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <limits>
#include <optional>
#include <set>

#include <fmt/format.h>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "idmorph/aim.hpp"
#include "idmorph/cnc.hpp"
#include "idmorph/config.hpp"
#include "idmorph/gradcheck.hpp"
#include "idmorph/platform.hpp"
#include "idmorph/synthdata.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace idmorph;
using testutil::random;

namespace {

// pinned tolerances
constexpr double kGradTol = 1e-4;         // 1: max relative error
constexpr double kGradSeconds = 300;      // 1: suite runtime
constexpr double kCncTol = 1e-6;          // 2
constexpr double kBnTol = 1e-6;           // 3: degenerate AIM vs batch norm
constexpr double kMomentTol = 1e-5;       // 3: mean / variance
constexpr double kLossTol = 1e-6;         // 4
constexpr double kTrainMinutes = 60;      // 5
constexpr double kHeldoutAccuracy = 0.9;  // 5

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double ce_mean(const Tensor<double>& logits, const std::vector<std::size_t>& target) {
  const std::size_t n = logits.dim(0), w = logits.dim(1);
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.ptr() + i * w;
    const double mx = *std::max_element(row, row + w);
    double z = 0;
    for (std::size_t c = 0; c < w; ++c) z += std::exp(row[c] - mx);
    s += std::log(z) + mx - row[target[i]];
  }
  return s / double(n);
}

std::string value_of(const EvalReport& r, const std::string& key) {
  for (const auto& [k, v] : r.extra)
    if (k == key) return v;
  return {};
}

TrainConfig tiny_train(std::uint64_t seed) {
  TrainConfig c;
  c.net = testutil::tiny_net();
  c.batch_size = 4;
  c.steps = 10;
  c.checkpoint_every = 0;
  c.seed = seed;
  return c;
}

Dataset tiny_sprites() {
  Dataset d;
  d.image_size = 16;
  for (std::size_t id = 0; id < 4; ++id)
    for (int v = 1; v <= 5; ++v)
      for (std::uint64_t s = 0; s < 2; ++s)
        d.add(render_sample(IdentitySpec::from_index(id), v, s * 31 + id, 16), id, std::size_t(v - 1));
  return d;
}

// ---------------------------------------------------------------- 1

Outcome gradient_suite() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_gradcheck_suite(5, 1);
  const double secs = seconds_since(t0);
  std::set<std::string> names;
  double worst = 0;
  std::string worst_name;
  for (const auto& r : results) {
    names.insert(r.name);
    if (r.max_error > worst) worst = r.max_error, worst_name = r.name;
    o.require(r.instances >= 5, r.name + " ran on fewer than 5 instances");
    o.require(r.max_error < kGradTol, fmt::format("{} error {:.3e}", r.name, r.max_error));
  }
  for (const char* op : {"matmul", "conv2d", "conv_transpose2d", "softmax_lastdim", "pointwise_relu", "pointwise_tanh",
                         "concat_channels", "spatial_mean", "cross_entropy_logits", "cnc_forward", "global_nc_forward",
                         "aim_forward", "generator_full", "discriminator"})
    o.require(names.count(op), std::string("op ") + op + " not in the suite");
  o.require(secs < kGradSeconds, fmt::format("took {:.1f} s", secs));
  if (o.pass)
    o.detail = fmt::format("{} ops x 5 instances, worst {:.2e} ({}), {:.1f} s", results.size(), worst, worst_name, secs);
  return o;
}

// ---------------------------------------------------------------- 2

Outcome cnc_equivalence() {
  Outcome o;
  double worst_oracle = 0, worst_rows = 0, worst_global = 0;
  std::size_t cases = 0;
  for (std::size_t h : {3, 5, 8})
    for (std::size_t w : {3, 5, 8})
      for (std::size_t ch : {2, 4})
        for (int r_in : {0, 1, 2, -1}) {
          const std::size_t r = r_in < 0 ? std::max(h, w) - 1 : std::size_t(r_in);
          Rng rng(1000 + cases);
          auto p = CncParams<double>::init(3, 2, ch, r, rng);
          for (auto* t : {p.wq.get(), p.wk.get(), p.wv.get()})
            for (auto& v : t->data()) v = rng.uniform(-1, 1);
          auto x = random({2, 3, h, w}, rng), y = random({2, 2, h, w}, rng);
          Graph<double> g(false);
          auto f = cnc_forward(g, x, y, p);
          worst_oracle = std::max(worst_oracle, max_abs_diff(f->data(), cnc_oracle(*x, *y, p).data()));
          auto qkv = project_qkv(g, x, y, p);
          auto att = attention_map(*qkv.q, *qkv.k, r);
          for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t s = 0; s < h * w; ++s) {
              double sum = 0;
              for (std::size_t c = 0; c < att.side * att.side; ++c) sum += att.at(b, s, c);
              worst_rows = std::max(worst_rows, std::abs(sum - 1));
            }
          if (r_in < 0)
            worst_global = std::max(worst_global, max_abs_diff(f->data(), global_nc_forward(g, x, y, p)->data()));
          ++cases;
        }
  o.require(worst_oracle < kCncTol, fmt::format("oracle diff {:.2e}", worst_oracle));
  o.require(worst_rows < kCncTol, fmt::format("row sum off by {:.2e}", worst_rows));
  o.require(worst_global < kCncTol, fmt::format("global diff {:.2e}", worst_global));
  if (o.pass)
    o.detail = fmt::format("{} cases; oracle {:.1e}, rows {:.1e}, full vs global {:.1e}", cases, worst_oracle, worst_rows,
                           worst_global);
  return o;
}

// ---------------------------------------------------------------- 3

Outcome aim_degeneracy() {
  Outcome o;
  double worst_bn = 0, worst_mean = 0, worst_var = 0;
  Rng rng(3);
  for (auto shape : {Shape{4, 3, 6, 6}, Shape{2, 8, 4, 4}, Shape{8, 5, 2, 3}}) {
    const std::size_t n = shape[0], c = shape[1], hw = shape[2] * shape[3];
    auto p = AimParams<double>::init(c, 6, rng);
    for (auto* mlp : {&p.gamma, &p.beta}) std::fill(mlp->output.weight->vec().begin(), mlp->output.weight->vec().end(), 0.0);
    std::fill(p.gamma.output.bias->vec().begin(), p.gamma.output.bias->vec().end(), 1.0);
    std::fill(p.beta.output.bias->vec().begin(), p.beta.output.bias->vec().end(), 0.0);
    auto b = random(shape, rng, -3, 5), f = random({n, 6}, rng);
    BatchNormStats<double> plain(c);
    Graph<double> g(false);
    worst_bn = std::max(worst_bn, max_abs_diff(aim_forward(g, b, f, p, Mode::train)->data(),
                                               batch_norm(g, b, plain, Mode::train)->data()));
    auto bh = batch_normalize(g, b, p.stats, Mode::train);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double mean = 0, var = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t s = 0; s < hw; ++s) mean += (*bh)[(i * c + ch) * hw + s];
      mean /= double(n * hw);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t s = 0; s < hw; ++s) var += std::pow((*bh)[(i * c + ch) * hw + s] - mean, 2);
      var /= double(n * hw);
      worst_mean = std::max(worst_mean, std::abs(mean));
      worst_var = std::max(worst_var, std::abs(var - 1));
    }
  }
  o.require(worst_bn < kBnTol, fmt::format("AIM vs BN {:.2e}", worst_bn));
  o.require(worst_mean < kMomentTol, fmt::format("mean {:.2e}", worst_mean));
  o.require(worst_var < kMomentTol, fmt::format("variance off by {:.2e}", worst_var));
  if (o.pass) o.detail = fmt::format("AIM vs BN {:.1e}, |mean| {:.1e}, |var-1| {:.1e}", worst_bn, worst_mean, worst_var);
  return o;
}

// ---------------------------------------------------------------- 4

Outcome loss_fidelity() {
  Outcome o;
  double worst = 0;
  const auto data = tiny_sprites();
  for (double lambda : {5.0, 0.0, 1.5}) {
    auto cfg = tiny_train(3);
    cfg.lambda = lambda;
    Trainer<double> tr(cfg);
    auto b = tr.sample_batch(data);
    Graph<double> off(false);
    auto fake = tr.generator().generate(off, b.images, b.z, b.code, Mode::train);
    auto real = tr.discriminator().discriminate(off, b.images);
    auto gen = tr.discriminator().discriminate(off, fake);
    o.require(real.identity->dim(1) == cfg.net.num_identities + 1, "identity head lacks the fake class");
    const std::vector<std::size_t> fake_class(b.images->dim(0), cfg.net.num_identities);
    const double d_expect = ce_mean(*real.identity, b.identity) + lambda * ce_mean(*real.attribute, b.viewpoint) +
                            ce_mean(*gen.identity, fake_class);
    worst = std::max(worst, std::abs(tr.d_step(b) - d_expect));

    auto fake2 = tr.generator().generate(off, b.images, b.z, b.code, Mode::train);
    auto logits = tr.discriminator().discriminate(off, fake2);
    const double g_expect = lambda * ce_mean(*logits.attribute, b.target) + ce_mean(*logits.identity, b.identity);
    worst = std::max(worst, std::abs(tr.g_step(b) - g_expect));
  }
  o.require(worst < kLossTol, fmt::format("loss mismatch {:.2e}", worst));
  if (o.pass) o.detail = fmt::format("d and g losses at lambda 5, 0, 1.5; worst diff {:.1e}", worst);
  return o;
}

// ---------------------------------------------------------------- 5

struct SmokeRun {
  RunConfig cfg;
  Dataset all;
  std::optional<Trainer<float>> trainer;
};

Outcome smoke_training(const fs::path& work, SmokeRun& run) {
  Outcome o;
  // 50 rendered identities: the first 10 auxiliary ones train the model, the
  // remaining auxiliary ones train the evaluation feature extractor and the
  // 10 standard ones are the evaluation classes of criteria 6 and 7.
  const auto m = build_dataset(50, 8, work / "data", 1, 64);
  run.all = load_dataset(m.path, 64);
  auto& cfg = run.cfg;
  o.require(cfg.train.net.image_size == 64 && cfg.train.batch_size == 32 && cfg.train.steps == 2000 &&
                cfg.train.net.num_identities == 10 && cfg.train.net.num_attributes == 5,
            "default configuration drifted from the smoke setting");
  const auto aux = run.all.filter(Split::auxiliary).first_identities(cfg.train.net.num_identities).relabeled();
  Rng split_rng(mix_seed(cfg.train.seed, 3));
  auto [train_set, held_out] = split_holdout(aux, 0.1, split_rng);

  run.trainer.emplace(cfg.train);
  std::size_t non_finite = 0, logged = 0;
  TrainOptions opts;
  opts.metrics_path = work / "smoke_metrics.tsv";
  opts.on_step = [&](std::uint64_t, double d, double g) {
    ++logged;
    non_finite += !std::isfinite(d) || !std::isfinite(g);
  };
  const auto t0 = std::chrono::steady_clock::now();
  run.trainer->train(train_set, opts);
  const double minutes = seconds_since(t0) / 60;
  const double acc = attribute_accuracy(run.trainer->discriminator(), held_out);

  o.require(logged == 2000, fmt::format("{} steps logged", logged));
  o.require(non_finite == 0, fmt::format("{} non-finite losses", non_finite));
  o.require(minutes < kTrainMinutes, fmt::format("took {:.1f} min", minutes));
  o.require(acc >= kHeldoutAccuracy, fmt::format("held-out attribute accuracy {:.4f}", acc));
  if (o.pass)
    o.detail = fmt::format("2000 steps on {} images in {:.1f} min, losses finite, held-out attribute accuracy {:.4f} ({} images)",
                           train_set.size(), minutes, acc, held_out.size());
  return o;
}

// ---------------------------------------------------------------- 6

Outcome protocol_sanity(const fs::path& work, SmokeRun& run, std::unique_ptr<ImageGenerator>& trained) {
  Outcome o;
  o.require(run.trainer.has_value(), "no trained model from criterion 5");
  if (!o.pass) return o;
  const EvalConfig cfg = run.cfg.eval;
  const auto standard = run.all.filter(Split::standard);
  const auto fx = train_feature_extractor(run.all.filter(Split::auxiliary), cfg);

  IdentityGenerator ident;
  auto r_id = knn_idpres(standard, ident, fx, cfg);
  o.require(value_of(r_id, "real_top1") == fmt::format("{:.6f}", r_id.top1),
            fmt::format("identity top1 {:.6f} vs real {}", r_id.top1, value_of(r_id, "real_top1")));

  ConstantGenerator constant(0.0f);
  auto r_const = knn_idpres(standard, constant, fx, cfg);
  const double n = std::stod(value_of(r_const, "test_images"));
  const double chance = 1.0 / double(cfg.n_c);
  o.require(std::abs(r_const.top1 - chance) <= 3 / std::sqrt(n),
            fmt::format("constant top1 {:.4f} outside {:.4f} +- {:.4f}", r_const.top1, chance, 3 / std::sqrt(n)));

  trained = std::make_unique<NetworkGenerator>(load_generator<float>(run.trainer->to_checkpoint()));
  auto r_net = knn_idpres(standard, *trained, fx, cfg);
  r_net.extra.emplace_back("extractor_train_accuracy", fmt::format("{:.6f}", fx.train_accuracy));
  r_net.write(work / "idpres_trained.tsv");
  o.require(r_net.top1 > r_const.top1, fmt::format("trained top1 {:.4f} not above constant {:.4f}", r_net.top1, r_const.top1));
  for (const auto* r : {&r_id, &r_const, &r_net}) o.require(r->top5 >= r->top1, r->protocol + " top5 < top1");
  if (o.pass)
    o.detail = fmt::format("N_c {}: identity {:.4f} = real, constant {:.4f} (chance {:.2f}, n {}), trained {:.4f}",
                           cfg.n_c, r_id.top1, r_const.top1, chance, n, r_net.top1);
  return o;
}

// ---------------------------------------------------------------- 7

Outcome fewshot_harness(const fs::path& work, SmokeRun& run, ImageGenerator* trained) {
  Outcome o;
  IdentityGenerator fallback;
  ImageGenerator& gen = trained ? *trained : fallback;
  if (!trained) o.require(false, "no trained model; harness exercised with the identity generator");
  EvalConfig cfg = run.cfg.eval;
  cfg.n_c = 10;
  cfg.shots = 5;
  const auto standard = run.all.filter(Split::standard);

  // augmentation contract on a 10 x 5 train set
  Dataset train;
  train.image_size = standard.image_size;
  {
    Rng pick(cfg.seed);
    const auto classes = select_classes(standard, cfg.n_c, pick);
    for (std::size_t c = 0; c < classes.size(); ++c)
      for (std::size_t j = 0; j < cfg.shots; ++j) train.add(standard.image(classes[c][j]), c, standard.viewpoint[classes[c][j]]);
  }
  Rng aug_rng(11);
  const auto aug = augment_fewshot(train, gen, cfg.fakes_per_image, aug_rng);
  o.require(aug.size() == train.size() * 21, fmt::format("augmented size {} for {} reals", aug.size(), train.size()));
  std::size_t bad_labels = 0, bad_bits = 0;
  for (std::size_t i = 0; i < train.size() && aug.size() == train.size() * 21; ++i)
    for (std::size_t f = 0; f <= 20; ++f) {
      bad_labels += aug.identity[i * 21 + f] != train.identity[i];
      bad_bits += aug.real[i * 21 + f] != (f == 0 ? 1 : 0);
    }
  o.require(bad_labels == 0, fmt::format("{} wrong labels", bad_labels));
  o.require(bad_bits == 0, fmt::format("{} wrong real/fake bits", bad_bits));

  // full pipeline; both runs must see one split
  const auto t0 = std::chrono::steady_clock::now();
  const auto [base, treat] = fewshot_eval(standard, gen, cfg);
  const double secs = seconds_since(t0);
  base.write(work / "fewshot_baseline.tsv");
  treat.write(work / "fewshot_augmented.tsv");
  o.require(fs::exists(work / "fewshot_baseline.tsv") && fs::exists(work / "fewshot_augmented.tsv"), "reports missing");
  Rng pick(cfg.seed);
  std::size_t expect_test = 0;
  for (const auto& members : select_classes(standard, cfg.n_c, pick)) expect_test += members.size() - cfg.shots;
  o.require(value_of(base, "test_images") == std::to_string(expect_test) &&
                value_of(treat, "test_images") == std::to_string(expect_test),
            "test split differs from the seeded class selection");
  bool same_split = base.per_class.size() == treat.per_class.size();
  for (std::size_t i = 0; same_split && i < base.per_class.size(); ++i)
    same_split = base.per_class[i].label == treat.per_class[i].label && base.per_class[i].total == treat.per_class[i].total;
  o.require(same_split, "baseline and augmented per-class splits differ");
  o.require(value_of(treat, "train_images") == std::to_string(std::stoul(value_of(base, "train_images")) * 21),
            "augmented train set is not 21x the baseline");
  if (o.pass)
    o.detail = fmt::format("augment 21x ok; 10-way 5-shot top1 baseline {:.4f}, augmented {:.4f} on {} test images ({:.0f} s)",
                           base.top1, treat.top1, expect_test, secs);
  return o;
}

// ---------------------------------------------------------------- 8

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(IDMORPH_BIN) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string digest(const fs::path& p) { return fmt::format("{:016x}", testutil::fnv1a(testutil::slurp(p))); }

Outcome determinism(const fs::path& work) {
  Outcome o;
  const auto data = tiny_sprites();

  // checkpoint round trip
  {
    Trainer<double> tr(tiny_train(4));
    tr.train(data);
    const auto ck = tr.to_checkpoint();
    ck.save(work / "rt.mgck");
    const auto back = Checkpoint::load(work / "rt.mgck");
    o.require(back == ck && back.serialize() == ck.serialize(), "checkpoint bytes changed on save/load");
    o.require(Trainer<double>::from_checkpoint(back).to_checkpoint().serialize() == ck.serialize(),
              "trainer rebuilt from a checkpoint serializes differently");
  }

  // resume: 5 steps, save, load, 10 more == 15 straight
  {
    auto cfg = tiny_train(5);
    cfg.steps = 15;
    Trainer<double> straight(cfg);
    std::vector<std::pair<double, double>> a, b;
    TrainOptions oa;
    oa.on_step = [&](std::uint64_t, double d, double g) { a.emplace_back(d, g); };
    straight.train(data, oa);
    auto first = cfg;
    first.steps = 5;
    Trainer<double> part(first);
    TrainOptions ob;
    ob.on_step = [&](std::uint64_t, double d, double g) { b.emplace_back(d, g); };
    part.train(data, ob);
    part.to_checkpoint().save(work / "mid.mgck");
    Trainer<double> cont(cfg);
    cont.restore(Checkpoint::load(work / "mid.mgck"));
    cont.train(data, ob);
    o.require(a == b, "resumed losses differ from the uninterrupted run");
    o.require(cont.to_checkpoint().serialize() == straight.to_checkpoint().serialize(), "resumed final state differs");
  }

  // every CLI command twice under a fixed seed
  const std::string tiny =
      " --set image_size=16 --set blocks=2 --set base_channels=4 --set id_dim=6 --set noise_dim=4"
      " --set num_identities=4 --set cnc_placement=8 --set cnc_radius=1 --set batch_size=4 --set checkpoint_every=0"
      " --set extractor_steps=20 --set classifier_steps=10 --set classifier_width=4 --set n_c=2 --set seed=9";
  std::vector<std::string> digests[2];
  for (int rep = 0; rep < 2; ++rep) {
    const auto d = work / fmt::format("cli{}", rep);
    fs::create_directories(d);
    const auto manifest = (d / "data" / "manifest.csv").string();
    const auto ckpt = (d / "train" / "checkpoints" / "final.mgck").string();
    const std::vector<std::pair<std::string, std::string>> cmds = {
        {"gen-data", "gen-data --identities 10 --per-cell 2 --image-size 16 --seed 4 --out " + (d / "data").string()},
        {"train", "train --data " + manifest + tiny + " --steps 4 --out " + (d / "train").string()},
        {"generate", "generate --checkpoint " + ckpt + " --data " + manifest + " --count 2 --seed 3 --out " + (d / "gen").string()},
        {"eval-idpres", "eval-idpres --data " + manifest + tiny + " --checkpoint " + ckpt + " --out " + (d / "idpres").string()},
        {"eval-fewshot", "eval-fewshot --data " + manifest + tiny + " --checkpoint " + ckpt + " --shots 3 --out " + (d / "fewshot").string()},
        {"gradcheck", "gradcheck --seed 2 --out " + (d / "gradcheck.tsv").string()},
    };
    for (const auto& [name, args] : cmds) {
      const int code = run_cli(args, d / (name + ".log"));
      if (rep == 0) o.require(code == 0, fmt::format("{} exited {}", name, code));
    }
    for (const char* f : {"data/manifest.csv", "train/checkpoints/final.mgck", "train/metrics.tsv", "train/train_summary.tsv",
                          "gen/contact_sheet.png", "idpres/idpres_report.tsv", "fewshot/fewshot_baseline.tsv",
                          "fewshot/fewshot_augmented.tsv", "gradcheck.tsv"})
      digests[rep].push_back(std::string(f) + " " + (fs::exists(d / f) ? digest(d / f) : "missing"));
    digests[rep].push_back("data/ " + testutil::tree_digest(d / "data"));
  }
  for (std::size_t i = 0; i < digests[0].size(); ++i) {
    o.require(digests[0][i] == digests[1][i], "not reproducible: " + digests[0][i] + " vs " + digests[1][i]);
    o.require(digests[0][i].find("missing") == std::string::npos, "no output: " + digests[0][i]);
  }
  if (o.pass)
    o.detail = fmt::format("checkpoint bytes stable, 5+10 resume equals 15 steps at 64-bit, {} CLI outputs checksum-identical",
                           digests[0].size());
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  // optional arguments: criterion numbers to run (default all)
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg.empty() || arg.find_first_not_of("0123456789") != std::string::npos || std::stoul(arg) < 1 || std::stoul(arg) > 8) {
      std::fprintf(stderr, "usage: %s [criterion 1..8 ...]\n", argv[0]);
      return 2;
    }
    only.insert(std::stoul(arg));
  }

  tune_allocator();
  spdlog::set_default_logger(spdlog::stderr_logger_mt("acceptance"));
  spdlog::set_pattern("[%H:%M:%S] [%l] %v");
  if (const char* lvl = std::getenv("IDMORPH_LOG_LEVEL")) spdlog::set_level(spdlog::level::from_str(lvl));

  const auto work = fs::temp_directory_path() / "idmorph_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);

  SmokeRun smoke;
  std::unique_ptr<ImageGenerator> trained;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"cnc oracle equivalence", cnc_equivalence},
      {"aim degeneracy", aim_degeneracy},
      {"loss fidelity", loss_fidelity},
      {"smoke training", [&] { return smoke_training(work, smoke); }},
      {"protocol sanity", [&] { return protocol_sanity(work, smoke, trained); }},
      {"few-shot harness", [&] { return fewshot_harness(work, smoke, trained.get()); }},
      {"determinism and persistence", [&] { return determinism(work); }},
  };
  int failures = 0;
  std::size_t ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    ++ran;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    failures += !o.pass;
    std::printf("criterion %zu %-28s %s  %s [%.0f s]\n", i + 1, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL",
                o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  std::printf("%zu of %zu criteria passed\n", ran - std::size_t(failures), ran);
  return failures == 0 ? 0 : 1;
}
