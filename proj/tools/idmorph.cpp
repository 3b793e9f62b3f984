// idmorph command-line entry point.
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "idmorph/config.hpp"
#include "idmorph/gradcheck.hpp"
#include "idmorph/image_io.hpp"
#include "idmorph/platform.hpp"
#include "idmorph/synthdata.hpp"

namespace fs = std::filesystem;
using namespace idmorph;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  std::string data;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "key=value configuration file");
  cmd->add_option("--set", c.overrides, "override a configuration key (key=value), repeatable");
  cmd->add_option("--out", c.out, "output directory (default: runs/<timestamp>-<config hash>)");
}

RunConfig resolve_config(const Common& c) {
  RunConfig cfg;
  if (!c.config_path.empty()) cfg = load_run_config(c.config_path);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!c.data.empty()) cfg.data = c.data;
  if (!c.out.empty()) cfg.out = c.out;
  cfg.validate();
  return cfg;
}

fs::path run_dir(const RunConfig& cfg, const std::string& command) {
  fs::path dir = cfg.out;
  if (dir.empty()) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
    dir = fs::path("runs") / fmt::format("{}-{}-{}", stamp, command, config_hash(to_text(cfg)).substr(0, 8));
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

Dataset require_data(const RunConfig& cfg) {
  if (cfg.data.empty()) throw ConfigError("no dataset: pass --data <manifest.csv> or set data = ... in the config");
  return load_dataset(cfg.data, cfg.train.net.image_size, cfg.train.net.num_attributes);
}

// Auxiliary split restricted to the first num_identities identities, relabeled.
Dataset training_set(const RunConfig& cfg, const Dataset& all) {
  const auto aux = all.filter(Split::auxiliary);
  const auto n_avail = aux.identities().size();
  if (n_avail < cfg.train.net.num_identities) {
    throw ConfigError(fmt::format("num_identities = {} but the auxiliary split has only {} identities",
                                  cfg.train.net.num_identities, n_avail));
  }
  return aux.first_identities(cfg.train.net.num_identities).relabeled();
}

std::unique_ptr<ImageGenerator> make_generator(const std::string& kind, const std::string& checkpoint,
                                               const RunConfig& cfg) {
  if (kind == "identity") return std::make_unique<IdentityGenerator>();
  if (kind == "constant") return std::make_unique<ConstantGenerator>(0.0f);
  if (kind != "network") throw ConfigError("--generator must be network, identity or constant");
  if (checkpoint.empty()) throw ConfigError("--checkpoint is required for the network generator");
  auto ck = Checkpoint::load(checkpoint);
  auto gen = load_generator<float>(ck);
  if (gen.config().image_size != cfg.train.net.image_size || gen.config().num_attributes != cfg.train.net.num_attributes) {
    throw ConfigError("checkpoint image size / attribute count differ from the configuration");
  }
  return std::make_unique<NetworkGenerator>(std::move(gen));
}

// The checkpoint's architecture wins over the config for network-shape keys.
void adopt_checkpoint_net(RunConfig& cfg, const std::string& checkpoint, const std::string& kind) {
  if (kind != "network" || checkpoint.empty()) return;
  cfg.train.net = config_from_checkpoint(Checkpoint::load(checkpoint)).net;
}

}  // namespace

int main(int argc, char** argv) {
  idmorph::tune_allocator();
  auto logger = spdlog::stderr_logger_mt("idmorph");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S] [%l] %v");
  if (const char* lvl = std::getenv("IDMORPH_LOG_LEVEL")) spdlog::set_level(spdlog::level::from_str(lvl));

  CLI::App app{"idmorph: identity-preserving image transformation toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen_data = app.add_subcommand("gen-data", "render the synthetic sprite dataset");
  std::size_t identities = 50, per_cell = 4, image_size = 64;
  std::uint64_t data_seed = 1;
  std::string data_out;
  gen_data->add_option("--identities", identities, "number of identities")->check(CLI::Range(2, 100000));
  gen_data->add_option("--per-cell", per_cell, "samples per identity and viewpoint")->check(CLI::Range(1, 100000));
  gen_data->add_option("--image-size", image_size, "image side in pixels")->check(CLI::Range(8, 1024));
  gen_data->add_option("--seed", data_seed, "jitter seed");
  gen_data->add_option("--out", data_out, "output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "adversarial training");
  Common train_c;
  add_common(train, train_c);
  train->add_option("--data", train_c.data, "dataset manifest");
  std::string ablation, resume;
  std::size_t steps = 0;
  std::uint64_t train_seed = 0;
  auto* steps_opt = train->add_option("--steps", steps, "total training steps");
  auto* seed_opt = train->add_option("--seed", train_seed, "training seed");
  train->add_option("--ablation", ablation, "full | vanilla | global_nc | unet | cnc_only");
  train->add_option("--resume", resume, "checkpoint to resume from");

  // generate
  auto* generate = app.add_subcommand("generate", "contact sheets over all viewpoints");
  Common gen_c;
  add_common(generate, gen_c);
  std::string gen_ckpt;
  std::vector<std::string> gen_images;
  std::size_t gen_count = 8;
  std::uint64_t gen_seed = 0;
  generate->add_option("--checkpoint", gen_ckpt, "trained checkpoint")->required();
  generate->add_option("--images", gen_images, "input PNG files");
  generate->add_option("--data", gen_c.data, "dataset manifest (inputs taken from the standard split)");
  generate->add_option("--count", gen_count, "number of inputs taken from --data")->check(CLI::Range(1, 10000));
  generate->add_option("--seed", gen_seed, "noise seed");

  // eval-idpres
  auto* idpres = app.add_subcommand("eval-idpres", "KNN identity-preservation protocol");
  Common id_c;
  add_common(idpres, id_c);
  std::string id_ckpt, id_kind = "network";
  std::size_t nc = 0, knn_k = 0;
  idpres->add_option("--data", id_c.data, "dataset manifest");
  idpres->add_option("--checkpoint", id_ckpt, "trained checkpoint");
  idpres->add_option("--generator", id_kind, "network | identity | constant");
  auto* nc_opt = idpres->add_option("--nc", nc, "number of classes N_c");
  auto* k_opt = idpres->add_option("--k", knn_k, "KNN neighbours");

  // eval-fewshot
  auto* fewshot = app.add_subcommand("eval-fewshot", "few-shot learning with generative augmentation");
  Common fs_c;
  add_common(fewshot, fs_c);
  std::string fs_ckpt, fs_kind = "network";
  std::size_t fs_nc = 0, shots = 0;
  fewshot->add_option("--data", fs_c.data, "dataset manifest");
  fewshot->add_option("--checkpoint", fs_ckpt, "trained checkpoint");
  fewshot->add_option("--generator", fs_kind, "network | identity | constant");
  auto* fs_nc_opt = fewshot->add_option("--nc", fs_nc, "number of classes N_c");
  auto* shots_opt = fewshot->add_option("--shots", shots, "images per class s");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  std::size_t instances = 5;
  std::uint64_t gc_seed = 1;
  std::string gc_filter, gc_out;
  gradcheck->add_option("--instances", instances, "random instances per op")->check(CLI::Range(1, 1000));
  gradcheck->add_option("--seed", gc_seed, "seed");
  gradcheck->add_option("--filter", gc_filter, "only ops whose name contains this text");
  gradcheck->add_option("--out", gc_out, "write the result table to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen_data) {
      const auto m = build_dataset(identities, per_cell, data_out, data_seed, image_size);
      spdlog::info("wrote {} images ({} auxiliary / {} standard identities) and {}", m.rows.size(),
                   m.auxiliary_identities, m.standard_identities, m.path.string());
      std::cout << m.path.string() << "\n";
    } else if (*train) {
      auto cfg = resolve_config(train_c);
      if (*steps_opt) cfg.train.steps = steps;
      if (*seed_opt) cfg.train.seed = train_seed;
      if (!ablation.empty()) cfg.train.net.ablation = parse_ablation(ablation);
      cfg.validate();
      const auto dir = run_dir(cfg, "train");
      write_text(dir / "config.txt", to_text(cfg));
      const auto all = require_data(cfg);
      Rng split_rng(mix_seed(cfg.train.seed, 3));
      auto [train_set, held_out] = split_holdout(training_set(cfg, all), 0.1, split_rng);
      Trainer<float> trainer(cfg.train);
      if (!resume.empty()) {
        trainer.restore(Checkpoint::load(resume));
        spdlog::info("resumed from {} at step {}", resume, trainer.step_count());
      } else {
        fs::remove(dir / "metrics.tsv");
      }
      spdlog::info("training {} steps on {} images ({} held out), G {} params, D {} params", cfg.train.steps,
                   train_set.size(), held_out.size(), trainer.generator().parameters().count(),
                   trainer.discriminator().parameters().count());
      TrainOptions opts;
      opts.metrics_path = dir / "metrics.tsv";
      opts.checkpoint_dir = dir / "checkpoints";
      trainer.train(train_set, opts);
      std::string summary = fmt::format("steps\t{}\n", trainer.step_count());
      if (!held_out.empty()) {
        const double acc = attribute_accuracy(trainer.discriminator(), held_out);
        summary += fmt::format("heldout_attribute_accuracy\t{:.6f}\nheldout_images\t{}\n", acc, held_out.size());
        spdlog::info("held-out attribute accuracy {:.4f}", acc);
      }
      write_text(dir / "train_summary.tsv", summary);
      std::cout << dir.string() << "\n";
    } else if (*generate) {
      auto cfg = resolve_config(gen_c);
      adopt_checkpoint_net(cfg, gen_ckpt, "network");
      auto gen = make_generator("network", gen_ckpt, cfg);
      const auto dir = run_dir(cfg, "generate");
      Dataset inputs;
      inputs.image_size = cfg.train.net.image_size;
      for (const auto& p : gen_images) {
        const auto img = resize_bilinear(read_png(p), inputs.image_size, inputs.image_size);
        inputs.add(to_planar(img), 0, 0, true, Split::standard, p);
      }
      if (!gen_c.data.empty() || (gen_images.empty() && !cfg.data.empty())) {
        const auto std_split = require_data(cfg).filter(Split::standard);
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < std::min(gen_count, std_split.size()); ++i) idx.push_back(i);
        const auto picked = std_split.subset(idx);
        for (std::size_t i = 0; i < picked.size(); ++i)
          inputs.add(picked.image(i), picked.identity[i], picked.viewpoint[i], true, Split::standard, picked.paths[i]);
      }
      if (inputs.empty()) throw ConfigError("generate needs --images or --data");
      Rng rng(gen_seed);
      write_png(dir / "contact_sheet.png", contact_sheet(inputs, *gen, cfg.train.net.num_attributes, rng));
      std::cout << (dir / "contact_sheet.png").string() << "\n";
    } else if (*idpres) {
      auto cfg = resolve_config(id_c);
      adopt_checkpoint_net(cfg, id_ckpt, id_kind);
      if (*nc_opt) cfg.eval.n_c = nc;
      if (*k_opt) cfg.eval.k = knn_k;
      cfg.validate();
      auto gen = make_generator(id_kind, id_ckpt, cfg);
      const auto dir = run_dir(cfg, "idpres");
      const auto all = require_data(cfg);
      spdlog::info("training feature extractor on the auxiliary split");
      const auto fx = train_feature_extractor(all.filter(Split::auxiliary), cfg.eval);
      spdlog::info("feature extractor training accuracy {:.4f}", fx.train_accuracy);
      auto report = knn_idpres(all.filter(Split::standard), *gen, fx, cfg.eval, cfg.train.net.num_attributes);
      report.extra.emplace_back("extractor_train_accuracy", fmt::format("{:.6f}", fx.train_accuracy));
      report.write(dir / "idpres_report.tsv");
      std::cout << report.to_tsv();
    } else if (*fewshot) {
      auto cfg = resolve_config(fs_c);
      adopt_checkpoint_net(cfg, fs_ckpt, fs_kind);
      if (*fs_nc_opt) cfg.eval.n_c = fs_nc;
      if (*shots_opt) cfg.eval.shots = shots;
      cfg.validate();
      auto gen = make_generator(fs_kind, fs_ckpt, cfg);
      const auto dir = run_dir(cfg, "fewshot");
      const auto all = require_data(cfg);
      const auto [baseline, augmented] = fewshot_eval(all.filter(Split::standard), *gen, cfg.eval, cfg.train.net.num_attributes);
      baseline.write(dir / "fewshot_baseline.tsv");
      augmented.write(dir / "fewshot_augmented.tsv");
      std::cout << baseline.to_tsv() << "\n" << augmented.to_tsv();
    } else if (*gradcheck) {
      const auto results = run_gradcheck_suite(instances, gc_seed, gc_filter);
      if (results.empty()) throw ConfigError("no registered op matches --filter '" + gc_filter + "'");
      bool ok = true;
      std::string table = "op\tinstances\tmax_rel_error\tresult\n";
      for (const auto& r : results) {
        const bool pass = r.max_error < kGradTolerance;
        ok = ok && pass;
        table += fmt::format("{}\t{}\t{:.3e}\t{}\n", r.name, r.instances, r.max_error, pass ? "PASS" : "FAIL");
        spdlog::debug("{} took {:.3f} s", r.name, r.seconds);
      }
      std::cout << table;
      if (!gc_out.empty()) write_text(gc_out, table);
      return ok ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
