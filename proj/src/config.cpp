#include "idmorph/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include <fmt/format.h>

namespace idmorph {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (v.empty() || pos != v.size() || v[0] == '-') throw ConfigError("expected a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}

std::size_t to_positive(const std::string& v) {
  const auto x = to_size(v);
  if (x == 0) throw ConfigError("expected a positive integer, got '" + v + "'");
  return x;
}

double to_double(const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (v.empty() || pos != v.size() || !std::isfinite(x)) throw ConfigError("expected a finite number, got '" + v + "'");
  return x;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("expected true/false, got '" + v + "'");
}

std::vector<std::size_t> to_list(const std::string& v) {
  std::vector<std::size_t> out;
  if (v.empty() || v == "none") return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_positive(trim(item)));
  return out;
}

std::string from_list(const std::vector<std::size_t>& xs) {
  if (xs.empty()) return "none";
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

std::string num(double x) { return fmt::format("{}", x); }  // shortest round-trip form

void check_range(double x, double lo, double hi, bool open_hi, const char* what) {
  if (x < lo || (open_hi ? x >= hi : x > hi)) {
    throw ConfigError(fmt::format("{} = {} outside [{}, {}{}", what, x, lo, hi, open_hi ? ")" : "]"));
  }
}

struct Key {
  const char* name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define SIZE_KEY(NAME, FIELD, PARSE) \
  Key { NAME, [](RunConfig& c, const std::string& v) { c.FIELD = PARSE(v); }, [](const RunConfig& c) { return std::to_string(c.FIELD); } }

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      SIZE_KEY("image_size", train.net.image_size, to_positive),
      SIZE_KEY("base_channels", train.net.base_channels, to_positive),
      SIZE_KEY("blocks", train.net.blocks, to_positive),
      SIZE_KEY("id_dim", train.net.id_dim, to_positive),
      SIZE_KEY("noise_dim", train.net.noise_dim, to_positive),
      SIZE_KEY("num_attributes", train.net.num_attributes, to_positive),
      SIZE_KEY("num_identities", train.net.num_identities, to_positive),
      Key{"ablation", [](RunConfig& c, const std::string& v) { c.train.net.ablation = parse_ablation(v); },
          [](const RunConfig& c) { return to_string(c.train.net.ablation); }},
      Key{"cnc_placement", [](RunConfig& c, const std::string& v) { c.train.net.link_resolutions = to_list(v); },
          [](const RunConfig& c) { return from_list(c.train.net.link_resolutions); }},
      Key{"cnc_radius", [](RunConfig& c, const std::string& v) { c.train.net.link_radii = to_list(v); },
          [](const RunConfig& c) { return from_list(c.train.net.link_radii); }},
      Key{"balance_parameters", [](RunConfig& c, const std::string& v) { c.train.net.balance_parameters = to_bool(v); },
          [](const RunConfig& c) { return std::string(c.train.net.balance_parameters ? "true" : "false"); }},
      Key{"lr",
          [](RunConfig& c, const std::string& v) {
            c.train.lr = to_double(v);
            if (!(c.train.lr > 0)) throw ConfigError("lr must be positive");
          },
          [](const RunConfig& c) { return num(c.train.lr); }},
      Key{"lambda",
          [](RunConfig& c, const std::string& v) {
            c.train.lambda = to_double(v);
            if (c.train.lambda < 0) throw ConfigError("lambda must be >= 0");
          },
          [](const RunConfig& c) { return num(c.train.lambda); }},
      Key{"adam_beta1",
          [](RunConfig& c, const std::string& v) {
            c.train.beta1 = to_double(v);
            check_range(c.train.beta1, 0, 1, true, "adam_beta1");
          },
          [](const RunConfig& c) { return num(c.train.beta1); }},
      Key{"adam_beta2",
          [](RunConfig& c, const std::string& v) {
            c.train.beta2 = to_double(v);
            check_range(c.train.beta2, 0, 1, true, "adam_beta2");
          },
          [](const RunConfig& c) { return num(c.train.beta2); }},
      Key{"batch_size",
          [](RunConfig& c, const std::string& v) {
            c.train.batch_size = to_size(v);
            if (c.train.batch_size < 2) throw ConfigError("batch_size must be >= 2");
          },
          [](const RunConfig& c) { return std::to_string(c.train.batch_size); }},
      SIZE_KEY("steps", train.steps, to_size),
      SIZE_KEY("checkpoint_every", train.checkpoint_every, to_size),
      SIZE_KEY("seed", train.seed, to_size),
      Key{"deterministic", [](RunConfig& c, const std::string& v) { c.train.deterministic = to_bool(v); },
          [](const RunConfig& c) { return std::string(c.train.deterministic ? "true" : "false"); }},
      Key{"n_c",
          [](RunConfig& c, const std::string& v) {
            c.eval.n_c = to_size(v);
            if (c.eval.n_c < 2) throw ConfigError("n_c must be >= 2");
          },
          [](const RunConfig& c) { return std::to_string(c.eval.n_c); }},
      SIZE_KEY("knn_k", eval.k, to_positive),
      SIZE_KEY("shots", eval.shots, to_positive),
      Key{"fakes_per_image",
          [](RunConfig& c, const std::string& v) {
            c.eval.fakes_per_image = to_size(v);
            if (c.eval.fakes_per_image % 5 != 0) throw ConfigError("fakes_per_image must be a multiple of 5");
          },
          [](const RunConfig& c) { return std::to_string(c.eval.fakes_per_image); }},
      SIZE_KEY("extractor_steps", eval.extractor_steps, to_size),
      SIZE_KEY("classifier_steps", eval.classifier_steps, to_size),
      SIZE_KEY("classifier_width", eval.classifier_width, to_positive),
      SIZE_KEY("classifier_batch", eval.classifier_batch, to_positive),
      Key{"classifier_lr",
          [](RunConfig& c, const std::string& v) {
            c.eval.classifier_lr = to_double(v);
            if (!(c.eval.classifier_lr > 0)) throw ConfigError("classifier_lr must be positive");
          },
          [](const RunConfig& c) { return num(c.eval.classifier_lr); }},
      SIZE_KEY("eval_seed", eval.seed, to_size),
      Key{"data", [](RunConfig& c, const std::string& v) { c.data = v; }, [](const RunConfig& c) { return c.data; }},
      Key{"out", [](RunConfig& c, const std::string& v) { c.out = v; }, [](const RunConfig& c) { return c.out; }},
  };
  return table;
}

#undef SIZE_KEY

}  // namespace

void RunConfig::validate() const {
  train.validate();
  eval.validate();
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : keys()) {
    if (key == k.name) {
      k.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown key '" + key + "'");
}

RunConfig parse_run_config(const std::string& text, const std::string& source) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    try {
      if (eq == std::string::npos) throw ConfigError("expected key = value");
      const std::string key = trim(body.substr(0, eq));
      if (key.empty()) throw ConfigError("empty key");
      set_config_value(cfg, key, trim(body.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config '" + path + "'");
  std::stringstream buf;
  buf << f.rdbuf();
  return parse_run_config(buf.str(), path);
}

std::string to_text(const RunConfig& cfg) {
  std::string s;
  for (const auto& k : keys()) s += std::string(k.name) + " = " + k.get(cfg) + "\n";
  return s;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : keys()) out.emplace_back(k.name);
  return out;
}

}  // namespace idmorph
