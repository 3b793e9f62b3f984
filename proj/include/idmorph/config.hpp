#pragma once

#include <string>
#include <vector>

#include "idmorph/eval.hpp"
#include "idmorph/training.hpp"

namespace idmorph {

/// Every knob of a run, read from `key = value` lines ('#' starts a comment).
struct RunConfig {
  TrainConfig train;
  EvalConfig eval;
  std::string data;  // manifest path
  std::string out;   // run directory

  void validate() const;
};

/// Unknown keys, malformed values and out-of-range values raise ConfigError
/// naming `source:line`.
RunConfig parse_run_config(const std::string& text, const std::string& source = "config");
RunConfig load_run_config(const std::string& path);

/// Applies a single `key=value` on top of `cfg` (used for CLI overrides).
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

/// All keys in a fixed order; parse_run_config(to_text(c)) reproduces c.
std::string to_text(const RunConfig& cfg);

std::vector<std::string> config_keys();

}  // namespace idmorph
