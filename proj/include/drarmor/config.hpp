#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>

#include "drarmor/data.hpp"
#include "drarmor/flsim.hpp"

namespace drarmor {

/// Everything one `simulate` run depends on.
///
/// Text form is one `key = value` per line; `#` starts a comment, strings
/// are double-quoted, booleans are `true`/`false`. The grammar is a subset
/// of TOML. Keys are listed in docs/config.md.
struct ExperimentConfig {
  std::string preset;  // applied before the explicit keys when parsing

  // dataset
  std::string dataset = "synthetic";  // synthetic | idx
  SynthKind synth_kind = SynthKind::stripes;
  std::size_t synth_n = 2000;
  std::size_t synth_side = 12;
  std::size_t synth_classes = 4;
  std::string idx_images;
  std::string idx_labels;
  std::size_t samples_per_client = 0;  // 0: split the training set evenly
  Partition partition = Partition::iid;
  double dirichlet_alpha = 0.5;

  std::size_t rounds = 20;
  RoundConfig round;
  bool compare_baseline = true;
  bool dump_reconstructions = true;

  std::uint64_t seed() const { return round.seed; }
};

using ConfigValue = std::variant<bool, std::int64_t, double, std::string>;

// Raw key/value pairs; throws ConfigError with the line number on bad syntax.
std::map<std::string, ConfigValue> parse_key_values(const std::string& text);

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);
std::string serialize_config(const ExperimentConfig& config);

// Named presets (mnist-start-3mal, mnist-deep-3mal, ...).
ExperimentConfig preset_config(const std::string& name);
std::vector<std::string> preset_names();

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

}  // namespace drarmor
