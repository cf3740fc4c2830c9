#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "caplab/synthworld.hpp"
#include "caplab/training.hpp"

namespace caplab {

// Whole-experiment configuration, read from flat `key = value` text with
// `[section]` headers and full-line `#` comments. Unknown sections or keys
// are config errors; every value is validated before any compute.
struct ExperimentConfig {
  std::uint64_t seed = 1;

  SceneConfig scene;

  int hidden_size = 64;
  int embed_dim = 32;

  int train_size = 10000;
  int val_size = 1000;
  int probe_size = 500;

  TrainConfig train_xent;
  TrainConfig train_debias;
  TrainConfig train_reinforce;

  DecodeConfig decode_train;
  DecodeConfig decode_eval;

  std::string output_dir = "out";
};

// Defaults for every field, including the per-stage training blocks.
ExperimentConfig default_experiment_config();

ExperimentConfig parse_experiment_config(std::istream& in);
ExperimentConfig load_experiment_config(const std::string& path);

void validate_experiment_config(const ExperimentConfig& config);

// The only environment override: CAPLAB_OUT_DIR replaces output.dir.
void apply_env_overrides(ExperimentConfig& config);

const char* strategy_name(Strategy strategy);
Strategy strategy_from_name(const std::string& name);

}  // namespace caplab
