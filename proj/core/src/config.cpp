#include "caplab/config.hpp"

#include <cctype>
#include <climits>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <sstream>

#include "caplab/errors.hpp"

namespace caplab {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  throw ConfigError("invalid value for " + key + ": '" + value + "'");
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(value, &used, 10);
    if (used != value.size()) bad_value(key, value);
    return static_cast<std::uint64_t>(v);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    bad_value(key, value);
  }
}

int parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long v = std::stol(value, &used, 10);
    if (used != value.size() || v < INT_MIN || v > INT_MAX) bad_value(key, value);
    return static_cast<int>(v);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    bad_value(key, value);
  }
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) bad_value(key, value);
    return v;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    bad_value(key, value);
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(key, value);
}

void set_train_key(TrainConfig& tc, bool allow_target, const std::string& key,
                   const std::string& value) {
  if (key == "learning-rate") {
    tc.learning_rate = parse_double(key, value);
  } else if (key == "batch-size") {
    tc.batch_size = parse_int(key, value);
  } else if (key == "grad-accum-steps") {
    tc.grad_accum_steps = parse_int(key, value);
  } else if (key == "max-steps") {
    tc.max_steps = parse_int(key, value);
  } else if (key == "stop-mean-length") {
    tc.stop_mean_length = parse_double(key, value);
  } else if (key == "probe-every") {
    tc.probe_every = parse_int(key, value);
  } else if (allow_target && key == "target-token") {
    tc.debias_target_token = parse_int(key, value);
  } else {
    throw ConfigError("unknown training key: " + key);
  }
}

void set_decode_key(DecodeConfig& dc, const std::string& key, const std::string& value) {
  if (key == "strategy") {
    dc.strategy = strategy_from_name(value);
  } else if (key == "beam-width") {
    dc.beam_width = parse_int(key, value);
  } else if (key == "repetition-penalty") {
    dc.repetition_penalty = parse_double(key, value);
  } else if (key == "no-repeat-ngram") {
    dc.no_repeat_ngram = parse_int(key, value);
  } else if (key == "block-eos") {
    dc.block_eos = parse_bool(key, value);
  } else if (key == "contrastive-alpha") {
    dc.contrastive_alpha = parse_double(key, value);
  } else if (key == "contrastive-k") {
    dc.contrastive_k = parse_int(key, value);
  } else if (key == "top-p") {
    dc.top_p = parse_double(key, value);
  } else if (key == "max-length") {
    dc.max_length = parse_int(key, value);
  } else if (key == "rng-seed") {
    dc.rng_seed = parse_u64(key, value);
  } else {
    throw ConfigError("unknown decode key: " + key);
  }
}

// per-stage blocks share the experiment seed and the decode configs
void sync_stage_blocks(ExperimentConfig& c) {
  TrainConfig* stages[] = {&c.train_xent, &c.train_debias, &c.train_reinforce};
  for (TrainConfig* tc : stages) {
    tc->seed = c.seed;
    tc->decode_train = c.decode_train;
    tc->decode_eval = c.decode_eval;
  }
}

}  // namespace

const char* strategy_name(Strategy strategy) {
  switch (strategy) {
    case Strategy::greedy: return "greedy";
    case Strategy::beam: return "beam";
    case Strategy::contrastive: return "contrastive";
    case Strategy::nucleus: return "nucleus";
  }
  throw ContractError("unknown strategy");
}

Strategy strategy_from_name(const std::string& name) {
  if (name == "greedy") return Strategy::greedy;
  if (name == "beam") return Strategy::beam;
  if (name == "contrastive") return Strategy::contrastive;
  if (name == "nucleus") return Strategy::nucleus;
  throw ConfigError("unknown strategy: " + name);
}

ExperimentConfig default_experiment_config() {
  ExperimentConfig c;
  c.seed = 11;
  c.scene.max_objects = 9;

  // training rollouts: contrastive with n-gram banning keeps sampled prefixes
  // coherent; probe/eval decoding: nucleus with no repetition penalty so the
  // emitted EOS probability is the model's own
  c.decode_train.strategy = Strategy::contrastive;
  c.decode_train.no_repeat_ngram = 2;
  c.decode_eval.strategy = Strategy::nucleus;
  c.decode_eval.repetition_penalty = 1.0;
  c.decode_eval.no_repeat_ngram = 2;

  c.train_xent.stage = Stage::xent;
  c.train_xent.learning_rate = 0.1;
  c.train_xent.max_steps = 16000;
  c.train_xent.probe_every = 2000;
  // never fires: decoding caps at 96 tokens; stage 1 runs its full budget
  c.train_xent.stop_mean_length = 97.0;

  c.train_debias.stage = Stage::debias;
  c.train_debias.learning_rate = 5e-3;
  c.train_debias.max_steps = 16000;
  c.train_debias.probe_every = 5;
  // the probe length leaving the short-caption plateau (3.0) ends the stage
  c.train_debias.stop_mean_length = 4.5;

  c.train_reinforce.stage = Stage::reinforce;
  c.train_reinforce.learning_rate = 5e-4;
  c.train_reinforce.max_steps = 2000;
  c.train_reinforce.probe_every = 50;

  sync_stage_blocks(c);
  return c;
}

ExperimentConfig parse_experiment_config(std::istream& in) {
  ExperimentConfig c = default_experiment_config();
  std::string section;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string text = trim(line);
    if (text.empty() || text[0] == '#') continue;
    if (text.front() == '[') {
      if (text.back() != ']') {
        throw ConfigError("line " + std::to_string(line_no) + ": unterminated section header");
      }
      section = trim(text.substr(1, text.size() - 2));
      if (section != "experiment" && section != "scene" && section != "model" &&
          section != "data" && section != "train.xent" && section != "train.debias" &&
          section != "train.reinforce" && section != "decode.train" &&
          section != "decode.eval" && section != "output") {
        throw ConfigError("unknown section: [" + section + "]");
      }
      continue;
    }
    const std::size_t eq = text.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(text.substr(0, eq));
    const std::string value = trim(text.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    if (section.empty()) {
      throw ConfigError("line " + std::to_string(line_no) + ": key outside any section");
    }

    if (section == "experiment") {
      if (key == "seed") {
        c.seed = parse_u64(key, value);
      } else {
        throw ConfigError("unknown experiment key: " + key);
      }
    } else if (section == "scene") {
      if (key == "max-objects") {
        c.scene.max_objects = parse_int(key, value);
      } else if (key == "noise-sigma") {
        c.scene.noise_sigma = parse_double(key, value);
      } else {
        throw ConfigError("unknown scene key: " + key);
      }
    } else if (section == "model") {
      if (key == "hidden-size") {
        c.hidden_size = parse_int(key, value);
      } else if (key == "embed-dim") {
        c.embed_dim = parse_int(key, value);
      } else {
        throw ConfigError("unknown model key: " + key);
      }
    } else if (section == "data") {
      if (key == "train-size") {
        c.train_size = parse_int(key, value);
      } else if (key == "val-size") {
        c.val_size = parse_int(key, value);
      } else if (key == "probe-size") {
        c.probe_size = parse_int(key, value);
      } else {
        throw ConfigError("unknown data key: " + key);
      }
    } else if (section == "train.xent") {
      set_train_key(c.train_xent, false, key, value);
    } else if (section == "train.debias") {
      set_train_key(c.train_debias, true, key, value);
    } else if (section == "train.reinforce") {
      set_train_key(c.train_reinforce, false, key, value);
    } else if (section == "decode.train") {
      set_decode_key(c.decode_train, key, value);
    } else if (section == "decode.eval") {
      set_decode_key(c.decode_eval, key, value);
    } else if (section == "output") {
      if (key == "dir") {
        c.output_dir = value;
      } else {
        throw ConfigError("unknown output key: " + key);
      }
    }
  }
  sync_stage_blocks(c);
  validate_experiment_config(c);
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path);
  return parse_experiment_config(in);
}

void validate_experiment_config(const ExperimentConfig& config) {
  if (config.hidden_size < 1) throw ConfigError("hidden-size must be >= 1");
  if (config.embed_dim < 1) throw ConfigError("embed-dim must be >= 1");
  if (config.scene.max_objects < 1 || config.scene.max_objects > kGridCells) {
    throw ConfigError("max-objects must be in 1.." + std::to_string(kGridCells));
  }
  if (config.scene.noise_sigma < 0.0 || !std::isfinite(config.scene.noise_sigma)) {
    throw ConfigError("noise-sigma must be >= 0");
  }
  if (config.train_size < 0) throw ConfigError("train-size must be >= 0");
  if (config.val_size < 0) throw ConfigError("val-size must be >= 0");
  if (config.probe_size < 0) throw ConfigError("probe-size must be >= 0");
  if (config.output_dir.empty()) throw ConfigError("output dir must be nonempty");
  validate_decode_config(config.decode_train);
  validate_decode_config(config.decode_eval);
  validate_train_config(config.train_xent);
  validate_train_config(config.train_debias);
  validate_train_config(config.train_reinforce);
}

void apply_env_overrides(ExperimentConfig& config) {
  const char* dir = std::getenv("CAPLAB_OUT_DIR");
  if (dir != nullptr && dir[0] != '\0') config.output_dir = dir;
}

}  // namespace caplab
