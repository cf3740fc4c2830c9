#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "caplab/decoding.hpp"
#include "caplab/metrics.hpp"
#include "caplab/model.hpp"
#include "caplab/synthworld.hpp"

namespace caplab {

enum class Stage { xent, debias, reinforce };

const char* stage_name(Stage stage);
Stage stage_from_name(const std::string& name);  // ConfigError on unknown names

struct TrainConfig {
  Stage stage = Stage::xent;
  double learning_rate = 1e-3;
  int batch_size = 8;
  int grad_accum_steps = 3;
  int max_steps = 500;
  // Probe mean length that ends the stage; 0 = auto (2x the mean
  // full-reference length, capped by the eval decode max length).
  double stop_mean_length = 0.0;
  int probe_every = 50;
  std::uint64_t seed = 1;
  int debias_target_token = -1;  // -1 = the EOS token
  DecodeConfig decode_train;     // rollout generation (stages 2/3)
  DecodeConfig decode_eval;      // probe decoding
};

void validate_train_config(const TrainConfig& config);

// Records with their rendered feature vectors; features[i] belongs to
// records[i].
struct TrainingSet {
  const Vocabulary* vocab = nullptr;
  std::vector<SceneRecord> records;
  std::vector<Array> features;
};

TrainingSet prepare_training_set(std::vector<SceneRecord> records, const Vocabulary& vocab,
                                 double noise_sigma = 0.0);

// One teacher-forced cross-entropy optimizer step over `indices` (short
// references as targets, EOS supervised), processed in `grad_accum_steps`
// micro-batches. Returns the batch loss: mean over samples of the mean
// per-token cross-entropy.
double xent_step(CaptionerParams& params, const TrainingSet& data,
                 std::span<const std::size_t> indices, double learning_rate,
                 int grad_accum_steps);

struct DebiasStats {
  double mean_p_target = 0.0;  // p(target at its emission step), pre-update
  double mean_p_ros = 0.0;     // mean per-step prob of non-EOS emitted tokens
  int terminated = 0;
  int truncated = 0;
  int skipped = 0;  // empty rollouts
};

// Rolls out one caption per index with `rollout` (per-sample seeds derived
// from step_seed), then descends on the mean over terminated rollouts of
// log p(target token at the rollout's emission step | sampled prefix as
// fixed context). Truncated rollouts contribute nothing; when nothing
// terminated, params stay unchanged. target_token -1 means EOS.
DebiasStats eos_debias_step(CaptionerParams& params, const TrainingSet& data,
                            std::span<const std::size_t> indices, const DecodeConfig& rollout,
                            double learning_rate, std::uint64_t step_seed,
                            int target_token = -1);

using RewardFn = std::function<double(const Caption& caption, const SceneRecord& record)>;

struct ReinforceStats {
  double mean_reward = 0.0;
  int used = 0;
  int skipped = 0;  // empty rollouts or non-finite rewards
};

// Score-function gradient: mean over used samples of -(R/n) * d log p(rollout).
// Exposed separately so linearity in R is directly testable.
Gradients reinforce_gradient(const CaptionerParams& params, const TrainingSet& data,
                             std::span<const std::size_t> indices, const DecodeConfig& rollout,
                             std::uint64_t step_seed, const RewardFn& reward,
                             ReinforceStats* stats);

ReinforceStats reinforce_step(CaptionerParams& params, const TrainingSet& data,
                              std::span<const std::size_t> indices, const DecodeConfig& rollout,
                              double learning_rate, std::uint64_t step_seed,
                              const RewardFn& reward);

struct ProbeResult {
  MetricsReport report;
  double p_eos = 0.0;  // mean final-step model prob over terminated decodes
  double p_ros = 0.0;  // mean per-step model prob of non-EOS emitted tokens
  std::vector<Caption> captions;
};

// Decodes the probe set with `decode_eval` on a parameter snapshot and
// scores it; pure given (params, probe, stats, seed, step).
ProbeResult probe_decode(const CaptionerParams& params, const TrainingSet& probe,
                         const DecodeConfig& decode_eval, const CorpusStats& stats,
                         std::uint64_t seed, int step);

// Trace CSV column order; one row per probe.
extern const char* const kTraceHeader;

double auto_stop_length(const TrainingSet& train, const TrainConfig& config);

struct StageResult {
  int final_step = 0;
  bool stopped_by_length = false;
  MetricsReport final_probe;
  double final_p_eos = 0.0;
  double final_p_ros = 0.0;
};

// Runs the configured step op with probes at step 0, every probe_every
// steps, and at max_steps; appends one trace row and writes
// ckpt_<step>.bin per probe under out_dir; stops early once probe mean
// length reaches the stop length. With resume=true, continues from the
// newest checkpoint in out_dir, truncating trace rows past it.
StageResult run_stage(CaptionerParams& params, const TrainConfig& config,
                      const TrainingSet& train, const TrainingSet& probe,
                      const std::string& out_dir, bool resume = true);

// Deterministic helpers shared by run_stage and the tests.
std::vector<std::size_t> batch_indices(std::uint64_t seed, Stage stage, int step,
                                       std::size_t count, std::size_t dataset_size);
std::string checkpoint_path(const std::string& out_dir, int step);
int latest_checkpoint_step(const std::string& out_dir);  // -1 when none

}  // namespace caplab
