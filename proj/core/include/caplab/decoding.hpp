#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "caplab/array.hpp"
#include "caplab/model.hpp"
#include "caplab/synthworld.hpp"

namespace caplab {

enum class Strategy { greedy, beam, contrastive, nucleus };

struct DecodeConfig {
  Strategy strategy = Strategy::beam;
  int beam_width = 5;
  double repetition_penalty = 1.5;  // 1.0 disables
  int no_repeat_ngram = 3;          // 0 disables
  bool block_eos = false;
  double contrastive_alpha = 0.7;
  int contrastive_k = 5;
  double top_p = 0.9;
  int max_length = 96;
  std::uint64_t rng_seed = 0;  // nucleus sampling only
};

// Throws ConfigError on out-of-range fields.
void validate_decode_config(const DecodeConfig& config);

// Applies repetition penalty (log-space, positive-score convention:
// score/penalty if score > 0 else score*penalty), no-repeat-ngram banning,
// and EOS blocking to a probability row, then renormalizes. The identity
// config returns the input distribution unchanged, bit for bit. Throws
// ConstraintDeadlockError when every token is masked.
Array apply_constraints(const Array& dist, std::span<const int> history,
                        const DecodeConfig& config, int eos_id);

struct DecodeResult {
  Caption caption;
  // Raw model probability of each emitted token (pre-constraint), aligned
  // with caption.tokens; the EOS entry, when present, is last.
  std::vector<double> step_probs;
  bool truncated = false;  // hit max-length without emitting EOS
};

// Runs the configured strategy from the scene features. Deterministic for
// greedy/beam/contrastive; nucleus is bit-reproducible for a fixed rng_seed.
DecodeResult decode(const CaptionerParams& params, const Array& features,
                    const DecodeConfig& config, const Vocabulary& vocab);

}  // namespace caplab
