#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "caplab/array.hpp"
#include "caplab/autodiff.hpp"
#include "caplab/synthworld.hpp"

namespace caplab {

struct ModelDims {
  int feature_dim = 0;  // D
  int hidden = 64;      // H
  int vocab = 0;        // V
  int embed = 32;       // E
};

// Parameter groups that can be frozen independently. Frozen groups receive
// zero updates; gradients are still computed.
struct FrozenMask {
  bool bridge = false;
  bool embedding = false;
  bool recurrent = false;
  bool output = false;
};

// Encoder: one linear+tanh bridge from scene features into the initial
// hidden state. Decoder: GRU-style gated recurrent cell over embeddings,
// with a linear projection to vocabulary logits.
struct CaptionerParams {
  ModelDims dims;
  std::uint64_t init_seed = 0;
  FrozenMask frozen;

  Array bridge_w;  // {H, D}
  Array bridge_b;  // {H}
  Array embedding; // {V, E}
  Array gate_z_w;  // {H, E+H}
  Array gate_z_b;  // {H}
  Array gate_r_w;  // {H, E+H}
  Array gate_r_b;  // {H}
  Array cand_w;    // {H, E+H}
  Array cand_b;    // {H}
  Array out_w;     // {V, H}
  Array out_b;     // {V}

  struct GroupRef {
    const char* name;
    Array* array;
    bool FrozenMask::* frozen_flag;
  };
  // Fixed iteration order; checkpoint layout and SGD both follow it.
  std::vector<GroupRef> groups();
  std::vector<const Array*> group_arrays() const;
};

// Weights uniform in [-0.08, 0.08], biases zero, fixed draw order.
CaptionerParams init_params(std::uint64_t seed, const ModelDims& dims);

struct DecoderState {
  Array hidden;       // {H}
  int steps_taken = 0;
};

// Gradient-free forward path (used by decoding). Bitwise-identical to the
// tape path: both run the same kernels in the same order.
DecoderState encode(const CaptionerParams& params, const Array& features);
std::pair<DecoderState, Array> decode_step(const CaptionerParams& params,
                                           const DecoderState& state, int prev_token);

// Sum over steps of log p(token_t | tokens_<t, features); the caption is
// teacher-forced. EOS, if present, must be terminal and is scored too.
double sequence_log_prob(const CaptionerParams& params, const Array& features,
                         const Caption& caption, const Vocabulary& vocab);

// Per-group gradient container matching CaptionerParams shapes.
struct Gradients {
  Array bridge_w, bridge_b, embedding;
  Array gate_z_w, gate_z_b, gate_r_w, gate_r_b, cand_w, cand_b;
  Array out_w, out_b;

  static Gradients zeros_like(const CaptionerParams& p);
  std::vector<Array*> arrays();
  std::vector<const Array*> arrays() const;
  void axpy(double k, const Gradients& other);  // this += k * other
  void scale(double k);
};

// Plain SGD: w -= lr * g for every unfrozen group. Shape mismatch throws.
void sgd_update(CaptionerParams& params, const Gradients& grads, double learning_rate);

// Differentiable model graph on one tape. Parameters enter as leaves once;
// build as many rollout/teacher-forcing chains as needed, then call
// backward() on a scalar root and read the parameter gradients.
class TapeModel {
 public:
  explicit TapeModel(const CaptionerParams& params);

  Tape& tape() { return tape_; }

  int encode_node(const Array& features);
  // (next hidden, distribution over V) given the previous token.
  std::pair<int, int> step_nodes(int hidden, int prev_token);
  // Sum of stepwise log-probs of `tokens` (teacher-forced from BOS).
  int sequence_log_prob_node(const Array& features, std::span<const int> tokens);
  // log p(target at the step right after `prefix`); the prefix is fixed
  // context, gradients flow only through the model parameters.
  int conditional_log_prob_node(const Array& features, std::span<const int> prefix,
                                int target);

  void backward(int root) { tape_.backward(root); }
  Gradients grads() const;

 private:
  const CaptionerParams& params_;
  Tape tape_;
  int bridge_w_, bridge_b_, embedding_;
  int gate_z_w_, gate_z_b_, gate_r_w_, gate_r_b_, cand_w_, cand_b_;
  int out_w_, out_b_;
  int bos_;
};

// Versioned binary checkpoint: magic, format version, dims, init seed, then
// each parameter group as a length-prefixed flat array of 64-bit
// little-endian reals. Round trips byte-exactly.
void save_checkpoint(const std::string& path, const CaptionerParams& params);
CaptionerParams load_checkpoint(const std::string& path);

}  // namespace caplab
