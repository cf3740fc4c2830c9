#include "caplab/model.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "caplab/errors.hpp"
#include "caplab/kernels.hpp"
#include "caplab/rng.hpp"

namespace caplab {

std::vector<CaptionerParams::GroupRef> CaptionerParams::groups() {
  return {
      {"bridge_w", &bridge_w, &FrozenMask::bridge},
      {"bridge_b", &bridge_b, &FrozenMask::bridge},
      {"embedding", &embedding, &FrozenMask::embedding},
      {"gate_z_w", &gate_z_w, &FrozenMask::recurrent},
      {"gate_z_b", &gate_z_b, &FrozenMask::recurrent},
      {"gate_r_w", &gate_r_w, &FrozenMask::recurrent},
      {"gate_r_b", &gate_r_b, &FrozenMask::recurrent},
      {"cand_w", &cand_w, &FrozenMask::recurrent},
      {"cand_b", &cand_b, &FrozenMask::recurrent},
      {"out_w", &out_w, &FrozenMask::output},
      {"out_b", &out_b, &FrozenMask::output},
  };
}

std::vector<const Array*> CaptionerParams::group_arrays() const {
  return {&bridge_w, &bridge_b, &embedding, &gate_z_w, &gate_z_b,
          &gate_r_w, &gate_r_b, &cand_w,    &cand_b,   &out_w,   &out_b};
}

namespace {

void fill_uniform(Array& a, SplitMix64& rng) {
  for (double& v : a.data) v = rng.uniform(-0.08, 0.08);
}

}  // namespace

CaptionerParams init_params(std::uint64_t seed, const ModelDims& dims) {
  if (dims.feature_dim <= 0 || dims.hidden <= 0 || dims.vocab <= 0 || dims.embed <= 0) {
    throw ConfigError("model dims must be positive");
  }
  const auto D = static_cast<std::size_t>(dims.feature_dim);
  const auto H = static_cast<std::size_t>(dims.hidden);
  const auto V = static_cast<std::size_t>(dims.vocab);
  const auto E = static_cast<std::size_t>(dims.embed);

  CaptionerParams p;
  p.dims = dims;
  p.init_seed = seed;
  p.bridge_w = Array({H, D});
  p.bridge_b = Array({H});
  p.embedding = Array({V, E});
  p.gate_z_w = Array({H, E + H});
  p.gate_z_b = Array({H});
  p.gate_r_w = Array({H, E + H});
  p.gate_r_b = Array({H});
  p.cand_w = Array({H, E + H});
  p.cand_b = Array({H});
  p.out_w = Array({V, H});
  p.out_b = Array({V});

  // Weight draw order is part of the reproducibility contract; biases
  // (gates included) start at zero.
  SplitMix64 rng(substream(seed, "init"));
  fill_uniform(p.bridge_w, rng);
  fill_uniform(p.embedding, rng);
  fill_uniform(p.gate_z_w, rng);
  fill_uniform(p.gate_r_w, rng);
  fill_uniform(p.cand_w, rng);
  fill_uniform(p.out_w, rng);
  return p;
}

DecoderState encode(const CaptionerParams& params, const Array& features) {
  if (features.rank() != 1 ||
      features.shape[0] != static_cast<std::size_t>(params.dims.feature_dim)) {
    throw ShapeError("features do not match model feature dim");
  }
  DecoderState s;
  s.hidden = kernels::tanh_arr(
      kernels::add_same(kernels::matvec(params.bridge_w, features), params.bridge_b));
  s.steps_taken = 0;
  return s;
}

std::pair<DecoderState, Array> decode_step(const CaptionerParams& params,
                                           const DecoderState& state, int prev_token) {
  if (prev_token < 0 || prev_token >= params.dims.vocab) {
    throw IndexError("prev token out of vocabulary range");
  }
  using namespace kernels;
  const Array x = gather_row(params.embedding, static_cast<std::size_t>(prev_token));
  const Array xh = concat1d(x, state.hidden);
  const Array z = sigmoid_arr(add_same(matvec(params.gate_z_w, xh), params.gate_z_b));
  const Array r = sigmoid_arr(add_same(matvec(params.gate_r_w, xh), params.gate_r_b));
  const Array xrh = concat1d(x, hadamard(r, state.hidden));
  const Array hc = tanh_arr(add_same(matvec(params.cand_w, xrh), params.cand_b));
  const Array keep = affine(z, -1.0, 1.0);  // 1 - z
  const Array h = add_same(hadamard(keep, state.hidden), hadamard(z, hc));
  Array dist = softmax_last(add_same(matvec(params.out_w, h), params.out_b));

  DecoderState next;
  next.hidden = h;
  next.steps_taken = state.steps_taken + 1;
  return {std::move(next), std::move(dist)};
}

double sequence_log_prob(const CaptionerParams& params, const Array& features,
                         const Caption& caption, const Vocabulary& vocab) {
  DecoderState state = encode(params, features);
  int prev = vocab.bos;
  double total = 0.0;
  for (std::size_t i = 0; i < caption.tokens.size(); ++i) {
    const int tok = caption.tokens[i];
    if (tok == vocab.eos && i + 1 != caption.tokens.size()) {
      throw DataError("EOS must be terminal");
    }
    auto [next, dist] = decode_step(params, state, prev);
    total += std::log(dist.data[static_cast<std::size_t>(tok)]);
    state = std::move(next);
    prev = tok;
  }
  return total;
}

Gradients Gradients::zeros_like(const CaptionerParams& p) {
  Gradients g;
  g.bridge_w = Array(p.bridge_w.shape);
  g.bridge_b = Array(p.bridge_b.shape);
  g.embedding = Array(p.embedding.shape);
  g.gate_z_w = Array(p.gate_z_w.shape);
  g.gate_z_b = Array(p.gate_z_b.shape);
  g.gate_r_w = Array(p.gate_r_w.shape);
  g.gate_r_b = Array(p.gate_r_b.shape);
  g.cand_w = Array(p.cand_w.shape);
  g.cand_b = Array(p.cand_b.shape);
  g.out_w = Array(p.out_w.shape);
  g.out_b = Array(p.out_b.shape);
  return g;
}

std::vector<Array*> Gradients::arrays() {
  return {&bridge_w, &bridge_b, &embedding, &gate_z_w, &gate_z_b,
          &gate_r_w, &gate_r_b, &cand_w,    &cand_b,   &out_w,   &out_b};
}

std::vector<const Array*> Gradients::arrays() const {
  return {&bridge_w, &bridge_b, &embedding, &gate_z_w, &gate_z_b,
          &gate_r_w, &gate_r_b, &cand_w,    &cand_b,   &out_w,   &out_b};
}

void Gradients::axpy(double k, const Gradients& other) {
  auto dst = arrays();
  auto src = other.arrays();
  for (std::size_t g = 0; g < dst.size(); ++g) {
    if (!dst[g]->same_shape(*src[g])) throw ShapeError("gradient shape mismatch");
    for (std::size_t i = 0; i < dst[g]->numel(); ++i) {
      dst[g]->data[i] += k * src[g]->data[i];
    }
  }
}

void Gradients::scale(double k) {
  for (Array* a : arrays()) {
    for (double& v : a->data) v *= k;
  }
}

void sgd_update(CaptionerParams& params, const Gradients& grads, double learning_rate) {
  auto refs = params.groups();
  auto gs = grads.arrays();
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (!refs[i].array->same_shape(*gs[i])) {
      throw ShapeError(std::string("sgd shape mismatch on ") + refs[i].name);
    }
    if (params.frozen.*(refs[i].frozen_flag)) continue;
    for (std::size_t j = 0; j < refs[i].array->numel(); ++j) {
      refs[i].array->data[j] -= learning_rate * gs[i]->data[j];
    }
  }
}

TapeModel::TapeModel(const CaptionerParams& params) : params_(params) {
  bridge_w_ = tape_.leaf(params.bridge_w);
  bridge_b_ = tape_.leaf(params.bridge_b);
  embedding_ = tape_.leaf(params.embedding);
  gate_z_w_ = tape_.leaf(params.gate_z_w);
  gate_z_b_ = tape_.leaf(params.gate_z_b);
  gate_r_w_ = tape_.leaf(params.gate_r_w);
  gate_r_b_ = tape_.leaf(params.gate_r_b);
  cand_w_ = tape_.leaf(params.cand_w);
  cand_b_ = tape_.leaf(params.cand_b);
  out_w_ = tape_.leaf(params.out_w);
  out_b_ = tape_.leaf(params.out_b);
  bos_ = 0;
}

int TapeModel::encode_node(const Array& features) {
  if (features.rank() != 1 ||
      features.shape[0] != static_cast<std::size_t>(params_.dims.feature_dim)) {
    throw ShapeError("features do not match model feature dim");
  }
  const int f = tape_.leaf(features);
  return tape_.tanh_op(tape_.add(tape_.matmul(bridge_w_, f), bridge_b_));
}

std::pair<int, int> TapeModel::step_nodes(int hidden, int prev_token) {
  if (prev_token < 0 || prev_token >= params_.dims.vocab) {
    throw IndexError("prev token out of vocabulary range");
  }
  const int x = tape_.gather(embedding_, prev_token);
  const int xh = tape_.concat(x, hidden);
  const int z = tape_.sigmoid_op(tape_.add(tape_.matmul(gate_z_w_, xh), gate_z_b_));
  const int r = tape_.sigmoid_op(tape_.add(tape_.matmul(gate_r_w_, xh), gate_r_b_));
  const int xrh = tape_.concat(x, tape_.mul(r, hidden));
  const int hc = tape_.tanh_op(tape_.add(tape_.matmul(cand_w_, xrh), cand_b_));
  const int keep = tape_.affine(z, -1.0, 1.0);
  const int h = tape_.add(tape_.mul(keep, hidden), tape_.mul(z, hc));
  const int dist = tape_.softmax(tape_.add(tape_.matmul(out_w_, h), out_b_));
  return {h, dist};
}

int TapeModel::sequence_log_prob_node(const Array& features, std::span<const int> tokens) {
  int hidden = encode_node(features);
  int prev = bos_;
  int total = -1;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto [h, dist] = step_nodes(hidden, prev);
    const int lp = tape_.log_op(tape_.pick(dist, tokens[i]));
    total = total < 0 ? lp : tape_.add(total, lp);
    hidden = h;
    prev = tokens[i];
  }
  if (total < 0) throw ContractError("sequence_log_prob of empty caption");
  return total;
}

int TapeModel::conditional_log_prob_node(const Array& features, std::span<const int> prefix,
                                         int target) {
  int hidden = encode_node(features);
  int prev = bos_;
  for (int tok : prefix) {
    auto [h, dist] = step_nodes(hidden, prev);
    (void)dist;
    hidden = h;
    prev = tok;
  }
  auto [h, dist] = step_nodes(hidden, prev);
  (void)h;
  return tape_.log_op(tape_.pick(dist, target));
}

Gradients TapeModel::grads() const {
  Gradients g = Gradients::zeros_like(params_);
  auto dst = g.arrays();
  const int ids[] = {bridge_w_, bridge_b_, embedding_, gate_z_w_, gate_z_b_,
                     gate_r_w_, gate_r_b_, cand_w_,    cand_b_,   out_w_,   out_b_};
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const Array& adj = tape_.adjoint(ids[i]);
    if (adj.numel() == dst[i]->numel()) *dst[i] = adj;
  }
  return g;
}

namespace {

constexpr char kMagic[8] = {'c', 'a', 'p', 'l', 'a', 'b', 'c', 'k'};
constexpr std::uint32_t kFormatVersion = 1;

void put_u32(std::ofstream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ofstream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::ifstream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::ifstream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const CaptionerParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write(kMagic, sizeof(kMagic));
  put_u32(out, kFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(params.dims.feature_dim));
  put_u32(out, static_cast<std::uint32_t>(params.dims.hidden));
  put_u32(out, static_cast<std::uint32_t>(params.dims.vocab));
  put_u32(out, static_cast<std::uint32_t>(params.dims.embed));
  put_u64(out, params.init_seed);
  for (const Array* a : params.group_arrays()) {
    put_u64(out, static_cast<std::uint64_t>(a->numel()));
    for (double v : a->data) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw IoError("checkpoint write failed: " + path);
}

CaptionerParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("bad checkpoint magic: " + path);
  }
  const std::uint32_t version = get_u32(in);
  if (version != kFormatVersion) {
    throw CheckpointError("unsupported checkpoint format version " + std::to_string(version));
  }
  ModelDims dims;
  dims.feature_dim = static_cast<int>(get_u32(in));
  dims.hidden = static_cast<int>(get_u32(in));
  dims.vocab = static_cast<int>(get_u32(in));
  dims.embed = static_cast<int>(get_u32(in));
  const std::uint64_t seed = get_u64(in);
  if (!in) throw CheckpointError("truncated checkpoint header: " + path);

  CaptionerParams p = init_params(seed, dims);
  auto refs = p.groups();
  for (auto& ref : refs) {
    const std::uint64_t count = get_u64(in);
    if (!in || count != ref.array->numel()) {
      throw CheckpointError(std::string("checkpoint group size mismatch on ") + ref.name);
    }
    for (std::size_t i = 0; i < ref.array->numel(); ++i) {
      ref.array->data[i] = std::bit_cast<double>(get_u64(in));
    }
  }
  if (!in) throw CheckpointError("truncated checkpoint payload: " + path);
  return p;
}

}  // namespace caplab
