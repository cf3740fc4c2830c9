#include <cmath>
#include <cstdint>
#include <vector>

#include "caplab/decoding.hpp"
#include "caplab/errors.hpp"
#include "caplab/model.hpp"
#include "caplab/rng.hpp"
#include "caplab/synthworld.hpp"
#include "doctest.h"

using namespace caplab;

namespace {

DecodeConfig identity_config(Strategy strategy) {
  DecodeConfig c;
  c.strategy = strategy;
  c.repetition_penalty = 1.0;
  c.no_repeat_ngram = 0;
  c.block_eos = false;
  return c;
}

Array random_features(std::uint64_t seed, int dim) {
  SplitMix64 rng(seed);
  Array f({static_cast<std::size_t>(dim)});
  for (double& v : f.data) v = rng.uniform(-1.0, 1.0);
  return f;
}

// four-token toy world: bos 0, eos 1, two free words
Vocabulary tiny_vocab() {
  Vocabulary v;
  v.tokens = {"<bos>", "<eos>", "x", "y"};
  return v;
}

CaptionerParams tiny_model(std::uint64_t seed) {
  ModelDims dims;
  dims.feature_dim = 4;
  dims.hidden = 6;
  dims.vocab = 4;
  dims.embed = 3;
  return init_params(seed, dims);
}

double total_log_prob(const DecodeResult& r) {
  double s = 0.0;
  for (double p : r.step_probs) s += std::log(p);
  return s;
}

// Every caption of length <= max_len over the tiny vocabulary: EOS may only
// appear terminally; a caption without EOS must use the full budget.
double exhaustive_best(const CaptionerParams& params, const Array& features,
                       const Vocabulary& vocab, int max_len, std::vector<int>& best_tokens) {
  double best = -1e300;
  std::vector<int> tokens;
  auto score_of = [&](const std::vector<int>& seq) {
    double s = 0.0;
    DecoderState state = encode(params, features);
    int prev = vocab.bos;
    for (int tok : seq) {
      auto [next, dist] = decode_step(params, state, prev);
      s += std::log(dist.data[static_cast<std::size_t>(tok)]);
      state = next;
      prev = tok;
    }
    return s;
  };
  auto consider = [&](const std::vector<int>& seq) {
    const double s = score_of(seq);
    if (s > best) {
      best = s;
      best_tokens = seq;
    }
  };
  // depth-first over non-EOS prefixes; at each node weigh stopping with EOS
  auto walk = [&](auto&& self, int depth) -> void {
    std::vector<int> with_eos = tokens;
    with_eos.push_back(vocab.eos);
    consider(with_eos);
    if (depth == max_len) return;
    if (depth == max_len - 1) {
      for (int t = 0; t < 4; ++t) {
        if (t == vocab.eos) continue;
        tokens.push_back(t);
        consider(tokens);  // truncated full-length caption
        tokens.pop_back();
      }
      return;
    }
    for (int t = 0; t < 4; ++t) {
      if (t == vocab.eos) continue;
      tokens.push_back(t);
      self(self, depth + 1);
      tokens.pop_back();
    }
  };
  walk(walk, 0);
  return best;
}

}  // namespace

TEST_SUITE("decoding") {

TEST_CASE("config validation rejects each out-of-range field") {
  DecodeConfig ok;
  CHECK_NOTHROW(validate_decode_config(ok));

  DecodeConfig c = ok;
  c.beam_width = 0;
  CHECK_THROWS_AS(validate_decode_config(c), ConfigError);
  c = ok;
  c.repetition_penalty = 0.99;
  CHECK_THROWS_AS(validate_decode_config(c), ConfigError);
  c = ok;
  c.no_repeat_ngram = -1;
  CHECK_THROWS_AS(validate_decode_config(c), ConfigError);
  c = ok;
  c.contrastive_alpha = 1.01;
  CHECK_THROWS_AS(validate_decode_config(c), ConfigError);
  c = ok;
  c.contrastive_alpha = -0.01;
  CHECK_THROWS_AS(validate_decode_config(c), ConfigError);
  c = ok;
  c.contrastive_k = 0;
  CHECK_THROWS_AS(validate_decode_config(c), ConfigError);
  c = ok;
  c.top_p = 0.0;
  CHECK_THROWS_AS(validate_decode_config(c), ConfigError);
  c = ok;
  c.top_p = 1.0001;
  CHECK_THROWS_AS(validate_decode_config(c), ConfigError);
  c = ok;
  c.max_length = 0;
  CHECK_THROWS_AS(validate_decode_config(c), ConfigError);
}

TEST_CASE("identity constraints return the distribution bit for bit") {
  Array dist({4});
  dist.data = {0.4, 0.3, 0.2, 0.1};
  const std::vector<int> history = {0, 2, 0, 3};
  const Array out = apply_constraints(dist, history, identity_config(Strategy::greedy), 1);
  CHECK(out.data == dist.data);

  Array bad({2, 2});
  CHECK_THROWS_AS(apply_constraints(bad, history, identity_config(Strategy::greedy), 1),
                  ShapeError);
  CHECK_THROWS_AS(apply_constraints(dist, history, identity_config(Strategy::greedy), 4),
                  IndexError);
  CHECK_THROWS_AS(apply_constraints(dist, history, identity_config(Strategy::greedy), -1),
                  IndexError);
}

TEST_CASE("repetition penalty doubles negative log scores of seen tokens") {
  Array dist({3});
  dist.data = {0.5, 0.3, 0.2};
  DecodeConfig c = identity_config(Strategy::greedy);
  c.repetition_penalty = 2.0;
  const std::vector<int> history = {0};
  // log .5 < 0, so the penalty multiplies: exp(2 log .5) = .25, then renorm
  const Array out = apply_constraints(dist, history, c, 2);
  CHECK(out.data[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(out.data[1] == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(out.data[2] == doctest::Approx(4.0 / 15.0).epsilon(1e-12));

  // positive-score convention: scores above 0 are divided instead
  Array raw({2});
  raw.data = {2.0, 0.5};
  const Array out2 = apply_constraints(raw, history, c, 1);
  const double penalized = std::sqrt(2.0);  // exp(log(2) / 2)
  CHECK(out2.data[0] == doctest::Approx(penalized / (penalized + 0.5)).epsilon(1e-12));
}

TEST_CASE("no-repeat-ngram bans exactly the completing token") {
  Array dist({4});
  dist.data = {0.25, 0.25, 0.25, 0.25};
  DecodeConfig c = identity_config(Strategy::greedy);
  c.no_repeat_ngram = 3;
  // history a b c a b : emitting c would repeat the trigram (a b c)
  const std::vector<int> history = {0, 2, 3, 0, 2};
  const Array out = apply_constraints(dist, history, c, 1);
  CHECK(out.data[3] == 0.0);
  CHECK(out.data[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(out.data[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(out.data[2] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  // bigram variant: history a b a, last unigram (a) previously preceded b
  DecodeConfig c2 = identity_config(Strategy::greedy);
  c2.no_repeat_ngram = 2;
  const std::vector<int> history2 = {0, 2, 0};
  const Array out2 = apply_constraints(dist, history2, c2, 1);
  CHECK(out2.data[2] == 0.0);
  CHECK(out2.data[0] > 0.0);
}

TEST_CASE("eos blocking zeroes and renormalizes") {
  Array dist({3});
  dist.data = {0.6, 0.3, 0.1};
  DecodeConfig c = identity_config(Strategy::greedy);
  c.block_eos = true;
  const Array out = apply_constraints(dist, {}, c, 1);
  CHECK(out.data[1] == 0.0);
  CHECK(out.data[0] == doctest::Approx(6.0 / 7.0).epsilon(1e-12));
  CHECK(out.data[2] == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
}

TEST_CASE("masking every token deadlocks") {
  Array dist({1});
  dist.data = {1.0};
  DecodeConfig c = identity_config(Strategy::greedy);
  c.block_eos = true;
  CHECK_THROWS_AS(apply_constraints(dist, {}, c, 0), ConstraintDeadlockError);
}

TEST_CASE("beam width one degenerates to greedy") {
  const Vocabulary vocab = Vocabulary::standard();
  ModelDims dims;
  dims.feature_dim = feature_dim(vocab);
  dims.vocab = vocab.size();
  dims.hidden = 16;
  dims.embed = 8;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const CaptionerParams params = init_params(seed, dims);
    const Array f = random_features(seed * 31, dims.feature_dim);
    DecodeConfig greedy = identity_config(Strategy::greedy);
    greedy.max_length = 12;
    DecodeConfig beam1 = identity_config(Strategy::beam);
    beam1.beam_width = 1;
    beam1.max_length = 12;
    const DecodeResult a = decode(params, f, greedy, vocab);
    const DecodeResult b = decode(params, f, beam1, vocab);
    CHECK(a.caption.tokens == b.caption.tokens);
    CHECK(a.caption.terminated == b.caption.terminated);
    CHECK(a.step_probs == b.step_probs);
  }
}

TEST_CASE("beam five finds the exhaustive optimum on a four-token world") {
  const Vocabulary vocab = tiny_vocab();
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const CaptionerParams params = tiny_model(seed);
    const Array f = random_features(seed * 7 + 1, params.dims.feature_dim);
    DecodeConfig c = identity_config(Strategy::beam);
    c.beam_width = 5;
    c.max_length = 4;
    const DecodeResult r = decode(params, f, c, vocab);

    std::vector<int> best_tokens;
    const double best = exhaustive_best(params, f, vocab, 4, best_tokens);
    CHECK(r.caption.tokens == best_tokens);
    CHECK(total_log_prob(r) == doctest::Approx(best).epsilon(1e-12));
  }
}

TEST_CASE("contrastive search with a single candidate is greedy") {
  const Vocabulary vocab = Vocabulary::standard();
  ModelDims dims;
  dims.feature_dim = feature_dim(vocab);
  dims.vocab = vocab.size();
  dims.hidden = 16;
  dims.embed = 8;
  const CaptionerParams params = init_params(77, dims);
  const Array f = random_features(99, dims.feature_dim);

  DecodeConfig greedy = identity_config(Strategy::greedy);
  greedy.max_length = 10;
  DecodeConfig contrastive = identity_config(Strategy::contrastive);
  contrastive.contrastive_k = 1;
  contrastive.contrastive_alpha = 0.7;
  contrastive.max_length = 10;
  const DecodeResult a = decode(params, f, greedy, vocab);
  const DecodeResult b = decode(params, f, contrastive, vocab);
  CHECK(a.caption.tokens == b.caption.tokens);
  CHECK(a.step_probs == b.step_probs);
}

TEST_CASE("nucleus with a vanishing mass cutoff is greedy") {
  const Vocabulary vocab = Vocabulary::standard();
  ModelDims dims;
  dims.feature_dim = feature_dim(vocab);
  dims.vocab = vocab.size();
  dims.hidden = 16;
  dims.embed = 8;
  const CaptionerParams params = init_params(123, dims);
  const Array f = random_features(321, dims.feature_dim);

  DecodeConfig greedy = identity_config(Strategy::greedy);
  greedy.max_length = 10;
  DecodeConfig nucleus = identity_config(Strategy::nucleus);
  nucleus.top_p = 1e-12;  // the top token alone always covers the nucleus
  nucleus.max_length = 10;
  nucleus.rng_seed = 5;
  const DecodeResult a = decode(params, f, greedy, vocab);
  const DecodeResult b = decode(params, f, nucleus, vocab);
  CHECK(a.caption.tokens == b.caption.tokens);
}

TEST_CASE("nucleus sampling reproduces bit for bit under a fixed seed") {
  const Vocabulary vocab = Vocabulary::standard();
  ModelDims dims;
  dims.feature_dim = feature_dim(vocab);
  dims.vocab = vocab.size();
  dims.hidden = 16;
  dims.embed = 8;
  const CaptionerParams params = init_params(55, dims);
  const Array f = random_features(66, dims.feature_dim);

  DecodeConfig c = identity_config(Strategy::nucleus);
  c.top_p = 0.9;
  c.max_length = 24;
  c.rng_seed = 2024;
  const DecodeResult a = decode(params, f, c, vocab);
  const DecodeResult b = decode(params, f, c, vocab);
  CHECK(a.caption.tokens == b.caption.tokens);
  CHECK(a.step_probs == b.step_probs);
  CHECK(a.caption.terminated == b.caption.terminated);
}

TEST_CASE("blocking eos forces full-length truncated captions") {
  const Vocabulary vocab = Vocabulary::standard();
  ModelDims dims;
  dims.feature_dim = feature_dim(vocab);
  dims.vocab = vocab.size();
  dims.hidden = 16;
  dims.embed = 8;
  const CaptionerParams params = init_params(9, dims);
  const Array f = random_features(10, dims.feature_dim);

  DecodeConfig c = identity_config(Strategy::greedy);
  c.block_eos = true;
  c.max_length = 20;
  const DecodeResult r = decode(params, f, c, vocab);
  CHECK(static_cast<int>(r.caption.tokens.size()) == 20);
  CHECK(r.truncated);
  CHECK_FALSE(r.caption.terminated);
  for (int tok : r.caption.tokens) CHECK(tok != vocab.eos);
}

TEST_CASE("step probs are the raw model probabilities of emitted tokens") {
  const Vocabulary vocab = Vocabulary::standard();
  ModelDims dims;
  dims.feature_dim = feature_dim(vocab);
  dims.vocab = vocab.size();
  dims.hidden = 16;
  dims.embed = 8;
  const CaptionerParams params = init_params(14, dims);
  const Array f = random_features(15, dims.feature_dim);

  DecodeConfig c;  // default beam config, constraints active
  c.max_length = 16;
  const DecodeResult r = decode(params, f, c, vocab);
  REQUIRE(r.step_probs.size() == r.caption.tokens.size());

  DecoderState state = encode(params, f);
  int prev = vocab.bos;
  for (std::size_t i = 0; i < r.caption.tokens.size(); ++i) {
    auto [next, dist] = decode_step(params, state, prev);
    CHECK(r.step_probs[i] == dist.data[static_cast<std::size_t>(r.caption.tokens[i])]);
    state = next;
    prev = r.caption.tokens[i];
  }
  if (r.caption.terminated) CHECK(r.caption.tokens.back() == vocab.eos);
}

}  // TEST_SUITE
