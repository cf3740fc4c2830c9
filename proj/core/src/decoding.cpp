#include "caplab/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "caplab/errors.hpp"
#include "caplab/kernels.hpp"
#include "caplab/rng.hpp"

namespace caplab {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

void validate_decode_config(const DecodeConfig& config) {
  if (config.beam_width < 1) throw ConfigError("beam-width must be >= 1");
  if (config.repetition_penalty < 1.0) throw ConfigError("repetition-penalty must be >= 1");
  if (config.no_repeat_ngram < 0) throw ConfigError("no-repeat-ngram must be >= 0");
  if (config.contrastive_alpha < 0.0 || config.contrastive_alpha > 1.0) {
    throw ConfigError("contrastive-alpha must be in [0, 1]");
  }
  if (config.contrastive_k < 1) throw ConfigError("contrastive-k must be >= 1");
  if (config.top_p <= 0.0 || config.top_p > 1.0) throw ConfigError("top-p must be in (0, 1]");
  if (config.max_length < 1) throw ConfigError("max-length must be >= 1");
}

Array apply_constraints(const Array& dist, std::span<const int> history,
                        const DecodeConfig& config, int eos_id) {
  if (dist.rank() != 1) throw ShapeError("apply_constraints expects a probability vector");
  const std::size_t v = dist.shape[0];
  if (eos_id < 0 || static_cast<std::size_t>(eos_id) >= v) {
    throw IndexError("eos id out of range");
  }

  std::vector<double> scores(v);
  for (std::size_t i = 0; i < v; ++i) scores[i] = std::log(dist.data[i]);
  bool modified = false;

  if (config.repetition_penalty != 1.0) {
    std::vector<bool> seen(v, false);
    for (int t : history) {
      if (t >= 0 && static_cast<std::size_t>(t) < v) seen[static_cast<std::size_t>(t)] = true;
    }
    for (std::size_t i = 0; i < v; ++i) {
      if (!seen[i]) continue;
      scores[i] = scores[i] > 0.0 ? scores[i] / config.repetition_penalty
                                  : scores[i] * config.repetition_penalty;
      modified = true;
    }
  }

  if (config.no_repeat_ngram > 0 &&
      history.size() + 1 >= static_cast<std::size_t>(config.no_repeat_ngram)) {
    // Ban every token that would complete an n-gram already in the history.
    const std::size_t g = static_cast<std::size_t>(config.no_repeat_ngram);
    const std::size_t ctx = g - 1;
    for (std::size_t i = 0; i + g <= history.size() + 1; ++i) {
      // candidate position of the banned token is history.size(); the match
      // window is history[i .. i+ctx-1] against the last ctx history tokens
      if (i + ctx > history.size()) break;
      bool match = true;
      for (std::size_t j = 0; j < ctx; ++j) {
        if (history[i + j] != history[history.size() - ctx + j]) {
          match = false;
          break;
        }
      }
      if (match && i + ctx < history.size()) {
        const int banned = history[i + ctx];
        if (banned >= 0 && static_cast<std::size_t>(banned) < v &&
            scores[static_cast<std::size_t>(banned)] != kNegInf) {
          scores[static_cast<std::size_t>(banned)] = kNegInf;
          modified = true;
        }
      }
    }
  }

  if (config.block_eos) {
    scores[static_cast<std::size_t>(eos_id)] = kNegInf;
    modified = true;
  }

  if (!modified) return dist;  // identity config leaves the row untouched

  double mx = kNegInf;
  for (double s : scores) mx = s > mx ? s : mx;
  if (mx == kNegInf) throw ConstraintDeadlockError("all tokens masked by constraints");

  Array out({v});
  double total = 0.0;
  for (std::size_t i = 0; i < v; ++i) {
    out.data[i] = scores[i] == kNegInf ? 0.0 : std::exp(scores[i] - mx);
    total += out.data[i];
  }
  for (std::size_t i = 0; i < v; ++i) out.data[i] /= total;
  return out;
}

namespace {

// argmax with ties going to the lowest index
int argmax_token(const Array& dist) {
  int best = 0;
  for (std::size_t i = 1; i < dist.numel(); ++i) {
    if (dist.data[i] > dist.data[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

// probability-descending order with ties going to the lower token index
std::vector<int> prob_order(const Array& dist) {
  std::vector<int> order(dist.numel());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const double pa = dist.data[static_cast<std::size_t>(a)];
    const double pb = dist.data[static_cast<std::size_t>(b)];
    if (pa != pb) return pa > pb;
    return a < b;
  });
  return order;
}

DecodeResult greedy_like_decode(const CaptionerParams& params, const Array& features,
                                const DecodeConfig& config, const Vocabulary& vocab) {
  DecodeResult res;
  DecoderState state = encode(params, features);
  // Contrastive similarity pool: the encode state, then the hidden state
  // reached after consuming each emitted token.
  std::vector<Array> prior_hiddens;
  if (config.strategy == Strategy::contrastive) prior_hiddens.push_back(state.hidden);
  SplitMix64 rng(substream(config.rng_seed, "nucleus"));
  int prev = vocab.bos;

  for (int step = 0; step < config.max_length; ++step) {
    auto [next_state, dist] = decode_step(params, state, prev);
    const Array adjusted = apply_constraints(dist, res.caption.tokens, config, vocab.eos);

    int chosen = -1;
    switch (config.strategy) {
      case Strategy::greedy: {
        chosen = argmax_token(adjusted);
        break;
      }
      case Strategy::nucleus: {
        const std::vector<int> order = prob_order(adjusted);
        // smallest prefix reaching top-p mass
        double mass = 0.0;
        std::size_t cut = 0;
        while (cut < order.size()) {
          mass += adjusted.data[static_cast<std::size_t>(order[cut])];
          ++cut;
          if (mass >= config.top_p) break;
        }
        const double threshold = rng.uniform() * mass;
        double acc = 0.0;
        chosen = order[cut - 1];
        for (std::size_t i = 0; i < cut; ++i) {
          acc += adjusted.data[static_cast<std::size_t>(order[i])];
          if (acc > threshold) {
            chosen = order[i];
            break;
          }
        }
        break;
      }
      case Strategy::contrastive: {
        const std::vector<int> order = prob_order(adjusted);
        double best_score = kNegInf;
        for (int ci = 0; ci < config.contrastive_k && ci < static_cast<int>(order.size()); ++ci) {
          const int cand = order[static_cast<std::size_t>(ci)];
          const double p = adjusted.data[static_cast<std::size_t>(cand)];
          if (p <= 0.0) break;  // masked candidates never qualify
          // candidate representation: hidden after consuming the candidate
          auto [after, after_dist] = decode_step(params, next_state, cand);
          (void)after_dist;
          double max_sim = kNegInf;
          for (const Array& h : prior_hiddens) {
            const double s = kernels::cosine_similarity(after.hidden, h);
            max_sim = s > max_sim ? s : max_sim;
          }
          const double score =
              (1.0 - config.contrastive_alpha) * p - config.contrastive_alpha * max_sim;
          if (score > best_score) {
            best_score = score;
            chosen = cand;
          }
        }
        if (chosen < 0) throw ContractError("contrastive search found no candidate");
        break;
      }
      case Strategy::beam:
        throw ContractError("beam handled separately");
    }

    res.step_probs.push_back(dist.data[static_cast<std::size_t>(chosen)]);
    res.caption.tokens.push_back(chosen);
    if (chosen == vocab.eos) {
      res.caption.terminated = true;
      return res;
    }
    state = std::move(next_state);
    prev = chosen;
    if (config.strategy == Strategy::contrastive) {
      // the pool wants the hidden state after consuming `chosen`
      auto [after, after_dist] = decode_step(params, state, chosen);
      (void)after_dist;
      prior_hiddens.push_back(std::move(after.hidden));
    }
  }
  res.truncated = true;
  return res;
}

struct BeamHyp {
  DecoderState state;
  std::vector<int> tokens;
  std::vector<double> raw_probs;
  double score = 0.0;  // sum of adjusted log-probs, no length normalization
  bool finished = false;
};

DecodeResult beam_decode(const CaptionerParams& params, const Array& features,
                         const DecodeConfig& config, const Vocabulary& vocab) {
  const int width = config.beam_width;
  std::vector<BeamHyp> live(1);
  live[0].state = encode(params, features);
  std::vector<BeamHyp> finished;

  struct Cand {
    double score;
    int hyp;
    int token;
    double raw_p;
    double adj_p;
  };

  for (int step = 0; step < config.max_length; ++step) {
    std::vector<Cand> cands;
    for (std::size_t hi = 0; hi < live.size(); ++hi) {
      BeamHyp& hyp = live[hi];
      const int prev = hyp.tokens.empty() ? vocab.bos : hyp.tokens.back();
      auto [next_state, dist] = decode_step(params, hyp.state, prev);
      hyp.state = std::move(next_state);  // state after consuming prev
      const Array adjusted = apply_constraints(dist, hyp.tokens, config, vocab.eos);
      for (std::size_t t = 0; t < adjusted.numel(); ++t) {
        if (adjusted.data[t] <= 0.0) continue;
        cands.push_back({hyp.score + std::log(adjusted.data[t]), static_cast<int>(hi),
                         static_cast<int>(t), dist.data[t], adjusted.data[t]});
      }
    }
    if (cands.empty()) throw ConstraintDeadlockError("all tokens masked by constraints");
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.hyp != b.hyp) return a.hyp < b.hyp;
      return a.token < b.token;
    });

    // Route the top candidates: EOS finishes a hypothesis, but only from the
    // top `width` ranks (so weak EOS branches never pollute the pool and
    // beam-1 degenerates to greedy exactly); others extend the beam.
    std::vector<BeamHyp> next_live;
    const std::size_t scan = std::min(cands.size(), static_cast<std::size_t>(2 * width));
    for (std::size_t rank = 0; rank < scan; ++rank) {
      const Cand& c = cands[rank];
      const BeamHyp& src = live[static_cast<std::size_t>(c.hyp)];
      if (c.token == vocab.eos) {
        if (rank < static_cast<std::size_t>(width)) {
          BeamHyp done = src;
          done.tokens.push_back(c.token);
          done.raw_probs.push_back(c.raw_p);
          done.score = c.score;
          done.finished = true;
          finished.push_back(std::move(done));
        }
      } else if (static_cast<int>(next_live.size()) < width) {
        BeamHyp ext = src;
        ext.tokens.push_back(c.token);
        ext.raw_probs.push_back(c.raw_p);
        ext.score = c.score;
        next_live.push_back(std::move(ext));
      }
    }
    live = std::move(next_live);

    if (static_cast<int>(finished.size()) >= width) break;
    if (live.empty()) break;
    if (!finished.empty()) {
      double best_live = kNegInf;
      for (const BeamHyp& h : live) best_live = h.score > best_live ? h.score : best_live;
      double worst_finished = finished.front().score;
      for (const BeamHyp& h : finished) {
        worst_finished = h.score < worst_finished ? h.score : worst_finished;
      }
      // scores only fall as hypotheses extend, so nothing live can improve
      // the pool once the best live hypothesis stops beating its floor
      if (best_live <= worst_finished) break;
    }
  }

  // Best total log-prob among terminated hypotheses and those that ran the
  // full max length (with EOS blocked, only the latter exist). Live prefixes
  // abandoned by an early stop are not results.
  const BeamHyp* best = nullptr;
  for (const BeamHyp& h : finished) {
    if (!best || h.score > best->score) best = &h;
  }
  for (const BeamHyp& h : live) {
    if (static_cast<int>(h.tokens.size()) < config.max_length) continue;
    if (!best || h.score > best->score) best = &h;
  }
  if (!best) throw ContractError("beam search produced no hypothesis");

  DecodeResult res;
  res.caption.tokens = best->tokens;
  res.caption.terminated = best->finished;
  res.step_probs = best->raw_probs;
  res.truncated = !best->finished;
  return res;
}

}  // namespace

DecodeResult decode(const CaptionerParams& params, const Array& features,
                    const DecodeConfig& config, const Vocabulary& vocab) {
  validate_decode_config(config);
  if (config.strategy == Strategy::beam) {
    return beam_decode(params, features, config, vocab);
  }
  return greedy_like_decode(params, features, config, vocab);
}

}  // namespace caplab
