#include "caplab/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "caplab/errors.hpp"
#include "caplab/rng.hpp"

namespace caplab {

namespace fs = std::filesystem;

const char* const kTraceHeader =
    "step,mean_length,unigram_recall,object_recall,chair,capture_f1,cider,"
    "coherence_proxy,p_eos,p_ros";

const char* stage_name(Stage stage) {
  switch (stage) {
    case Stage::xent: return "xent";
    case Stage::debias: return "debias";
    case Stage::reinforce: return "reinforce";
  }
  throw ContractError("unknown stage");
}

Stage stage_from_name(const std::string& name) {
  if (name == "xent") return Stage::xent;
  if (name == "debias") return Stage::debias;
  if (name == "reinforce") return Stage::reinforce;
  throw ConfigError("unknown stage: " + name);
}

void validate_train_config(const TrainConfig& config) {
  if (!(config.learning_rate > 0.0) || !std::isfinite(config.learning_rate)) {
    throw ConfigError("learning-rate must be positive and finite");
  }
  if (config.batch_size < 1) throw ConfigError("batch-size must be >= 1");
  if (config.grad_accum_steps < 1) throw ConfigError("grad-accum-steps must be >= 1");
  if (config.max_steps < 0) throw ConfigError("max-steps must be >= 0");
  if (config.stop_mean_length < 0.0 || !std::isfinite(config.stop_mean_length)) {
    throw ConfigError("stop-mean-length must be >= 0");
  }
  if (config.probe_every < 1) throw ConfigError("probe-every must be >= 1");
  if (config.debias_target_token < -1) throw ConfigError("target-token must be -1 or a token id");
  validate_decode_config(config.decode_train);
  validate_decode_config(config.decode_eval);
}

TrainingSet prepare_training_set(std::vector<SceneRecord> records, const Vocabulary& vocab,
                                 double noise_sigma) {
  TrainingSet set;
  set.vocab = &vocab;
  set.features.reserve(records.size());
  for (const SceneRecord& rec : records) {
    set.features.push_back(render_features(rec.scene, vocab, noise_sigma));
  }
  set.records = std::move(records);
  return set;
}

double xent_step(CaptionerParams& params, const TrainingSet& data,
                 std::span<const std::size_t> indices, double learning_rate,
                 int grad_accum_steps) {
  if (indices.empty()) throw ContractError("xent_step needs a nonempty batch");
  if (grad_accum_steps < 1) throw ConfigError("grad-accum-steps must be >= 1");
  const Vocabulary& vocab = *data.vocab;
  const std::size_t total = indices.size();
  const std::size_t micro = (total + static_cast<std::size_t>(grad_accum_steps) - 1) /
                            static_cast<std::size_t>(grad_accum_steps);

  Gradients acc = Gradients::zeros_like(params);
  double loss = 0.0;
  for (std::size_t begin = 0; begin < total; begin += micro) {
    const std::size_t end = std::min(begin + micro, total);
    TapeModel tm(params);
    int batch_sum = -1;
    for (std::size_t pos = begin; pos < end; ++pos) {
      const std::size_t idx = indices[pos];
      if (idx >= data.records.size()) throw IndexError("sample index out of range");
      const Caption& ref = data.records[idx].short_ref;
      if (ref.tokens.empty() || ref.tokens.back() != vocab.eos) {
        throw DataError("teacher-forcing reference must terminate with EOS");
      }
      int hidden = tm.encode_node(data.features[idx]);
      int prev = vocab.bos;
      int ce_sum = -1;
      for (int target : ref.tokens) {
        auto [next_hidden, dist] = tm.step_nodes(hidden, prev);
        const int ce = tm.tape().cross_entropy(dist, target);
        ce_sum = ce_sum < 0 ? ce : tm.tape().add(ce_sum, ce);
        hidden = next_hidden;
        prev = target;
      }
      const int mean_ce =
          tm.tape().affine(ce_sum, 1.0 / static_cast<double>(ref.tokens.size()), 0.0);
      batch_sum = batch_sum < 0 ? mean_ce : tm.tape().add(batch_sum, mean_ce);
    }
    const int root = tm.tape().affine(batch_sum, 1.0 / static_cast<double>(total), 0.0);
    loss += tm.tape().value(root).data[0];
    tm.backward(root);
    acc.axpy(1.0, tm.grads());
  }
  sgd_update(params, acc, learning_rate);
  return loss;
}

DebiasStats eos_debias_step(CaptionerParams& params, const TrainingSet& data,
                            std::span<const std::size_t> indices, const DecodeConfig& rollout,
                            double learning_rate, std::uint64_t step_seed, int target_token) {
  const Vocabulary& vocab = *data.vocab;
  const int target = target_token < 0 ? vocab.eos : target_token;
  if (target >= params.dims.vocab) throw ConfigError("target-token outside vocabulary");

  DebiasStats stats;
  std::vector<std::pair<std::size_t, Caption>> terminated;
  double ros_sum = 0.0;
  int ros_count = 0;
  for (std::size_t pos = 0; pos < indices.size(); ++pos) {
    const std::size_t idx = indices[pos];
    if (idx >= data.records.size()) throw IndexError("sample index out of range");
    DecodeConfig per_sample = rollout;
    per_sample.rng_seed = substream(step_seed, "sample", pos);
    const DecodeResult r = decode(params, data.features[idx], per_sample, vocab);
    if (r.caption.tokens.empty()) {
      ++stats.skipped;
      continue;
    }
    for (std::size_t k = 0; k < r.caption.tokens.size(); ++k) {
      if (r.caption.tokens[k] == vocab.eos) continue;
      ros_sum += r.step_probs[k];
      ++ros_count;
    }
    if (r.caption.terminated) {
      ++stats.terminated;
      terminated.emplace_back(idx, r.caption);
    } else {
      ++stats.truncated;
    }
  }
  stats.mean_p_ros = ros_count > 0 ? ros_sum / static_cast<double>(ros_count) : 0.0;
  if (terminated.empty()) return stats;  // no gradient source

  Gradients acc = Gradients::zeros_like(params);
  double p_sum = 0.0;
  for (const auto& [idx, caption] : terminated) {
    // the emission step is the terminal EOS; everything before it is context
    const std::span<const int> prefix(caption.tokens.data(), caption.tokens.size() - 1);
    TapeModel tm(params);
    const int log_p = tm.conditional_log_prob_node(data.features[idx], prefix, target);
    p_sum += std::exp(tm.tape().value(log_p).data[0]);
    tm.backward(log_p);
    acc.axpy(1.0, tm.grads());
  }
  acc.scale(1.0 / static_cast<double>(terminated.size()));
  stats.mean_p_target = p_sum / static_cast<double>(terminated.size());
  // descending on +log p(target) reduces the target's probability
  sgd_update(params, acc, learning_rate);
  return stats;
}

Gradients reinforce_gradient(const CaptionerParams& params, const TrainingSet& data,
                             std::span<const std::size_t> indices, const DecodeConfig& rollout,
                             std::uint64_t step_seed, const RewardFn& reward,
                             ReinforceStats* stats) {
  const Vocabulary& vocab = *data.vocab;
  Gradients acc = Gradients::zeros_like(params);
  ReinforceStats local;
  for (std::size_t pos = 0; pos < indices.size(); ++pos) {
    const std::size_t idx = indices[pos];
    if (idx >= data.records.size()) throw IndexError("sample index out of range");
    DecodeConfig per_sample = rollout;
    per_sample.rng_seed = substream(step_seed, "sample", pos);
    const DecodeResult r = decode(params, data.features[idx], per_sample, vocab);
    if (r.caption.tokens.empty()) {
      ++local.skipped;
      continue;
    }
    const double reward_value = reward(r.caption, data.records[idx]);
    if (!std::isfinite(reward_value)) {
      ++local.skipped;
      continue;
    }
    TapeModel tm(params);
    const int slp = tm.sequence_log_prob_node(
        data.features[idx], std::span<const int>(r.caption.tokens.data(), r.caption.tokens.size()));
    // uniform per-token credit: loss contribution is -(R/n) * sum log p(t_i)
    const int root = tm.tape().affine(
        slp, -reward_value / static_cast<double>(r.caption.tokens.size()), 0.0);
    tm.backward(root);
    acc.axpy(1.0, tm.grads());
    local.mean_reward += reward_value;
    ++local.used;
  }
  if (local.used > 0) {
    acc.scale(1.0 / static_cast<double>(local.used));
    local.mean_reward /= static_cast<double>(local.used);
  }
  if (stats != nullptr) *stats = local;
  return acc;
}

ReinforceStats reinforce_step(CaptionerParams& params, const TrainingSet& data,
                              std::span<const std::size_t> indices, const DecodeConfig& rollout,
                              double learning_rate, std::uint64_t step_seed,
                              const RewardFn& reward) {
  ReinforceStats stats;
  const Gradients grads =
      reinforce_gradient(params, data, indices, rollout, step_seed, reward, &stats);
  if (stats.used > 0) sgd_update(params, grads, learning_rate);
  return stats;
}

ProbeResult probe_decode(const CaptionerParams& params, const TrainingSet& probe,
                         const DecodeConfig& decode_eval, const CorpusStats& stats,
                         std::uint64_t seed, int step) {
  const Vocabulary& vocab = *probe.vocab;
  ProbeResult out;
  out.captions.reserve(probe.records.size());
  double eos_sum = 0.0;
  int eos_count = 0;
  double ros_sum = 0.0;
  int ros_count = 0;
  for (std::size_t i = 0; i < probe.records.size(); ++i) {
    DecodeConfig dc = decode_eval;
    dc.rng_seed = substream(seed, "probe", static_cast<std::uint64_t>(step), i);
    DecodeResult r = decode(params, probe.features[i], dc, vocab);
    if (r.caption.terminated && !r.step_probs.empty()) {
      eos_sum += r.step_probs.back();
      ++eos_count;
    }
    for (std::size_t k = 0; k < r.caption.tokens.size(); ++k) {
      if (r.caption.tokens[k] == vocab.eos) continue;
      ros_sum += r.step_probs[k];
      ++ros_count;
    }
    out.captions.push_back(std::move(r.caption));
  }
  const BatchEvaluation ev = evaluate_batch(out.captions, probe.records, stats, vocab);
  out.report = ev.report;
  out.p_eos = eos_count > 0 ? eos_sum / static_cast<double>(eos_count) : 0.0;
  out.p_ros = ros_count > 0 ? ros_sum / static_cast<double>(ros_count) : 0.0;
  return out;
}

double auto_stop_length(const TrainingSet& train, const TrainConfig& config) {
  if (train.records.empty()) throw PreconditionError("training set is empty");
  double total = 0.0;
  for (const SceneRecord& rec : train.records) {
    total += static_cast<double>(content_tokens(rec.full_ref, *train.vocab).size());
  }
  const double target = 2.0 * total / static_cast<double>(train.records.size());
  return std::min(target, static_cast<double>(config.decode_eval.max_length));
}

std::vector<std::size_t> batch_indices(std::uint64_t seed, Stage stage, int step,
                                       std::size_t count, std::size_t dataset_size) {
  if (dataset_size == 0) throw PreconditionError("dataset is empty");
  SplitMix64 rng(substream(seed, "batch", static_cast<std::uint64_t>(stage),
                           static_cast<std::uint64_t>(step)));
  std::vector<std::size_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = rng.below(dataset_size);
  return out;
}

std::string checkpoint_path(const std::string& out_dir, int step) {
  char name[32];
  std::snprintf(name, sizeof(name), "ckpt_%06d.bin", step);
  return (fs::path(out_dir) / name).string();
}

namespace {

std::vector<int> checkpoint_steps(const std::string& out_dir) {
  std::vector<int> steps;
  if (!fs::is_directory(out_dir)) return steps;
  for (const auto& entry : fs::directory_iterator(out_dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() != 15 || name.rfind("ckpt_", 0) != 0 || name.substr(11) != ".bin") continue;
    const std::string digits = name.substr(5, 6);
    if (digits.find_first_not_of("0123456789") != std::string::npos) continue;
    steps.push_back(std::stoi(digits));
  }
  std::sort(steps.begin(), steps.end());
  return steps;
}

std::string format_trace_row(int step, const ProbeResult& pr) {
  char buf[320];
  std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", step,
                pr.report.mean_length, pr.report.unigram_recall, pr.report.object_recall,
                pr.report.chair, pr.report.capture_f1, pr.report.cider,
                pr.report.coherence_proxy, pr.p_eos, pr.p_ros);
  return std::string(buf);
}

// keep the header and every row with step < keep_below; write a fresh header
// when the file is missing or malformed
void reset_trace(const std::string& path, int keep_below) {
  std::vector<std::string> kept;
  {
    std::ifstream in(path);
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
      if (first) {
        first = false;
        if (line == kTraceHeader) continue;  // header rewritten below
        break;                               // malformed: drop everything
      }
      const std::size_t comma = line.find(',');
      if (comma == std::string::npos) break;
      int step = -1;
      try {
        step = std::stoi(line.substr(0, comma));
      } catch (const std::exception&) {
        break;
      }
      if (step >= keep_below) break;
      kept.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write trace: " + path);
  out << kTraceHeader << '\n';
  for (const std::string& line : kept) out << line << '\n';
}

void append_trace_row(const std::string& path, const std::string& row) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot append trace: " + path);
  out << row << '\n';
  out.flush();
  if (!out) throw IoError("failed writing trace: " + path);
}

}  // namespace

int latest_checkpoint_step(const std::string& out_dir) {
  const std::vector<int> steps = checkpoint_steps(out_dir);
  return steps.empty() ? -1 : steps.back();
}

StageResult run_stage(CaptionerParams& params, const TrainConfig& config,
                      const TrainingSet& train, const TrainingSet& probe,
                      const std::string& out_dir, bool resume) {
  validate_train_config(config);
  if (train.records.empty()) throw PreconditionError("training set is empty");
  if (probe.records.empty()) throw PreconditionError("probe set is empty");
  const Vocabulary& vocab = *train.vocab;
  fs::create_directories(out_dir);

  const double stop_length = config.stop_mean_length > 0.0 ? config.stop_mean_length
                                                           : auto_stop_length(train, config);
  const CorpusStats probe_stats = reference_corpus_stats(probe.records, vocab);
  const std::string trace_path = (fs::path(out_dir) / "trace.csv").string();

  // reinforce reward: consensus metric against the full reference, document
  // frequencies from the training references
  CorpusStats train_stats;
  if (config.stage == Stage::reinforce) train_stats = reference_corpus_stats(train.records, vocab);
  const RewardFn reward = [&](const Caption& caption, const SceneRecord& record) {
    return cider(caption, {record.full_ref}, train_stats, vocab);
  };

  int start_step = 0;
  if (resume) {
    const std::vector<int> steps = checkpoint_steps(out_dir);
    for (auto it = steps.rbegin(); it != steps.rend(); ++it) {
      if (*it <= config.max_steps) {
        start_step = *it;
        break;
      }
    }
    if (start_step > 0) {
      const FrozenMask frozen = params.frozen;
      CaptionerParams loaded = load_checkpoint(checkpoint_path(out_dir, start_step));
      if (!(loaded.dims.feature_dim == params.dims.feature_dim &&
            loaded.dims.hidden == params.dims.hidden &&
            loaded.dims.vocab == params.dims.vocab && loaded.dims.embed == params.dims.embed)) {
        throw CheckpointError("resume checkpoint dims do not match the model config");
      }
      params = std::move(loaded);
      params.frozen = frozen;
    }
  }
  // the row for start_step is re-derived below, byte-identically
  reset_trace(trace_path, start_step);

  const std::size_t per_step =
      static_cast<std::size_t>(config.batch_size) * static_cast<std::size_t>(config.grad_accum_steps);

  StageResult res;
  auto emit_probe = [&](int step) -> ProbeResult {
    ProbeResult pr = probe_decode(params, probe, config.decode_eval, probe_stats, config.seed, step);
    append_trace_row(trace_path, format_trace_row(step, pr));
    save_checkpoint(checkpoint_path(out_dir, step), params);
    res.final_step = step;
    res.final_probe = pr.report;
    res.final_p_eos = pr.p_eos;
    res.final_p_ros = pr.p_ros;
    return pr;
  };

  ProbeResult pr = emit_probe(start_step);
  if (pr.report.mean_length >= stop_length) {
    res.stopped_by_length = true;
    return res;
  }

  for (int step = start_step + 1; step <= config.max_steps; ++step) {
    const std::vector<std::size_t> indices =
        batch_indices(config.seed, config.stage, step, per_step, train.records.size());
    const std::uint64_t step_seed = substream(config.seed, "rollout",
                                              static_cast<std::uint64_t>(config.stage),
                                              static_cast<std::uint64_t>(step));
    switch (config.stage) {
      case Stage::xent:
        xent_step(params, train, indices, config.learning_rate, config.grad_accum_steps);
        break;
      case Stage::debias:
        eos_debias_step(params, train, indices, config.decode_train, config.learning_rate,
                        step_seed, config.debias_target_token);
        break;
      case Stage::reinforce:
        reinforce_step(params, train, indices, config.decode_train, config.learning_rate,
                       step_seed, reward);
        break;
    }
    if (step % config.probe_every == 0 || step == config.max_steps) {
      pr = emit_probe(step);
      if (pr.report.mean_length >= stop_length) {
        res.stopped_by_length = true;
        break;
      }
    }
  }
  return res;
}

}  // namespace caplab
