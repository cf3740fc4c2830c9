#include "caplab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "caplab/errors.hpp"
#include "json.hpp"

namespace caplab {

namespace {

constexpr int kMaxOrder = 4;
constexpr double kLengthSigma = 6.0;

// repeated-trigram rate over the content tokens: windows minus distinct
// trigrams, over windows (0 when fewer than 3 tokens)
double repeated_trigram_rate(const std::vector<int>& toks) {
  if (toks.size() < 3) return 0.0;
  const std::size_t windows = toks.size() - 2;
  std::set<std::uint64_t> distinct;
  for (std::size_t i = 0; i < windows; ++i) distinct.insert(ngram_key(toks.data() + i, 3));
  return static_cast<double>(windows - distinct.size()) / static_cast<double>(windows);
}

std::map<std::uint64_t, int> ngram_counts(const std::vector<int>& toks, int n) {
  std::map<std::uint64_t, int> counts;
  if (static_cast<int>(toks.size()) >= n) {
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i) {
      ++counts[ngram_key(toks.data() + i, n)];
    }
  }
  return counts;
}

// cosine between tf-idf vectors; tf normalization cancels in the cosine, so
// raw counts times idf are used directly
double tfidf_cosine(const std::map<std::uint64_t, int>& cand,
                    const std::map<std::uint64_t, int>& ref, int n,
                    const CorpusStats& stats) {
  double dot = 0.0;
  double cand_sq = 0.0;
  double ref_sq = 0.0;
  for (const auto& [key, count] : cand) {
    const double w = static_cast<double>(count) * stats.idf(n, key);
    cand_sq += w * w;
    const auto it = ref.find(key);
    if (it != ref.end()) dot += w * static_cast<double>(it->second) * stats.idf(n, key);
  }
  for (const auto& [key, count] : ref) {
    const double w = static_cast<double>(count) * stats.idf(n, key);
    ref_sq += w * w;
  }
  if (cand_sq == 0.0 || ref_sq == 0.0) return 0.0;
  return dot / (std::sqrt(cand_sq) * std::sqrt(ref_sq));
}

std::string caption_words(const Caption& caption, const Vocabulary& vocab) {
  const std::vector<int> toks = content_tokens(caption, vocab);
  std::string out;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (i > 0) out += ' ';
    out += vocab.token(toks[i]);
  }
  return out;
}

}  // namespace

std::vector<int> content_tokens(const Caption& caption, const Vocabulary& vocab) {
  std::vector<int> out;
  out.reserve(caption.tokens.size());
  for (int t : caption.tokens) {
    if (t == vocab.eos) break;
    if (t == vocab.pad || t == vocab.bos) continue;
    out.push_back(t);
  }
  return out;
}

std::uint64_t ngram_key(const int* tokens, int n) {
  if (n < 1 || n > kMaxOrder) throw ContractError("ngram order must be in 1..4");
  std::uint64_t key = 0;
  for (int i = 0; i < n; ++i) {
    if (tokens[i] < 0 || tokens[i] >= 65535) throw ContractError("token id outside packable range");
    key = key * 65536u + static_cast<std::uint64_t>(tokens[i]) + 1u;
  }
  return key;
}

double CorpusStats::idf(int n, std::uint64_t key) const {
  if (n < 1 || n > kMaxOrder) throw ContractError("ngram order must be in 1..4");
  if (document_count <= 0) throw ContractError("corpus stats have no documents");
  const auto& table = df[static_cast<std::size_t>(n - 1)];
  const auto it = table.find(key);
  const int freq = it == table.end() ? 0 : it->second;
  return std::log(static_cast<double>(document_count) / static_cast<double>(std::max(freq, 1)));
}

CorpusStats build_corpus_stats(const std::vector<std::vector<Caption>>& documents,
                               const Vocabulary& vocab) {
  CorpusStats stats;
  stats.document_count = static_cast<int>(documents.size());
  for (const auto& doc : documents) {
    std::array<std::set<std::uint64_t>, kMaxOrder> seen;
    for (const Caption& ref : doc) {
      const std::vector<int> toks = content_tokens(ref, vocab);
      for (int n = 1; n <= kMaxOrder; ++n) {
        for (const auto& [key, count] : ngram_counts(toks, n)) {
          (void)count;
          seen[static_cast<std::size_t>(n - 1)].insert(key);
        }
      }
    }
    for (int n = 1; n <= kMaxOrder; ++n) {
      for (std::uint64_t key : seen[static_cast<std::size_t>(n - 1)]) {
        ++stats.df[static_cast<std::size_t>(n - 1)][key];
      }
    }
  }
  return stats;
}

double cider(const Caption& candidate, const std::vector<Caption>& references,
             const CorpusStats& stats, const Vocabulary& vocab) {
  const std::vector<int> cand = content_tokens(candidate, vocab);
  if (cand.empty() || references.empty()) return 0.0;
  std::array<std::map<std::uint64_t, int>, kMaxOrder> cand_counts;
  for (int n = 1; n <= kMaxOrder; ++n) {
    cand_counts[static_cast<std::size_t>(n - 1)] = ngram_counts(cand, n);
  }
  double total = 0.0;
  for (const Caption& reference : references) {
    const std::vector<int> ref = content_tokens(reference, vocab);
    const double delta = static_cast<double>(cand.size()) - static_cast<double>(ref.size());
    const double penalty = std::exp(-(delta * delta) / (2.0 * kLengthSigma * kLengthSigma));
    double sim = 0.0;
    for (int n = 1; n <= kMaxOrder; ++n) {
      sim += tfidf_cosine(cand_counts[static_cast<std::size_t>(n - 1)], ngram_counts(ref, n), n,
                          stats);
    }
    total += penalty * sim / static_cast<double>(kMaxOrder);
  }
  return 10.0 * total / static_cast<double>(references.size());
}

ChairRecall chair_and_recall(const Caption& candidate, const Scene& scene,
                             const Vocabulary& vocab) {
  // token-id space, to match the mention scan below
  std::set<int> scene_categories;
  for (const ObjectInstance& obj : scene.objects)
    scene_categories.insert(vocab.category_begin + obj.category);

  int total_mentions = 0;
  int hallucinated = 0;
  std::set<int> mentioned_present;
  for (int t : content_tokens(candidate, vocab)) {
    if (!vocab.is_category(t)) continue;
    ++total_mentions;
    if (scene_categories.count(t) > 0) {
      mentioned_present.insert(t);
    } else {
      ++hallucinated;
    }
  }

  ChairRecall out;
  out.chair = total_mentions > 0
                  ? static_cast<double>(hallucinated) / static_cast<double>(total_mentions)
                  : 0.0;
  out.object_recall = scene_categories.empty()
                          ? 0.0
                          : static_cast<double>(mentioned_present.size()) /
                                static_cast<double>(scene_categories.size());
  return out;
}

double capture_f1(const Caption& candidate, const Scene& scene, const Vocabulary& vocab) {
  const ParseResult parsed = parse_caption(candidate, vocab);
  const std::vector<Element> truth = scene_elements(scene);
  if (parsed.elements.empty() || truth.empty()) return 0.0;
  std::size_t matches = 0;
  // both sides are sorted deduplicated sets
  std::size_t i = 0;
  std::size_t j = 0;
  while (i < parsed.elements.size() && j < truth.size()) {
    if (parsed.elements[i] == truth[j]) {
      ++matches;
      ++i;
      ++j;
    } else if (parsed.elements[i] < truth[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  const double precision = static_cast<double>(matches) / static_cast<double>(parsed.elements.size());
  const double recall = static_cast<double>(matches) / static_cast<double>(truth.size());
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

double coherence_proxy(const Caption& candidate, const Vocabulary& vocab) {
  const ParseResult parsed = parse_caption(candidate, vocab);
  if (parsed.clause_count == 0) return 0.0;
  const double parse_fraction =
      static_cast<double>(parsed.clause_count - parsed.clause_failures) /
      static_cast<double>(parsed.clause_count);
  const double rate = repeated_trigram_rate(content_tokens(candidate, vocab));
  return parse_fraction * (1.0 - rate);
}

double unigram_recall(const Caption& candidate, const Caption& full_reference,
                      const Vocabulary& vocab) {
  const std::vector<int> ref = content_tokens(full_reference, vocab);
  if (ref.empty()) return 0.0;
  const std::set<int> ref_set(ref.begin(), ref.end());
  const std::vector<int> cand = content_tokens(candidate, vocab);
  const std::set<int> cand_set(cand.begin(), cand.end());
  std::size_t covered = 0;
  for (int t : ref_set) covered += cand_set.count(t);
  return static_cast<double>(covered) / static_cast<double>(ref_set.size());
}

BatchEvaluation evaluate_batch(const std::vector<Caption>& candidates,
                               const std::vector<SceneRecord>& records,
                               const CorpusStats& stats, const Vocabulary& vocab) {
  if (candidates.size() != records.size()) {
    throw ContractError("candidate and record counts differ");
  }
  BatchEvaluation out;
  out.samples.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Caption& cand = candidates[i];
    const SceneRecord& rec = records[i];
    SampleMetrics s;
    s.length = static_cast<double>(content_tokens(cand, vocab).size());
    s.cider = cider(cand, {rec.full_ref}, stats, vocab);
    const ChairRecall cr = chair_and_recall(cand, rec.scene, vocab);
    s.chair = cr.chair;
    s.object_recall = cr.object_recall;
    s.unigram_recall = unigram_recall(cand, rec.full_ref, vocab);
    s.capture_f1 = capture_f1(cand, rec.scene, vocab);
    s.coherence_proxy = coherence_proxy(cand, vocab);
    out.samples.push_back(s);

    out.report.cider += s.cider;
    out.report.chair += s.chair;
    out.report.object_recall += s.object_recall;
    out.report.unigram_recall += s.unigram_recall;
    out.report.capture_f1 += s.capture_f1;
    out.report.mean_length += s.length;
    out.report.coherence_proxy += s.coherence_proxy;
  }
  out.report.sample_count = static_cast<int>(candidates.size());
  if (out.report.sample_count > 0) {
    const double inv = 1.0 / static_cast<double>(out.report.sample_count);
    out.report.cider *= inv;
    out.report.chair *= inv;
    out.report.object_recall *= inv;
    out.report.unigram_recall *= inv;
    out.report.capture_f1 *= inv;
    out.report.mean_length *= inv;
    out.report.coherence_proxy *= inv;
  }
  return out;
}

CorpusStats reference_corpus_stats(const std::vector<SceneRecord>& records,
                                   const Vocabulary& vocab) {
  std::vector<std::vector<Caption>> documents;
  documents.reserve(records.size());
  for (const SceneRecord& rec : records) documents.push_back({rec.full_ref});
  return build_corpus_stats(documents, vocab);
}

void write_json_report(const std::string& path, const std::string& dataset_name,
                       const BatchEvaluation& eval,
                       const std::vector<Caption>& candidates,
                       const std::vector<SceneRecord>& records, const Vocabulary& vocab) {
  if (candidates.size() != eval.samples.size() || records.size() != eval.samples.size()) {
    throw ContractError("report inputs disagree on sample count");
  }
  nlohmann::json root;
  root["schema_version"] = 1;
  root["dataset"] = dataset_name;
  root["report"] = {
      {"cider", eval.report.cider},
      {"chair", eval.report.chair},
      {"object_recall", eval.report.object_recall},
      {"unigram_recall", eval.report.unigram_recall},
      {"capture_f1", eval.report.capture_f1},
      {"mean_length", eval.report.mean_length},
      {"coherence_proxy", eval.report.coherence_proxy},
      {"sample_count", eval.report.sample_count},
  };
  nlohmann::json samples = nlohmann::json::array();
  for (std::size_t i = 0; i < eval.samples.size(); ++i) {
    const SampleMetrics& s = eval.samples[i];
    samples.push_back({
        {"index", i},
        {"scene_seed", records[i].scene.seed},
        {"caption", caption_words(candidates[i], vocab)},
        {"length", s.length},
        {"cider", s.cider},
        {"chair", s.chair},
        {"object_recall", s.object_recall},
        {"unigram_recall", s.unigram_recall},
        {"capture_f1", s.capture_f1},
        {"coherence_proxy", s.coherence_proxy},
    });
  }
  root["samples"] = std::move(samples);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write report: " + path);
  out << root.dump(2) << '\n';
  if (!out) throw IoError("failed writing report: " + path);
}

}  // namespace caplab
