#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "caplab/synthworld.hpp"

namespace caplab {

// Tokens that carry content: PAD/BOS stripped, sequence cut at the first EOS.
std::vector<int> content_tokens(const Caption& caption, const Vocabulary& vocab);

// Packed n-gram key for n in 1..4; requires every token id < 65535.
std::uint64_t ngram_key(const int* tokens, int n);

// Document frequencies of n-grams (n = 1..4) over a reference corpus.
// One "document" is the reference set of one sample; an n-gram counts once
// per document no matter how many of its references contain it.
struct CorpusStats {
  int document_count = 0;
  std::array<std::map<std::uint64_t, int>, 4> df;

  // log(N / max(df, 1)); unseen n-grams get the maximal idf.
  double idf(int n, std::uint64_t key) const;
};

CorpusStats build_corpus_stats(const std::vector<std::vector<Caption>>& documents,
                               const Vocabulary& vocab);

// TF-IDF cosine per n = 1..4 against each reference, Gaussian length
// penalty exp(-(len_c - len_r)^2 / (2 * 6^2)), averaged over references
// and n, scaled by 10. Empty candidate scores 0.
double cider(const Caption& candidate, const std::vector<Caption>& references,
             const CorpusStats& stats, const Vocabulary& vocab);

// chair: hallucinated category mentions / total category mentions (0 when the
// candidate mentions no category); object_recall: distinct scene categories
// mentioned / scene category count.
struct ChairRecall {
  double chair = 0.0;
  double object_recall = 0.0;
};
ChairRecall chair_and_recall(const Caption& candidate, const Scene& scene,
                             const Vocabulary& vocab);

// F1 over exact element-tuple matches between the parsed candidate and the
// scene's ground-truth element set; 0 when either side is empty.
double capture_f1(const Caption& candidate, const Scene& scene, const Vocabulary& vocab);

// Fraction of clause slots that parse successfully times
// (1 - repeated-trigram rate); 0 when the caption has no clause slots.
double coherence_proxy(const Caption& candidate, const Vocabulary& vocab);

// Distinct reference unigrams present in the candidate / distinct reference
// unigrams; specials excluded on both sides.
double unigram_recall(const Caption& candidate, const Caption& full_reference,
                      const Vocabulary& vocab);

struct SampleMetrics {
  double length = 0.0;
  double cider = 0.0;
  double chair = 0.0;
  double object_recall = 0.0;
  double unigram_recall = 0.0;
  double capture_f1 = 0.0;
  double coherence_proxy = 0.0;
};

struct MetricsReport {
  double cider = 0.0;
  double chair = 0.0;
  double object_recall = 0.0;
  double unigram_recall = 0.0;
  double capture_f1 = 0.0;
  double mean_length = 0.0;
  double coherence_proxy = 0.0;
  int sample_count = 0;
};

// Per-sample metrics plus their means. candidates[i] is scored against
// records[i]'s scene and full reference; stats must cover the records'
// references.
struct BatchEvaluation {
  MetricsReport report;
  std::vector<SampleMetrics> samples;
};
BatchEvaluation evaluate_batch(const std::vector<Caption>& candidates,
                               const std::vector<SceneRecord>& records,
                               const CorpusStats& stats, const Vocabulary& vocab);

// Convenience: corpus stats where each record's full reference is one document.
CorpusStats reference_corpus_stats(const std::vector<SceneRecord>& records,
                                   const Vocabulary& vocab);

// Versioned JSON report: dataset-level means plus per-sample rows.
void write_json_report(const std::string& path, const std::string& dataset_name,
                       const BatchEvaluation& eval,
                       const std::vector<Caption>& candidates,
                       const std::vector<SceneRecord>& records, const Vocabulary& vocab);

}  // namespace caplab
