#pragma once

// Caption and classification metrics, heatmap/caption alignment and the
// paired bootstrap significance test.
//
// Conventions (not fixed by any external standard, reported with every
// metrics file):
//  * bleu4 is sentence-level, orders 1-4 with uniform weights and the usual
//    brevity penalty. An order with zero matches uses (0 + 1) / (total + 1).
//    Corpus scores are the mean of sentence scores.
//  * heatmap_caption_alignment scores IoU(heatmap >= 0.5, mask) when the
//    caption mentions a lesion term, otherwise 1 - (heatmap mass inside the
//    mask). 0/0 counts as 1.

#include "lacap/data.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace lacap {

class KeywordTable {
 public:
  static KeywordTable load(const std::filesystem::path& file);
  // data/keywords.json shipped with the sources.
  static const KeywordTable& standard();

  std::set<std::string> keywords(const ClinicalMetadata& m) const;
  const std::set<std::string>& lesion_terms() const { return lesion_terms_; }
  int version() const { return version_; }

 private:
  int version_ = 0;
  std::set<std::string> lesion_terms_;
  // field -> value -> keywords
  std::map<std::string, std::map<std::string, std::vector<std::string>>> table_;
};

std::set<std::string> extract_keywords(const ClinicalMetadata& m,
                                       const KeywordTable& table = KeywordTable::standard());
// Fraction of the metadata's keywords that occur as caption tokens; 1 when the
// keyword set is empty.
double alignment_score(const std::string& caption, const ClinicalMetadata& m,
                       const KeywordTable& table = KeywordTable::standard());

using Tokens = std::vector<std::string>;

double bleu4(const Tokens& hypothesis, const Tokens& reference);
double rouge_l(const Tokens& hypothesis, const Tokens& reference);
// |multiset intersection| / |hypothesis|
double token_precision(const Tokens& hypothesis, const Tokens& reference);
double mes_accuracy(std::span<const int> predictions, std::span<const int> labels);

// heatmap and mask are row-major H*W at the same resolution; mask > 0.5 is lesion.
double heatmap_caption_alignment(std::span<const double> heatmap, std::span<const double> mask,
                                 const std::string& caption,
                                 const KeywordTable& table = KeywordTable::standard());

struct HeatmapCase {
  std::vector<double> heatmap;
  std::optional<std::vector<double>> mask;
  std::string caption;
};

struct HeatmapAlignmentSummary {
  double mean = 0.0;
  std::size_t scored = 0;
  std::size_t skipped = 0;  // samples without a mask
};

HeatmapAlignmentSummary heatmap_caption_alignment(const std::vector<HeatmapCase>& cases,
                                                  const KeywordTable& table = KeywordTable::standard());

struct MetricReport {
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  double mes_accuracy = 0.0;
  double alignment_score = 0.0;
  double heatmap_caption_alignment = 0.0;
  double token_precision = 0.0;
  std::size_t n = 0;

  void validate() const;
  std::string to_json() const;
};

struct BootstrapResult {
  std::string metric;
  double observed_delta = 0.0;  // metric(a) - metric(b) on the full set
  double p_value = 1.0;         // fraction of resamples with metric(a) <= metric(b)
  int iterations = 1000;
  std::uint64_t seed = 0;

  std::string to_json() const;
};

// Corpus-level metric over aligned item lists.
using CorpusMetric = std::function<double(std::span<const std::string> outputs,
                                          std::span<const std::string> references)>;

BootstrapResult paired_bootstrap(const std::string& metric_name, const CorpusMetric& metric,
                                 const std::vector<std::string>& system_a,
                                 const std::vector<std::string>& system_b,
                                 const std::vector<std::string>& references, int iterations = 1000,
                                 std::uint64_t seed = 0);

// Ready-made corpus metrics over caption text or class-label strings.
double corpus_bleu4(std::span<const std::string> outputs, std::span<const std::string> references);
double corpus_rouge_l(std::span<const std::string> outputs, std::span<const std::string> references);
double corpus_exact_match(std::span<const std::string> outputs, std::span<const std::string> references);

}  // namespace lacap
