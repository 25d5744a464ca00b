#include "lacap/evalsuite.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

namespace lacap {

namespace {

using NgramCounts = std::map<std::vector<std::string>, int>;

NgramCounts count_ngrams(const Tokens& tokens, std::size_t n) {
  NgramCounts counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

std::string metadata_value(const ClinicalMetadata& m, const std::string& field) {
  if (field == "mes") return std::to_string(m.mes);
  if (field == "vascular_pattern") return std::string(to_string(m.vascular_pattern));
  if (field == "bleeding") return m.bleeding ? "true" : "false";
  if (field == "erythema") return std::string(to_string(m.erythema));
  if (field == "friability") return std::string(to_string(m.friability));
  if (field == "ulceration") return std::string(to_string(m.ulceration));
  throw std::invalid_argument("keyword table: unknown field " + field);
}

void check_aligned(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw std::invalid_argument(std::string(what) + ": length mismatch (" + std::to_string(a) + " vs " +
                                std::to_string(b) + ")");
  }
}

std::uint64_t mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

// ---- keywords ----------------------------------------------------------------

KeywordTable KeywordTable::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read keyword table " + file.string());
  KeywordTable t;
  try {
    const auto j = nlohmann::json::parse(in);
    t.version_ = j.at("version").get<int>();
    for (const auto& term : j.at("lesion_terms")) t.lesion_terms_.insert(term.get<std::string>());
    for (const char* field : {"mes", "vascular_pattern", "bleeding", "erythema", "friability", "ulceration"}) {
      for (const auto& [value, words] : j.at(field).items()) {
        t.table_[field][value] = words.get<std::vector<std::string>>();
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("keyword table " + file.string() + ": " + e.what());
  }
  return t;
}

const KeywordTable& KeywordTable::standard() {
  static const KeywordTable table = load(std::filesystem::path(LACAP_DATA_DIR) / "keywords.json");
  return table;
}

std::set<std::string> KeywordTable::keywords(const ClinicalMetadata& m) const {
  std::set<std::string> out;
  for (const auto& [field, values] : table_) {
    auto it = values.find(metadata_value(m, field));
    if (it == values.end()) continue;
    out.insert(it->second.begin(), it->second.end());
  }
  return out;
}

std::set<std::string> extract_keywords(const ClinicalMetadata& m, const KeywordTable& table) {
  return table.keywords(m);
}

double alignment_score(const std::string& caption, const ClinicalMetadata& m, const KeywordTable& table) {
  const auto keys = table.keywords(m);
  if (keys.empty()) return 1.0;
  const auto tokens = tokenize(caption);
  const std::set<std::string> present(tokens.begin(), tokens.end());
  std::size_t hit = 0;
  for (const auto& k : keys) hit += present.count(k);
  return static_cast<double>(hit) / static_cast<double>(keys.size());
}

// ---- text metrics ------------------------------------------------------------

double bleu4(const Tokens& hypothesis, const Tokens& reference) {
  if (reference.empty()) throw std::invalid_argument("bleu4: empty reference");
  if (hypothesis.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto hyp = count_ngrams(hypothesis, n);
    const auto ref = count_ngrams(reference, n);
    long matched = 0, total = 0;
    for (const auto& [gram, c] : hyp) {
      total += c;
      auto it = ref.find(gram);
      if (it != ref.end()) matched += std::min(c, it->second);
    }
    const double p = matched > 0 ? static_cast<double>(matched) / static_cast<double>(total)
                                 : 1.0 / static_cast<double>(total + 1);
    log_sum += std::log(p) / 4.0;
  }
  const double c = static_cast<double>(hypothesis.size());
  const double r = static_cast<double>(reference.size());
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return std::clamp(bp * std::exp(log_sum), 0.0, 1.0);
}

double rouge_l(const Tokens& hypothesis, const Tokens& reference) {
  if (hypothesis.empty() || reference.empty()) throw std::invalid_argument("rouge_l: empty input");
  const std::size_t m = hypothesis.size(), n = reference.size();
  std::vector<std::size_t> prev(n + 1, 0), cur(n + 1, 0);
  for (std::size_t i = 1; i <= m; ++i) {
    for (std::size_t j = 1; j <= n; ++j) {
      cur[j] = hypothesis[i - 1] == reference[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  const double lcs = static_cast<double>(prev[n]);
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(m);
  const double r = lcs / static_cast<double>(n);
  return 2.0 * p * r / (p + r);
}

double token_precision(const Tokens& hypothesis, const Tokens& reference) {
  if (hypothesis.empty()) return 0.0;
  std::map<std::string, int> ref;
  for (const auto& t : reference) ++ref[t];
  std::size_t hit = 0;
  for (const auto& t : hypothesis) {
    auto it = ref.find(t);
    if (it != ref.end() && it->second > 0) {
      --it->second;
      ++hit;
    }
  }
  return static_cast<double>(hit) / static_cast<double>(hypothesis.size());
}

double mes_accuracy(std::span<const int> predictions, std::span<const int> labels) {
  check_aligned(predictions.size(), labels.size(), "mes_accuracy");
  if (labels.empty()) throw std::invalid_argument("mes_accuracy: no items");
  std::size_t ok = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) ok += predictions[i] == labels[i];
  return static_cast<double>(ok) / static_cast<double>(labels.size());
}

// ---- heatmap / caption alignment ------------------------------------------

double heatmap_caption_alignment(std::span<const double> heatmap, std::span<const double> mask,
                                 const std::string& caption, const KeywordTable& table) {
  check_aligned(heatmap.size(), mask.size(), "heatmap_caption_alignment");
  const auto tokens = tokenize(caption);
  const bool mentions_lesion = std::any_of(tokens.begin(), tokens.end(),
                                           [&](const std::string& t) { return table.lesion_terms().count(t) != 0; });
  if (mentions_lesion) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < heatmap.size(); ++i) {
      const bool h = heatmap[i] >= 0.5;
      const bool m = mask[i] > 0.5;
      inter += h && m;
      uni += h || m;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  }
  double total = 0.0, inside = 0.0;
  for (std::size_t i = 0; i < heatmap.size(); ++i) {
    total += heatmap[i];
    if (mask[i] > 0.5) inside += heatmap[i];
  }
  return total > 0.0 ? 1.0 - inside / total : 1.0;
}

HeatmapAlignmentSummary heatmap_caption_alignment(const std::vector<HeatmapCase>& cases, const KeywordTable& table) {
  HeatmapAlignmentSummary s;
  double sum = 0.0;
  for (const auto& c : cases) {
    if (!c.mask) {
      ++s.skipped;
      continue;
    }
    sum += heatmap_caption_alignment(c.heatmap, *c.mask, c.caption, table);
    ++s.scored;
  }
  s.mean = s.scored ? sum / static_cast<double>(s.scored) : 0.0;
  return s;
}

// ---- reports -------------------------------------------------------------------

void MetricReport::validate() const {
  if (n == 0) throw std::logic_error("MetricReport: no samples");
  for (double v : {bleu4, rouge_l, mes_accuracy, alignment_score, heatmap_caption_alignment, token_precision}) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::logic_error("MetricReport: metric outside [0,1]");
  }
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["bleu4"] = bleu4;
  j["rouge_l"] = rouge_l;
  j["mes_accuracy"] = mes_accuracy;
  j["alignment_score"] = alignment_score;
  j["heatmap_caption_alignment"] = heatmap_caption_alignment;
  j["token_precision"] = token_precision;
  j["n"] = n;
  j["conventions"] = {
      {"bleu4", "sentence-level BLEU-4, uniform weights, brevity penalty, (0+1)/(total+1) for orders with no match; "
                "corpus value is the mean over samples"},
      {"heatmap_caption_alignment", "artifact convention: IoU(heatmap>=0.5, mask) if the caption names a lesion, "
                                    "else 1 - heatmap mass inside mask; 0/0 = 1"},
      {"alignment_score", "fraction of label keywords present in caption, keyword table version " +
                              std::to_string(KeywordTable::standard().version())}};
  return j.dump(2);
}

std::string BootstrapResult::to_json() const {
  nlohmann::ordered_json j;
  j["metric"] = metric;
  j["observed_delta"] = observed_delta;
  j["p_value"] = p_value;
  j["iterations"] = iterations;
  j["seed"] = seed;
  j["definition"] = "p = fraction of paired resamples where metric(a) <= metric(b)";
  return j.dump(2);
}

// ---- bootstrap ---------------------------------------------------------------

BootstrapResult paired_bootstrap(const std::string& metric_name, const CorpusMetric& metric,
                                 const std::vector<std::string>& system_a,
                                 const std::vector<std::string>& system_b,
                                 const std::vector<std::string>& references, int iterations, std::uint64_t seed) {
  check_aligned(system_a.size(), references.size(), "paired_bootstrap");
  check_aligned(system_b.size(), references.size(), "paired_bootstrap");
  if (references.empty()) throw std::invalid_argument("paired_bootstrap: no items");
  if (iterations <= 0) throw std::invalid_argument("paired_bootstrap: iterations must be positive");

  BootstrapResult result;
  result.metric = metric_name;
  result.iterations = iterations;
  result.seed = seed;
  result.observed_delta = metric(system_a, references) - metric(system_b, references);

  const std::size_t n = references.size();
  std::vector<std::string> a(n), b(n), r(n);
  int not_better = 0;
  for (int it = 0; it < iterations; ++it) {
    std::mt19937_64 rng(mix(seed ^ (static_cast<std::uint64_t>(it) * 0xD1B54A32D192ED03ULL)));
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = pick(rng);
      a[i] = system_a[k];
      b[i] = system_b[k];
      r[i] = references[k];
    }
    if (metric(a, r) <= metric(b, r)) ++not_better;
  }
  result.p_value = static_cast<double>(not_better) / static_cast<double>(iterations);
  return result;
}

double corpus_bleu4(std::span<const std::string> outputs, std::span<const std::string> references) {
  check_aligned(outputs.size(), references.size(), "corpus_bleu4");
  double s = 0.0;
  for (std::size_t i = 0; i < outputs.size(); ++i) s += bleu4(tokenize(outputs[i]), tokenize(references[i]));
  return s / static_cast<double>(outputs.size());
}

double corpus_rouge_l(std::span<const std::string> outputs, std::span<const std::string> references) {
  check_aligned(outputs.size(), references.size(), "corpus_rouge_l");
  double s = 0.0;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const auto h = tokenize(outputs[i]);
    s += h.empty() ? 0.0 : rouge_l(h, tokenize(references[i]));
  }
  return s / static_cast<double>(outputs.size());
}

double corpus_exact_match(std::span<const std::string> outputs, std::span<const std::string> references) {
  check_aligned(outputs.size(), references.size(), "corpus_exact_match");
  std::size_t ok = 0;
  for (std::size_t i = 0; i < outputs.size(); ++i) ok += outputs[i] == references[i];
  return static_cast<double>(ok) / static_cast<double>(outputs.size());
}

}  // namespace lacap
