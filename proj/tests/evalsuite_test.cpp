#include "lacap/evalsuite.hpp"
#include "lacap/tolerances.hpp"
#include "metric_oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace lacap;
using namespace lacap::testing;

namespace {

Tokens numbered(const std::string& prefix, int n) {
  Tokens t;
  for (int i = 0; i < n; ++i) t.push_back(prefix + std::to_string(i));
  return t;
}

}  // namespace

TEST(Bleu, IdenticalIsOne) {
  const Tokens t = tokenize("mild erythema with partial obliteration of the vascular pattern");
  EXPECT_NEAR(bleu4(t, t), 1.0, tol::kMetricOracle);
}

TEST(Bleu, DisjointLongSequencesScoreLow) {
  EXPECT_LT(bleu4(numbered("x", 30), numbered("y", 30)), 0.05);
}

TEST(Bleu, EmptyHypothesisIsZero) { EXPECT_EQ(bleu4({}, {"a"}), 0.0); }

TEST(Bleu, MatchesBruteForceOracle) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 1000; ++i) {
    const auto h = random_tokens(rng, 12), r = random_tokens(rng, 12);
    ASSERT_NEAR(bleu4(h, r), oracle_bleu4(h, r), tol::kMetricOracle);
  }
}

TEST(RougeL, ReorderedExample) {
  EXPECT_NEAR(rouge_l({"a", "b", "c", "d"}, {"a", "c", "b", "d"}), 0.75, tol::kMetricOracle);
}

TEST(RougeL, MatchesBruteForceOracle) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 1000; ++i) {
    const auto h = random_tokens(rng, 10), r = random_tokens(rng, 10);
    ASSERT_NEAR(rouge_l(h, r), oracle_rouge(h, r), tol::kMetricOracle);
  }
}

TEST(TokenPrecision, MultisetIntersection) {
  EXPECT_NEAR(token_precision({"a", "a", "b", "c"}, {"a", "b", "b"}), 0.5, tol::kMetricOracle);
}

TEST(MesAccuracy, CountsMatches) {
  const std::vector<int> p = {0, 1, 2, 3}, l = {0, 1, 3, 3};
  EXPECT_DOUBLE_EQ(mes_accuracy(p, l), 0.75);
  const std::vector<int> short_l = {0};
  EXPECT_THROW(mes_accuracy(p, short_l), std::invalid_argument);
}

TEST(Keywords, ExtractionFollowsTable) {
  ClinicalMetadata m;
  m.mes = 3;
  m.vascular_pattern = VascularPattern::obliterated;
  m.bleeding = true;
  m.erythema = Erythema::marked;
  m.friability = Friability::high;
  m.ulceration = Ulceration::deep;
  const auto k = extract_keywords(m);
  for (const char* w : {"severe", "inflammation", "bleeding", "marked", "erythema", "deep", "ulcers"}) {
    EXPECT_TRUE(k.count(w)) << w;
  }
  EXPECT_EQ(KeywordTable::standard().version(), 1);
}

TEST(Keywords, AlignmentPenalisesMissingFindings) {
  ClinicalMetadata m;
  m.mes = 2;
  m.bleeding = true;
  m.erythema = Erythema::moderate;
  m.friability = Friability::moderate;
  m.vascular_pattern = VascularPattern::obliterated;
  EXPECT_LT(alignment_score("moderate inflammation", m), 1.0);
  EXPECT_GT(alignment_score("moderate inflammation", m), 0.0);
}

TEST(HeatmapAlignment, LesionCaptionUsesIoU) {
  const std::vector<double> heat = {1.0, 0.8, 0.1, 0.0};
  const std::vector<double> mask = {1.0, 0.0, 0.0, 0.0};
  EXPECT_NEAR(heatmap_caption_alignment(heat, mask, "marked erythema"), 0.5, tol::kMetricOracle);
}

TEST(HeatmapAlignment, NormalCaptionRewardsMassOutsideMask) {
  const std::vector<double> heat = {1.0, 1.0, 1.0, 1.0};
  const std::vector<double> mask = {1.0, 0.0, 0.0, 0.0};
  EXPECT_NEAR(heatmap_caption_alignment(heat, mask, "normal mucosal surface"), 0.75, tol::kMetricOracle);
  const std::vector<double> empty(4, 0.0), cold(4, 0.0);
  EXPECT_DOUBLE_EQ(heatmap_caption_alignment(cold, empty, "ulcers"), 1.0);
}

TEST(HeatmapAlignment, SummarySkipsMissingMasks) {
  std::vector<HeatmapCase> cases(3);
  for (auto& c : cases) {
    c.heatmap = {1.0, 0.0};
    c.caption = "bleeding";
  }
  cases[0].mask = std::vector<double>{1.0, 0.0};
  cases[1].mask = std::vector<double>{0.0, 1.0};
  const auto s = heatmap_caption_alignment(cases);
  EXPECT_EQ(s.scored, 2u);
  EXPECT_EQ(s.skipped, 1u);
  EXPECT_NEAR(s.mean, 0.5, tol::kMetricOracle);
}

TEST(MetricReport, ValidateRejectsOutOfRange) {
  MetricReport r;
  r.n = 1;
  EXPECT_NO_THROW(r.validate());
  r.bleu4 = 1.5;
  EXPECT_THROW(r.validate(), std::logic_error);
  r.bleu4 = std::nan("");
  EXPECT_THROW(r.validate(), std::logic_error);
}

TEST(Bootstrap, IdenticalSystemsAreNotSignificant) {
  std::vector<std::string> refs, a;
  for (int i = 0; i < 40; ++i) {
    refs.push_back(std::to_string(i % 4));
    a.push_back(std::to_string((i * 7) % 4));
  }
  const auto r = paired_bootstrap("mes_accuracy", corpus_exact_match, a, a, refs, 500, 1);
  EXPECT_GT(r.p_value, 0.5);
  EXPECT_DOUBLE_EQ(r.observed_delta, 0.0);
}

TEST(Bootstrap, DominatingSystemIsSignificant) {
  std::vector<std::string> refs, a, b;
  for (int i = 0; i < 40; ++i) {
    refs.push_back(std::to_string(i % 4));
    a.push_back(refs.back());
    b.push_back(std::to_string((i + 1) % 4));
  }
  const auto r = paired_bootstrap("mes_accuracy", corpus_exact_match, a, b, refs, 500, 1);
  EXPECT_LT(r.p_value, 0.01);
  EXPECT_DOUBLE_EQ(r.observed_delta, 1.0);
}

TEST(Bootstrap, SeedDeterminismAndLengthCheck) {
  std::vector<std::string> refs = {"0", "1", "2", "3", "0", "1"};
  std::vector<std::string> a = {"0", "1", "0", "3", "1", "1"}, b = {"0", "0", "2", "3", "0", "2"};
  const auto r1 = paired_bootstrap("acc", corpus_exact_match, a, b, refs, 200, 4);
  const auto r2 = paired_bootstrap("acc", corpus_exact_match, a, b, refs, 200, 4);
  EXPECT_EQ(r1.p_value, r2.p_value);
  b.pop_back();
  EXPECT_THROW(paired_bootstrap("acc", corpus_exact_match, a, b, refs, 200, 4), std::invalid_argument);
}

// Exchangeable systems: p-values over many seeds are roughly uniform.
TEST(Bootstrap, ExchangeableSystemsRarelyReject) {
  std::mt19937_64 rng(77);
  std::bernoulli_distribution coin(0.5);
  int rejections = 0;
  const int trials = 100;
  for (int t = 0; t < trials; ++t) {
    std::vector<std::string> refs(30, "1"), a(30), b(30);
    for (int i = 0; i < 30; ++i) {
      a[i] = coin(rng) ? "1" : "0";
      b[i] = coin(rng) ? "1" : "0";
    }
    rejections += paired_bootstrap("acc", corpus_exact_match, a, b, refs, 200, t).p_value < 0.05;
  }
  EXPECT_LE(rejections, 12);
}
