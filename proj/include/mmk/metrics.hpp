#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmk/tensor.hpp"
#include "mmk/textproc.hpp"

namespace mmk {

using Tokens = std::vector<std::string>;

// Scores on a 0-100 scale except jaccard and embed_sim (0-1).
struct MetricReport {
  double b1 = 0, b2 = 0, b3 = 0, b4 = 0, bleu = 0;
  double r1 = 0, r2 = 0, rl = 0;
  double meteor = 0;
  double jaccard = 0;
  double embed_sim = 0;
};

struct BleuScores {
  std::array<double, 4> bn{};  // B-1..B-4
  double bleu = 0;             // composite
};

// Sentence BLEU with clipped n-gram precision and brevity penalty
// exp(1 - r/c) for c <= r. For n >= 2 a zero clipped count is smoothed to
// (0 + 1) / (total + 1). An order is available when the hypothesis has
// n-grams; the composite is BP * exp(mean log p_n) over available orders.
// An unavailable order scores 100*BP when the reference has no n-grams of
// that order either, else 0. Empty hypothesis: all zeros.
BleuScores bleu(const Tokens& hyp, const Tokens& ref, int max_n = 4);

// F1 of clipped n-gram overlap; 0 when either side has no n-grams.
double rouge_n(const Tokens& hyp, const Tokens& ref, int n);
std::size_t lcs_length(const Tokens& a, const Tokens& b);
double rouge_l(const Tokens& hyp, const Tokens& ref);

// Strips the first listed suffix that leaves a stem of >= 3 characters:
// ations, ation, ingly, ness, ing, edly, ed, es, ly, s.
std::string stem(std::string_view word);
// Exact then stem matching (leftmost-greedy), F_mean = 10PR / (R + 9P),
// penalty 0.5 * (chunks / matches)^3, score = 100 * F_mean * (1 - penalty).
double meteor_lite(const Tokens& hyp, const Tokens& ref);

// Token-set Jaccard; 1 when both are empty.
double jaccard(const Tokens& hyp, const Tokens& ref);

// Greedy-matching cosine F1 over rows of `embeddings` (a stand-in for
// BERTScore, not BERTScore itself). 0 when either side is empty.
double embed_sim(std::span<const TokenId> hyp, std::span<const TokenId> ref, const Tensor& embeddings);

// All metrics for one pair of raw texts. When `vocab`/`embeddings` are null
// embed_sim uses one-hot token embeddings (exact-token matching).
MetricReport score_pair(std::string_view hyp, std::string_view ref, const Vocabulary* vocab = nullptr,
                        const Tensor* embeddings = nullptr);

// Arithmetic mean of per-record reports (the corpus aggregate for every
// metric, BLEU included).
MetricReport mean_report(std::span<const MetricReport> reports);

// Column names in Table-1 order; values in the same order.
const std::vector<std::string>& metric_columns();
std::vector<double> metric_values(const MetricReport& r);

}  // namespace mmk
