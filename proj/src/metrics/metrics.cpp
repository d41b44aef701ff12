#include "mmk/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace mmk {

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(const Tokens& t, int n) {
  NgramCounts out;
  const std::size_t k = static_cast<std::size_t>(n);
  for (std::size_t i = 0; i + k <= t.size(); ++i) ++out[std::vector<std::string>(t.begin() + i, t.begin() + i + k)];
  return out;
}

std::size_t total(const NgramCounts& c) {
  std::size_t s = 0;
  for (const auto& [g, n] : c) s += n;
  return s;
}

std::size_t clipped_overlap(const NgramCounts& hyp, const NgramCounts& ref) {
  std::size_t s = 0;
  for (const auto& [g, n] : hyp) {
    auto it = ref.find(g);
    if (it != ref.end()) s += std::min(n, it->second);
  }
  return s;
}

double f1(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; }

double cosine_rows(const Tensor& e, TokenId a, TokenId b) {
  const std::size_t d = e.cols();
  double dot = 0, na = 0, nb = 0;
  for (std::size_t j = 0; j < d; ++j) {
    const double x = e.at(a, j), y = e.at(b, j);
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0 || nb == 0) return 0.0;
  return dot / std::sqrt(na * nb);
}

}  // namespace

BleuScores bleu(const Tokens& hyp, const Tokens& ref, int max_n) {
  BleuScores out;
  if (hyp.empty()) return out;
  const double c = static_cast<double>(hyp.size()), r = static_cast<double>(ref.size());
  const double bp = c <= r ? std::exp(1.0 - r / c) : 1.0;
  double log_sum = 0;
  int available = 0;
  for (int n = 1; n <= max_n; ++n) {
    const auto h = ngrams(hyp, n);
    const auto rf = ngrams(ref, n);
    const std::size_t denom = total(h);
    double score;
    if (denom == 0) {
      score = rf.empty() ? 100.0 * bp : 0.0;
    } else {
      const std::size_t hits = clipped_overlap(h, rf);
      double p = static_cast<double>(hits) / static_cast<double>(denom);
      if (n >= 2 && hits == 0) p = 1.0 / static_cast<double>(denom + 1);
      score = 100.0 * bp * p;
      log_sum += p > 0 ? std::log(p) : -INFINITY;
      ++available;
    }
    if (n <= 4) out.bn[n - 1] = score;
  }
  out.bleu = available > 0 && std::isfinite(log_sum) ? 100.0 * bp * std::exp(log_sum / available) : 0.0;
  return out;
}

double rouge_n(const Tokens& hyp, const Tokens& ref, int n) {
  const auto h = ngrams(hyp, n);
  const auto r = ngrams(ref, n);
  if (h.empty() || r.empty()) return 0.0;
  const double hits = static_cast<double>(clipped_overlap(h, r));
  return 100.0 * f1(hits / static_cast<double>(total(h)), hits / static_cast<double>(total(r)));
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const Tokens& hyp, const Tokens& ref) {
  if (hyp.empty() || ref.empty()) return 0.0;
  const double l = static_cast<double>(lcs_length(hyp, ref));
  return 100.0 * f1(l / static_cast<double>(hyp.size()), l / static_cast<double>(ref.size()));
}

std::string stem(std::string_view word) {
  static const std::vector<std::string_view> suffixes{"ations", "ation", "ingly", "ness", "ing",
                                                      "edly",   "ed",    "es",    "ly",   "s"};
  for (auto s : suffixes) {
    if (word.size() >= s.size() + 3 && word.substr(word.size() - s.size()) == s) {
      return std::string(word.substr(0, word.size() - s.size()));
    }
  }
  return std::string(word);
}

double meteor_lite(const Tokens& hyp, const Tokens& ref) {
  if (hyp.empty() || ref.empty()) return 0.0;
  std::vector<long> align(hyp.size(), -1);  // hyp index -> ref index
  std::vector<bool> used(ref.size(), false);
  auto stage = [&](auto key) {
    for (std::size_t i = 0; i < hyp.size(); ++i) {
      if (align[i] >= 0) continue;
      const auto k = key(hyp[i]);
      for (std::size_t j = 0; j < ref.size(); ++j) {
        if (!used[j] && key(ref[j]) == k) {
          align[i] = static_cast<long>(j);
          used[j] = true;
          break;
        }
      }
    }
  };
  stage([](const std::string& w) { return w; });
  stage([](const std::string& w) { return stem(w); });

  std::size_t matches = 0, chunks = 0;
  long prev_h = -2, prev_r = -2;
  for (std::size_t i = 0; i < hyp.size(); ++i) {
    if (align[i] < 0) continue;
    ++matches;
    if (!(static_cast<long>(i) == prev_h + 1 && align[i] == prev_r + 1)) ++chunks;
    prev_h = static_cast<long>(i);
    prev_r = align[i];
  }
  if (matches == 0) return 0.0;
  const double p = static_cast<double>(matches) / static_cast<double>(hyp.size());
  const double r = static_cast<double>(matches) / static_cast<double>(ref.size());
  const double fmean = 10 * p * r / (r + 9 * p);
  const double frag = static_cast<double>(chunks) / static_cast<double>(matches);
  return 100.0 * fmean * (1.0 - 0.5 * frag * frag * frag);
}

double jaccard(const Tokens& hyp, const Tokens& ref) {
  const std::set<std::string> a(hyp.begin(), hyp.end()), b(ref.begin(), ref.end());
  if (a.empty() && b.empty()) return 1.0;
  std::size_t inter = 0;
  for (const auto& x : a) inter += b.count(x);
  return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

double embed_sim(std::span<const TokenId> hyp, std::span<const TokenId> ref, const Tensor& embeddings) {
  if (hyp.empty() || ref.empty()) return 0.0;
  auto directed = [&](std::span<const TokenId> from, std::span<const TokenId> to) {
    double s = 0;
    for (TokenId a : from) {
      double best = -1.0;
      for (TokenId b : to) best = std::max(best, cosine_rows(embeddings, a, b));
      s += best;
    }
    return s / static_cast<double>(from.size());
  };
  const double p = directed(hyp, ref), r = directed(ref, hyp);
  return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
}

MetricReport score_pair(std::string_view hyp_text, std::string_view ref_text, const Vocabulary* vocab,
                        const Tensor* embeddings) {
  const Tokens hyp = tokenize(hyp_text), ref = tokenize(ref_text);
  MetricReport m;
  const BleuScores b = bleu(hyp, ref);
  m.b1 = b.bn[0];
  m.b2 = b.bn[1];
  m.b3 = b.bn[2];
  m.b4 = b.bn[3];
  m.bleu = b.bleu;
  m.r1 = rouge_n(hyp, ref, 1);
  m.r2 = rouge_n(hyp, ref, 2);
  m.rl = rouge_l(hyp, ref);
  m.meteor = meteor_lite(hyp, ref);
  m.jaccard = jaccard(hyp, ref);
  if (vocab && embeddings) {
    m.embed_sim = embed_sim(text_ids(hyp_text, *vocab), text_ids(ref_text, *vocab), *embeddings);
  } else {
    // One-hot embeddings over the pair's own token inventory.
    std::map<std::string, TokenId> ids;
    std::vector<TokenId> h, r;
    for (const auto& t : hyp) h.push_back(ids.emplace(t, static_cast<TokenId>(ids.size())).first->second);
    for (const auto& t : ref) r.push_back(ids.emplace(t, static_cast<TokenId>(ids.size())).first->second);
    if (!ids.empty()) {
      Tensor eye({ids.size(), ids.size()});
      for (std::size_t i = 0; i < ids.size(); ++i) eye.at(i, i) = 1.0;
      m.embed_sim = embed_sim(h, r, eye);
    }
  }
  return m;
}

MetricReport mean_report(std::span<const MetricReport> reports) {
  MetricReport m;
  if (reports.empty()) return m;
  for (const auto& r : reports) {
    m.b1 += r.b1;
    m.b2 += r.b2;
    m.b3 += r.b3;
    m.b4 += r.b4;
    m.bleu += r.bleu;
    m.r1 += r.r1;
    m.r2 += r.r2;
    m.rl += r.rl;
    m.meteor += r.meteor;
    m.jaccard += r.jaccard;
    m.embed_sim += r.embed_sim;
  }
  const double n = static_cast<double>(reports.size());
  for (double* f : {&m.b1, &m.b2, &m.b3, &m.b4, &m.bleu, &m.r1, &m.r2, &m.rl, &m.meteor, &m.jaccard, &m.embed_sim}) *f /= n;
  return m;
}

const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> cols{"B-1", "B-2",     "B-3",    "B-4",     "BLEU",    "R-1",
                                             "R-2", "ROUGE-L", "METEOR", "Jaccard", "EmbedSim"};
  return cols;
}

std::vector<double> metric_values(const MetricReport& r) {
  return {r.b1, r.b2, r.b3, r.b4, r.bleu, r.r1, r.r2, r.rl, r.meteor, r.jaccard, r.embed_sim};
}

}  // namespace mmk
