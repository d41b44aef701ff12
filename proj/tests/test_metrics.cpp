#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "mmk/metrics.hpp"
#include "mmk/rng.hpp"

using namespace mmk;

namespace {

Tokens toks(const std::string& s) { return tokenize(s); }

nlohmann::json golden() {
  std::ifstream f(std::string(MMK_TEST_DATA_DIR) + "/metrics_golden.json");
  REQUIRE(f.good());
  return nlohmann::json::parse(f);
}

}  // namespace

TEST_CASE("bleu examples") {
  const auto b = bleu(toks("the cat sat"), toks("the cat sat on mat"));
  CHECK(b.bn[0] == doctest::Approx(100.0 * std::exp(1.0 - 5.0 / 3.0)).epsilon(1e-12));
  CHECK(b.bn[0] == doctest::Approx(51.34).epsilon(1e-3));
  CHECK(bleu(toks("a b c d e"), toks("a b c d e")).bleu == 100.0);
  // Zero 4-gram overlap, nonzero lower orders: smoothing keeps it positive.
  const auto s = bleu(toks("a b c x d e f"), toks("a b c y d e f"));
  CHECK(s.bn[3] > 0.0);
  CHECK(s.bleu > 0.0);
  const auto e = bleu({}, toks("a b"));
  CHECK(e.bleu == 0.0);
  for (double x : e.bn) CHECK(x == 0.0);
}

TEST_CASE("rouge examples") {
  CHECK(rouge_n(toks("a b c"), toks("a b c"), 1) == 100.0);
  CHECK(rouge_n(toks("a b"), toks("c d"), 1) == 0.0);
  CHECK(rouge_n(toks("a b c"), toks("a b d"), 1) == doctest::Approx(200.0 / 3.0).epsilon(1e-12));
  CHECK(lcs_length(toks("the cat sat"), toks("the cat sat on the mat")) == 3);
  CHECK(rouge_l(toks("the cat sat"), toks("the cat sat on the mat")) == doctest::Approx(200.0 / 3.0).epsilon(1e-12));
  CHECK(rouge_l(toks("x y z"), toks("x y z")) == 100.0);
  CHECK(lcs_length(toks("c b a"), toks("a b c")) == 1);
}

TEST_CASE("meteor examples and stemmer") {
  CHECK(meteor_lite(toks("a b c"), toks("a b c")) == doctest::Approx(100.0 * (1.0 - 0.5 / 27.0)).epsilon(1e-12));
  CHECK(meteor_lite(toks("a b c"), toks("a b c")) == doctest::Approx(98.15).epsilon(1e-4));
  CHECK(meteor_lite(toks("a b"), toks("c d")) == 0.0);
  CHECK(stem("cats") == "cat");
  CHECK(meteor_lite(toks("cats"), toks("cat")) > 0.0);
  CHECK(stem("relations") == "rel");
  CHECK(stem("gas") == "gas");  // stem would be shorter than 3
  CHECK(stem("running") == "runn");
  CHECK(stem("quickly") == "quick");
  CHECK(stem("kindness") == "kind");
}

TEST_CASE("jaccard examples") {
  CHECK(jaccard(toks("a b"), toks("b a")) == 1.0);
  CHECK(jaccard(toks("a b"), toks("b c")) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(jaccard(toks("a"), toks("b")) == 0.0);
  CHECK(jaccard({}, {}) == 1.0);
}

TEST_CASE("embed_sim examples") {
  const std::vector<TokenId> a{0, 1};
  const Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  CHECK(embed_sim(a, a, eye) == doctest::Approx(1.0).epsilon(1e-15));
  const std::vector<TokenId> x{0}, y{1};
  CHECK(embed_sim(x, y, eye) == 0.0);
  // Hand cosines with 2-d embeddings: rows (1,0), (1,1), (0,1).
  const Tensor e = Tensor::matrix({{1, 0}, {1, 1}, {0, 1}});
  const std::vector<TokenId> hyp{0, 2}, ref{1};
  const double c = 1.0 / std::sqrt(2.0);
  // P = mean(c, c) = c; R = max(c, c) = c; F1 = c.
  CHECK(embed_sim(hyp, ref, e) == doctest::Approx(c).epsilon(1e-12));
}

TEST_CASE("golden file: brute-force oracles agree to 1e-6") {
  const auto g = golden();
  REQUIRE(g.size() == 30);
  for (const auto& row : g) {
    CAPTURE(row["name"].get<std::string>());
    const Tokens h = row["hyp"].get<Tokens>(), r = row["ref"].get<Tokens>();
    const auto b = bleu(h, r);
    for (int n = 0; n < 4; ++n) CHECK(std::abs(b.bn[n] - row["bn"][n].get<double>()) < 1e-6);
    CHECK(std::abs(b.bleu - row["bleu"].get<double>()) < 1e-6);
    CHECK(std::abs(rouge_n(h, r, 1) - row["r1"].get<double>()) < 1e-6);
    CHECK(std::abs(rouge_n(h, r, 2) - row["r2"].get<double>()) < 1e-6);
    CHECK(lcs_length(h, r) == row["lcs"].get<std::size_t>());
    CHECK(std::abs(rouge_l(h, r) - row["rl"].get<double>()) < 1e-6);
    CHECK(std::abs(meteor_lite(h, r) - row["meteor"].get<double>()) < 1e-6);
    CHECK(std::abs(jaccard(h, r) - row["jaccard"].get<double>()) < 1e-6);
  }
}

TEST_CASE("identity returns each metric's maximum") {
  for (const char* text : {"patient reports cough and fever for two days .", "a b", "hello doctor"}) {
    const auto m = score_pair(text, text);
    CHECK(m.b1 == 100.0);
    CHECK(m.b2 == 100.0);
    CHECK(m.b3 == 100.0);
    CHECK(m.b4 == 100.0);
    CHECK(m.bleu == 100.0);
    CHECK(m.r1 == 100.0);
    CHECK(m.r2 == 100.0);
    CHECK(m.rl == 100.0);
    CHECK(m.jaccard == 1.0);
    CHECK(m.embed_sim == doctest::Approx(1.0).epsilon(1e-15));
    // METEOR's maximum for a length-L pair is 100 (1 - 0.5 / L^3).
    const double len = static_cast<double>(tokenize(text).size());
    CHECK(m.meteor == doctest::Approx(100.0 * (1.0 - 0.5 / (len * len * len))).epsilon(1e-12));
  }
}

TEST_CASE("property: ranges hold and reordering moves BLEU-2 and ROUGE-L but not Jaccard") {
  Rng rng(4);
  const std::vector<std::string> words{"a", "b", "c", "d", "e", "f", "cough", "fever"};
  for (int trial = 0; trial < 200; ++trial) {
    Tokens h, r;
    const std::size_t nh = 1 + rng.below(10), nr = 1 + rng.below(10);
    for (std::size_t i = 0; i < nh; ++i) h.push_back(words[rng.below(words.size())]);
    for (std::size_t i = 0; i < nr; ++i) r.push_back(words[rng.below(words.size())]);
    const auto b = bleu(h, r);
    for (double x : b.bn) CHECK((x >= 0.0 && x <= 100.0));
    CHECK((b.bleu >= 0.0 && b.bleu <= 100.0));
    for (double x : {rouge_n(h, r, 1), rouge_n(h, r, 2), rouge_l(h, r), meteor_lite(h, r)})
      CHECK((x >= 0.0 && x <= 100.0));
    const double j = jaccard(h, r);
    CHECK((j >= 0.0 && j <= 1.0));
    Tokens p = h;
    rng.shuffle(std::span<std::string>(p));
    CHECK(jaccard(p, r) == j);
  }
  const Tokens ref = toks("one two three four five");
  const Tokens rev = toks("five four three two one");
  CHECK(bleu(rev, ref).bn[1] < bleu(ref, ref).bn[1]);
  CHECK(rouge_l(rev, ref) < rouge_l(ref, ref));
  CHECK(jaccard(rev, ref) == jaccard(ref, ref));
}

TEST_CASE("corpus aggregate is the mean of per-record scores") {
  const MetricReport a = score_pair("a b c", "a b c");
  const MetricReport b = score_pair("x y", "a b c");
  const std::vector<MetricReport> both{a, b};
  const auto m = mean_report(both);
  CHECK(m.bleu == doctest::Approx((a.bleu + b.bleu) / 2));
  CHECK(m.rl == doctest::Approx((a.rl + b.rl) / 2));
  CHECK(metric_columns().size() == metric_values(m).size());
  CHECK(metric_columns().front() == "B-1");
  CHECK(metric_columns().back() == "EmbedSim");
}
