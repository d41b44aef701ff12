#include "mmk/generation.hpp"

#include <algorithm>
#include <cmath>

#include "mmk/errors.hpp"

namespace mmk {

void DecodeConfig::validate() const {
  if (beam_width < 1) throw ConfigError("decode config: beam_width must be >= 1");
  if (max_new_tokens < 1) throw ConfigError("decode config: max_new_tokens must be >= 1");
  if (!(length_penalty >= 0.0)) throw ConfigError("decode config: length_penalty must be >= 0");
}

double length_normalized(double logprob, std::size_t len, double alpha) {
  if (alpha == 0.0 || len == 0) return logprob;
  return logprob / std::pow(static_cast<double>(len), alpha);
}

Hypothesis greedy_search(StepScorer& scorer, std::size_t max_new, double alpha) {
  Hypothesis h;
  for (std::size_t step = 0; step < max_new; ++step) {
    const auto lp = scorer.log_probs(h.tokens);
    const auto best = static_cast<TokenId>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    h.logprob += lp[best];
    if (best == kEos) {
      h.finished = true;
      break;
    }
    h.tokens.push_back(best);
  }
  h.score = length_normalized(h.logprob, h.tokens.size() + (h.finished ? 1 : 0), alpha);
  return h;
}

Hypothesis beam_search(StepScorer& scorer, std::size_t width, std::size_t max_new, double alpha) {
  if (width < 1) throw ConfigError("beam_search: width must be >= 1");
  struct Cand {
    std::size_t parent;
    TokenId token;
    double logprob;
  };
  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<Hypothesis> finished;
  for (std::size_t step = 0; step < max_new && !live.empty(); ++step) {
    std::vector<Cand> cands;
    for (std::size_t b = 0; b < live.size(); ++b) {
      const auto lp = scorer.log_probs(live[b].tokens);
      for (std::size_t t = 0; t < lp.size(); ++t)
        cands.push_back({b, static_cast<TokenId>(t), live[b].logprob + lp[t]});
    }
    const std::size_t keep = std::min(width, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Cand& a, const Cand& b) {
                        if (a.logprob != b.logprob) return a.logprob > b.logprob;
                        if (a.token != b.token) return a.token < b.token;
                        return a.parent < b.parent;
                      });
    std::vector<Hypothesis> next;
    for (std::size_t i = 0; i < keep; ++i) {
      Hypothesis h = live[cands[i].parent];
      h.logprob = cands[i].logprob;
      if (cands[i].token == kEos) {
        h.finished = true;
        h.score = length_normalized(h.logprob, h.tokens.size() + 1, alpha);
        finished.push_back(std::move(h));
      } else {
        h.tokens.push_back(cands[i].token);
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
  }
  for (auto& h : live) {
    h.score = length_normalized(h.logprob, h.tokens.size(), alpha);
    finished.push_back(std::move(h));
  }
  // First-best in discovery order keeps the result deterministic on ties.
  return *std::max_element(finished.begin(), finished.end(),
                           [](const Hypothesis& a, const Hypothesis& b) { return a.score < b.score; });
}

ModelScorer::ModelScorer(const ModelConfig& cfg, const ParamMap& params, const TrainingRecord& rec, Task task)
    : cfg_(cfg), params_(params), task_(task) {
  Graph g;
  ModelGraph mg(g, cfg, params, false);
  Encoded enc = mg.encode(rec.encoder, mg.knowledge_vector(rec.knowledge), mg.visual_vector(rec.visual), nullptr);
  h_ = enc.h.value();
  key_valid_ = enc.key_valid;
}

std::vector<double> ModelScorer::log_probs(std::span<const TokenId> generated) {
  std::vector<TokenId> prefix{kBos, task_token(task_)};
  prefix.insert(prefix.end(), generated.begin(), generated.end());
  Graph g;
  ModelGraph mg(g, cfg_, params_, false);
  Encoded enc{g.constant(h_), key_valid_};
  const Tensor& logits = mg.decode_step(prefix, enc, nullptr).value();
  const std::size_t v = logits.cols(), last = logits.rows() - 1;
  std::vector<double> out(v);
  double mx = -INFINITY;
  for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, logits.at(last, j));
  double z = 0;
  for (std::size_t j = 0; j < v; ++j) z += std::exp(logits.at(last, j) - mx);
  const double lz = mx + std::log(z);
  for (std::size_t j = 0; j < v; ++j) out[j] = logits.at(last, j) - lz;
  // Specials other than EOS are never emitted.
  for (TokenId s = 0; s < kNumSpecials; ++s)
    if (s != kEos) out[s] = -INFINITY;
  return out;
}

Generation generate(const TrainingRecord& rec, Task task, const ModelConfig& cfg, const ParamMap& params,
                    const Vocabulary& vocab, const DecodeConfig& dcfg) {
  dcfg.validate();
  ModelScorer scorer(cfg, params, rec, task);
  const std::size_t max_new = std::min(dcfg.max_new_tokens, cfg.max_len - 2);
  Hypothesis h = dcfg.strategy == DecodeStrategy::Greedy
                     ? greedy_search(scorer, max_new, dcfg.length_penalty)
                     : beam_search(scorer, dcfg.beam_width, max_new, dcfg.length_penalty);
  Generation g;
  g.ids = h.tokens;
  g.text = decode_tokens(h.tokens, vocab);
  g.score = h.score;
  return g;
}

}  // namespace mmk
