#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mmk/model.hpp"

namespace mmk {

enum class DecodeStrategy { Greedy, Beam };

struct DecodeConfig {
  DecodeStrategy strategy = DecodeStrategy::Greedy;
  std::size_t beam_width = 4;
  std::size_t max_new_tokens = 32;
  double length_penalty = 0.6;

  void validate() const;
  friend bool operator==(const DecodeConfig&, const DecodeConfig&) = default;
};

// Next-token log-probabilities given the tokens generated so far (the
// [BOS, TASK] prefix is implicit).
class StepScorer {
 public:
  virtual ~StepScorer() = default;
  virtual std::vector<double> log_probs(std::span<const TokenId> generated) = 0;
};

struct Hypothesis {
  std::vector<TokenId> tokens;  // generated ids, EOS excluded
  bool finished = false;        // ended with EOS
  double logprob = 0.0;
  double score = 0.0;           // logprob / len^alpha, len counting EOS
};

double length_normalized(double logprob, std::size_t len, double alpha);

// Argmax each step; ties go to the lower id.
Hypothesis greedy_search(StepScorer& scorer, std::size_t max_new, double alpha);
// Keeps the top `width` expansions by raw cumulative log-prob (ties: lower
// token id, then earlier parent). EOS expansions move to the finished list
// and still use a slot. Stops when no live beam remains or after max_new
// steps; returns the best finished-or-live hypothesis by normalized score.
Hypothesis beam_search(StepScorer& scorer, std::size_t width, std::size_t max_new, double alpha);

// Scores continuations with the model, re-running the decoder over the full
// prefix each step (the encoder runs once).
class ModelScorer : public StepScorer {
 public:
  ModelScorer(const ModelConfig& cfg, const ParamMap& params, const TrainingRecord& rec, Task task);
  std::vector<double> log_probs(std::span<const TokenId> generated) override;

 private:
  const ModelConfig& cfg_;
  const ParamMap& params_;
  Task task_;
  Tensor h_;
  std::vector<bool> key_valid_;
};

struct Generation {
  std::string text;
  std::vector<TokenId> ids;
  double score = 0.0;
};

Generation generate(const TrainingRecord& rec, Task task, const ModelConfig& cfg, const ParamMap& params,
                    const Vocabulary& vocab, const DecodeConfig& dcfg);

}  // namespace mmk
