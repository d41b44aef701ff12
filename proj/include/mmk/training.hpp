#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmk/generation.hpp"
#include "mmk/gradcheck.hpp"
#include "mmk/metrics.hpp"
#include "mmk/model.hpp"

namespace mmk {

struct TrainConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  std::size_t batch_size = 16;
  std::size_t max_steps = 1000;
  std::size_t warmup_steps = 100;
  std::array<double, 3> task_weights{1.0, 1.0, 1.0};  // sum, mcs, di
  std::uint64_t seed = 1;
  double grad_clip_norm = 1.0;  // <= 0 disables clipping
  std::size_t eval_every = 100;  // dev-loss cadence for best-checkpoint selection

  void validate() const;
  double weight(Task t) const { return task_weights[static_cast<int>(t)]; }
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// sum_t w_t * L_t / sum_t w_t over the given tasks; ConfigError when every
// weight over them is zero.
Var joint_loss(const std::map<Task, Var>& losses, const std::array<double, 3>& weights);
double joint_loss(const std::map<Task, double>& losses, const std::array<double, 3>& weights);

// Tasks of `requested` that carry a positive weight: zero-weight tasks are
// left out of the forward pass entirely.
TaskSet active_tasks(const TaskSet& requested, const TrainConfig& cfg);

// lr * min(1, step / warmup), step counted from 1.
double learning_rate(const TrainConfig& cfg, std::size_t step);

struct AdamState {
  ParamMap m, v;
  std::uint64_t t = 0;
};
AdamState adam_init(const ParamMap& params);
// One bias-corrected Adam update in place.
void adam_update(ParamMap& params, const std::map<std::string, Tensor>& grads, AdamState& st, const TrainConfig& cfg,
                 double lr);
// Scales gradients so their global L2 norm is at most max_norm; returns the
// norm before clipping.
double clip_global_norm(std::map<std::string, Tensor>& grads, double max_norm);

// Independent streams derived from the master seed: adding a task leaves the
// other streams untouched.
struct TrainRngs {
  explicit TrainRngs(std::uint64_t seed);
  Rng shuffle;
  Rng encoder;
  std::array<Rng, 3> task;
};

struct StepResult {
  double loss = 0.0;
  std::map<Task, double> task_losses;
  double lr = 0.0;
  double grad_norm = 0.0;
};

// Forward, backward, clip, Adam. NumericError naming the step and record
// ids when the loss is not finite.
StepResult train_step(const ModelConfig& mcfg, ParamMap& params, AdamState& opt, const TrainConfig& cfg,
                      std::span<const TrainingRecord* const> batch, const TaskSet& tasks, TrainRngs& rngs,
                      std::size_t step);

// Token-weighted per-task loss over a record set, no dropout.
std::map<Task, double> evaluate_loss(const ModelConfig& mcfg, const ParamMap& params,
                                     std::span<const TrainingRecord> records, const TaskSet& tasks,
                                     std::size_t chunk = 16);

struct LogRow {
  std::size_t step = 0;
  double loss_total = 0.0;
  std::map<Task, double> task_losses;
  double lr = 0.0;
};

struct TrainResult {
  ParamMap final_params;
  ParamMap best_params;
  std::size_t best_step = 0;
  std::optional<double> best_dev_loss;
  std::vector<LogRow> log;
};

using StepCallback = std::function<void(const LogRow&)>;

// Linear warmup then constant lr for max_steps steps over shuffled batches.
// With dev records the best checkpoint is the lowest dev joint loss seen at
// eval_every steps (and at the end); without, it is the final one.
TrainResult train_loop(const ModelConfig& mcfg, ParamMap init, std::span<const TrainingRecord> train,
                       std::span<const TrainingRecord> dev, const TrainConfig& cfg, const TaskSet& tasks,
                       const StepCallback& on_step = {});

// "step,loss_total,loss_sum,loss_mcs,loss_di,lr"; inactive tasks are empty.
std::string format_log_csv(const std::vector<LogRow>& log);

// Finite-difference check of the joint three-task loss of the whole model on
// two random records over cfg's vocabulary: one with knowledge and visual
// inputs, one without. Dropout is disabled for the check.
CheckReport model_gradcheck(const ModelConfig& cfg, const FiniteDiffOptions& opts, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Ablation grid

struct AblationRun {
  std::string name;
  TaskSet tasks;
};

// MM-MDS {sum}, with-MCS {sum,mcs}, with-DI {sum,di}, MMK-Summation {all}.
std::vector<AblationRun> default_ablation();

struct AblationRow {
  std::string model;
  std::optional<std::uint64_t> seed;  // empty for reference rows
  std::optional<MetricReport> report;  // empty when the run failed
  std::string error;
  bool paper_scale = false;
};

// Mean and sample standard deviation per run over its successful seeds.
struct AblationSummary {
  std::string model;
  std::size_t n = 0;
  MetricReport mean;
  MetricReport stddev;
};

struct AblationInputs {
  ModelConfig model;
  TrainConfig train;
  DecodeConfig decode;
  std::span<const TrainingRecord> train_set;
  std::span<const TrainingRecord> dev_set;
  std::span<const TrainingRecord> test_set;
  std::span<const Dialogue> test_gold;  // parallel to test_set
  const Vocabulary* vocab = nullptr;
};

using AblationProgress = std::function<void(const std::string& run, std::uint64_t seed, const MetricReport* r)>;

// Per (run, seed): train, decode the test summaries, score. A failing run
// is recorded in its row and the grid continues. One row per (run, seed),
// runs outer, seeds inner.
std::vector<AblationRow> run_ablation(const AblationInputs& in, std::span<const std::uint64_t> seeds,
                                      const std::vector<AblationRun>& runs = default_ablation(),
                                      const AblationProgress& progress = {});

// Worker count for evaluation: MMK_THREADS when set (ConfigError unless a
// positive integer), else the hardware concurrency.
std::size_t eval_threads();

// Mean per-record scores of `task` generations against the gold texts,
// decoded in parallel over records. embed_sim uses the model's token
// embeddings.
MetricReport evaluate_generation(const ModelConfig& mcfg, const ParamMap& params, const Vocabulary& vocab,
                                 std::span<const TrainingRecord> records, std::span<const Dialogue> gold, Task task,
                                 const DecodeConfig& dcfg, std::vector<std::string>* outputs = nullptr);

// Published reference rows (for context only; flagged paper_scale).
std::vector<AblationRow> paper_reference_rows();

std::vector<AblationSummary> summarize_ablation(const std::vector<AblationRow>& rows);

// `model,B-1,...,EmbedSim,seed,paper_scale`; failed runs leave the metric
// cells empty, reference rows leave EmbedSim empty.
std::string format_ablation_csv(const std::vector<AblationRow>& rows);
std::string format_summary_csv(const std::vector<AblationSummary>& s);
// Mean +- stddev per run, then any reference rows, as a Markdown table.
std::string format_ablation_markdown(const std::vector<AblationSummary>& s, const std::vector<AblationRow>& rows);

}  // namespace mmk
