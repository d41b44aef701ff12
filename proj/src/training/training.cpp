#include "mmk/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <sstream>
#include <thread>

#include "mmk/errors.hpp"

namespace mmk {

namespace {

std::string fmt(const char* spec, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, x);
  return buf;
}

std::size_t predictable_tokens(const TokenSequence& seq) {
  const TeacherForcing tf = teacher_forcing(seq);
  return static_cast<std::size_t>(std::count_if(tf.target.begin(), tf.target.end(), [](TokenId id) { return id != kPad; }));
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train config: lr must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train config: beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train config: beta2 must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("train config: adam_eps must be > 0");
  if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
  if (!std::isfinite(grad_clip_norm)) throw ConfigError("train config: grad_clip_norm must be finite");
  bool any = false;
  for (double w : task_weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("train config: task weights must be finite and >= 0");
    any = any || w > 0.0;
  }
  if (!any) throw ConfigError("train config: at least one task weight must be > 0");
}

Var joint_loss(const std::map<Task, Var>& losses, const std::array<double, 3>& weights) {
  double total = 0.0;
  for (const auto& [t, l] : losses) total += weights[static_cast<int>(t)];
  if (!(total > 0.0)) throw ConfigError("joint_loss: every task weight over the active tasks is zero");
  std::optional<Var> acc;
  for (const auto& [t, l] : losses) {
    const double w = weights[static_cast<int>(t)];
    if (w == 0.0) continue;
    Var term = w == total ? l : scale(l, w / total);
    acc = acc ? add(*acc, term) : term;
  }
  return *acc;
}

double joint_loss(const std::map<Task, double>& losses, const std::array<double, 3>& weights) {
  double total = 0.0;
  for (const auto& [t, l] : losses) total += weights[static_cast<int>(t)];
  if (!(total > 0.0)) throw ConfigError("joint_loss: every task weight over the active tasks is zero");
  double acc = 0.0;
  for (const auto& [t, l] : losses) {
    const double w = weights[static_cast<int>(t)];
    if (w != 0.0) acc += (w / total) * l;
  }
  return acc;
}

TaskSet active_tasks(const TaskSet& requested, const TrainConfig& cfg) {
  TaskSet out;
  for (Task t : requested.tasks())
    if (cfg.weight(t) > 0.0) out.insert(t);
  if (out.empty() && !requested.empty())
    throw ConfigError("task weights are zero for every requested task (" + requested.str() + ")");
  return out;
}

double learning_rate(const TrainConfig& cfg, std::size_t step) {
  if (cfg.warmup_steps == 0) return cfg.lr;
  return cfg.lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.warmup_steps));
}

AdamState adam_init(const ParamMap& params) {
  AdamState st;
  for (const auto& [name, p] : params) {
    st.m.emplace(name, Tensor::zeros(p.shape()));
    st.v.emplace(name, Tensor::zeros(p.shape()));
  }
  return st;
}

void adam_update(ParamMap& params, const std::map<std::string, Tensor>& grads, AdamState& st, const TrainConfig& cfg,
                 double lr) {
  ++st.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (const auto& [name, g] : grads) {
    auto pit = params.find(name);
    if (pit == params.end()) throw ContractError("adam_update: gradient for unknown parameter '" + name + "'");
    Tensor& p = pit->second;
    Tensor& m = st.m.at(name);
    Tensor& v = st.v.at(name);
    if (g.shape() != p.shape()) throw DimensionError("adam_update: gradient shape mismatch for '" + name + "'");
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_eps);
    }
  }
}

double clip_global_norm(std::map<std::string, Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (double x : g.data()) sq += x * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& [name, g] : grads)
      for (double& x : g.data()) x *= f;
  }
  return norm;
}

TrainRngs::TrainRngs(std::uint64_t seed)
    : shuffle(derive_seed(seed, 1)),
      encoder(derive_seed(seed, 2)),
      task{Rng(derive_seed(seed, 10)), Rng(derive_seed(seed, 11)), Rng(derive_seed(seed, 12))} {}

StepResult train_step(const ModelConfig& mcfg, ParamMap& params, AdamState& opt, const TrainConfig& cfg,
                      std::span<const TrainingRecord* const> batch, const TaskSet& tasks, TrainRngs& rngs,
                      std::size_t step) {
  const TaskSet active = active_tasks(tasks, cfg);
  Graph g;
  ModelGraph mg(g, mcfg, params, true);
  ForwardRngs fr;
  fr.encoder = &rngs.encoder;
  for (Task t : active.tasks()) fr.tasks[t] = &rngs.task[static_cast<int>(t)];
  const auto losses = multitask_forward(mg, batch, active, fr);
  Var loss = joint_loss(losses, cfg.task_weights);

  StepResult res;
  res.loss = loss.value().item();
  for (const auto& [t, l] : losses) res.task_losses[t] = l.value().item();
  auto fail = [&](const std::string& what) {
    std::string ids;
    for (const TrainingRecord* r : batch) ids += (ids.empty() ? "" : ", ") + r->id;
    throw NumericError("step " + std::to_string(step) + ": " + what + " (records: " + ids + ")");
  };
  if (!std::isfinite(res.loss)) fail("non-finite loss");

  auto grads = g.backward(loss).named();
  res.grad_norm = clip_global_norm(grads, cfg.grad_clip_norm);
  if (!std::isfinite(res.grad_norm)) fail("non-finite gradient");
  res.lr = learning_rate(cfg, step);
  adam_update(params, grads, opt, cfg, res.lr);
  return res;
}

std::map<Task, double> evaluate_loss(const ModelConfig& mcfg, const ParamMap& params,
                                     std::span<const TrainingRecord> records, const TaskSet& tasks,
                                     std::size_t chunk) {
  std::map<Task, double> sums;
  std::map<Task, std::size_t> counts;
  chunk = std::max<std::size_t>(chunk, 1);
  for (std::size_t start = 0; start < records.size(); start += chunk) {
    const std::size_t end = std::min(records.size(), start + chunk);
    std::vector<const TrainingRecord*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&records[i]);
    Graph g;
    ModelGraph mg(g, mcfg, params, false);
    const auto losses = multitask_forward(mg, batch, tasks, {});
    for (const auto& [t, l] : losses) {
      std::size_t n = 0;
      for (const TrainingRecord* r : batch) n += predictable_tokens(r->targets.at(t));
      sums[t] += l.value().item() * static_cast<double>(n);
      counts[t] += n;
    }
  }
  std::map<Task, double> out;
  for (const auto& [t, s] : sums) out[t] = s / static_cast<double>(counts[t]);
  return out;
}

TrainResult train_loop(const ModelConfig& mcfg, ParamMap init, std::span<const TrainingRecord> train,
                       std::span<const TrainingRecord> dev, const TrainConfig& cfg, const TaskSet& tasks,
                       const StepCallback& on_step) {
  cfg.validate();
  mcfg.validate();
  check_params(mcfg, init);
  if (train.empty()) throw DatasetError("training set is empty");
  if (tasks.empty()) throw ConfigError("no tasks requested");
  const TaskSet active = active_tasks(tasks, cfg);

  TrainResult res;
  res.final_params = std::move(init);
  AdamState opt = adam_init(res.final_params);
  TrainRngs rngs(cfg.seed);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  auto consider_dev = [&](std::size_t step) {
    const double l = joint_loss(evaluate_loss(mcfg, res.final_params, dev, active), cfg.task_weights);
    if (!res.best_dev_loss || l < *res.best_dev_loss) {
      res.best_dev_loss = l;
      res.best_step = step;
      res.best_params = res.final_params;
    }
  };
  if (!dev.empty()) consider_dev(0);

  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    std::vector<const TrainingRecord*> batch;
    while (batch.size() < cfg.batch_size) {
      if (cursor == order.size()) {
        rngs.shuffle.shuffle(std::span<std::size_t>(order));
        cursor = 0;
        if (!batch.empty()) break;  // batches never straddle an epoch
      }
      batch.push_back(&train[order[cursor++]]);
    }
    const StepResult sr = train_step(mcfg, res.final_params, opt, cfg, batch, active, rngs, step);
    LogRow row{step, sr.loss, sr.task_losses, sr.lr};
    res.log.push_back(row);
    if (on_step) on_step(row);
    if (!dev.empty() && cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.max_steps))
      consider_dev(step);
  }
  if (dev.empty()) {
    res.best_params = res.final_params;
    res.best_step = cfg.max_steps;
  }
  return res;
}

std::string format_log_csv(const std::vector<LogRow>& log) {
  std::string out = "step,loss_total,loss_sum,loss_mcs,loss_di,lr\n";
  for (const auto& r : log) {
    out += std::to_string(r.step) + "," + fmt("%.10g", r.loss_total);
    for (Task t : kAllTasks) {
      out += ",";
      auto it = r.task_losses.find(t);
      if (it != r.task_losses.end()) out += fmt("%.10g", it->second);
    }
    out += "," + fmt("%.10g", r.lr) + "\n";
  }
  return out;
}

CheckReport model_gradcheck(const ModelConfig& cfg_in, const FiniteDiffOptions& opts, std::uint64_t seed) {
  ModelConfig cfg = cfg_in;
  cfg.dropout_rate = 0.0;
  cfg.validate();
  if (cfg.vocab_size < kNumSpecials + 4) throw ConfigError("gradcheck: vocab_size too small for random records");
  if (cfg.max_len < 8) throw ConfigError("gradcheck: max_len must be >= 8");
  Rng rng(derive_seed(seed, 0));
  const auto n_words = cfg.vocab_size - kNumSpecials;
  auto word = [&] { return static_cast<TokenId>(kNumSpecials + rng.below(n_words)); };
  auto make = [&](const std::string& id, bool modalities) {
    TrainingRecord r;
    r.id = id;
    const std::size_t len = std::min<std::size_t>(cfg.max_len, 12);
    r.encoder.ids = {kBos, kPatient};
    while (r.encoder.ids.size() + 1 < len) r.encoder.ids.push_back(word());
    r.encoder.ids.push_back(kEos);
    if (modalities) {
      r.knowledge = {{word(), word(), word()}, {word()}};
      std::vector<double> vis(cfg.d_vis);
      for (auto& v : vis) v = rng.normal();
      r.visual = vis;
    }
    const std::size_t tlen = std::min<std::size_t>(cfg.max_len - 3, 4);
    for (Task t : kAllTasks) {
      TokenSequence s{{kBos, task_token(t)}};
      for (std::size_t i = 0; i < tlen; ++i) s.ids.push_back(word());
      s.ids.push_back(kEos);
      r.targets[t] = s;
    }
    return r;
  };
  const TrainingRecord a = make("gradcheck-a", true), b = make("gradcheck-b", false);
  const std::array<double, 3> weights{1.0, 1.0, 1.0};
  LossBuilder build = [&](Graph& g, const ParamMap& p) {
    ModelGraph mg(g, cfg, p, true);
    std::vector<const TrainingRecord*> batch{&a, &b};
    return joint_loss(multitask_forward(mg, batch, TaskSet{Task::Sum, Task::Mcs, Task::Di}, {}), weights);
  };
  return finite_diff_check(build, init_params(cfg, seed), opts);
}

// ---------------------------------------------------------------------------

std::vector<AblationRun> default_ablation() {
  return {{"MM-MDS", TaskSet{Task::Sum}},
          {"with-MCS", TaskSet{Task::Sum, Task::Mcs}},
          {"with-DI", TaskSet{Task::Sum, Task::Di}},
          {"MMK-Summation", TaskSet{Task::Sum, Task::Mcs, Task::Di}}};
}

std::size_t eval_threads() {
  if (const char* env = std::getenv("MMK_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || n < 1) throw ConfigError("MMK_THREADS must be a positive integer, got '" + std::string(env) + "'");
    return static_cast<std::size_t>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

MetricReport evaluate_generation(const ModelConfig& mcfg, const ParamMap& params, const Vocabulary& vocab,
                                 std::span<const TrainingRecord> records, std::span<const Dialogue> gold, Task task,
                                 const DecodeConfig& dcfg, std::vector<std::string>* outputs) {
  if (records.size() != gold.size()) throw ContractError("evaluate_generation: records and gold differ in length");
  dcfg.validate();
  const Tensor& emb = params.at("embed.tokens");
  std::vector<std::string> texts(records.size());
  std::vector<MetricReport> reports(records.size());
  std::vector<std::exception_ptr> errors(records.size());
  auto work = [&](std::size_t i) {
    try {
      texts[i] = generate(records[i], task, mcfg, params, vocab, dcfg).text;
      reports[i] = score_pair(texts[i], target_text(gold[i].targets, task), &vocab, &emb);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t nt = std::min(eval_threads(), records.size());
  if (nt <= 1) {
    for (std::size_t i = 0; i < records.size(); ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < nt; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < records.size(); i += nt) work(i);
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  if (outputs) *outputs = std::move(texts);
  return mean_report(reports);
}

std::vector<AblationRow> run_ablation(const AblationInputs& in, std::span<const std::uint64_t> seeds,
                                      const std::vector<AblationRun>& runs, const AblationProgress& progress) {
  if (!in.vocab) throw ContractError("run_ablation: vocabulary required");
  if (seeds.empty()) throw ConfigError("ablation: at least one seed is required");
  if (in.test_set.empty()) throw DatasetError("ablation: test split is empty");
  std::vector<AblationRow> rows;
  for (const auto& run : runs) {
    for (std::uint64_t seed : seeds) {
      AblationRow row;
      row.model = run.name;
      row.seed = seed;
      try {
        TrainConfig tc = in.train;
        tc.seed = seed;
        TrainResult tr = train_loop(in.model, init_params(in.model, seed), in.train_set, in.dev_set, tc, run.tasks);
        row.report = evaluate_generation(in.model, tr.best_params, *in.vocab, in.test_set, in.test_gold, Task::Sum,
                                         in.decode);
      } catch (const Error& e) {
        row.error = e.what();
      }
      if (progress) progress(run.name, seed, row.report ? &*row.report : nullptr);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::vector<AblationRow> paper_reference_rows() {
  // Jaccard and the embedding similarity have no published counterpart.
  auto row = [](std::string name, std::array<double, 9> v) {
    AblationRow r;
    r.model = std::move(name);
    r.paper_scale = true;
    MetricReport m;
    m.b1 = v[0], m.b2 = v[1], m.b3 = v[2], m.b4 = v[3], m.bleu = v[4];
    m.r1 = v[5], m.r2 = v[6], m.rl = v[7], m.meteor = v[8];
    m.jaccard = NAN;
    m.embed_sim = NAN;
    r.report = m;
    return r;
  };
  return {row("MM-MDS", {47.31, 35.56, 26.73, 20.32, 32.48, 58.59, 35.68, 49.06, 54.67}),
          row("with-MCS", {47.57, 35.86, 26.98, 20.31, 32.68, 59.95, 36.49, 50.21, 58.03}),
          row("with-DI", {46.50, 35.16, 26.66, 19.92, 32.06, 59.75, 37.14, 50.83, 60.21}),
          row("MMK-Summation", {48.68, 36.85, 27.92, 21.50, 33.47, 60.86, 37.43, 51.05, 58.32})};
}

std::vector<AblationSummary> summarize_ablation(const std::vector<AblationRow>& rows) {
  std::vector<AblationSummary> out;
  std::vector<std::vector<MetricReport>> groups;
  for (const auto& r : rows) {
    if (r.paper_scale) continue;
    auto it = std::find_if(out.begin(), out.end(), [&](const AblationSummary& s) { return s.model == r.model; });
    if (it == out.end()) {
      out.push_back({r.model, 0, {}, {}});
      groups.emplace_back();
      it = out.end() - 1;
    }
    if (r.report) groups[static_cast<std::size_t>(it - out.begin())].push_back(*r.report);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& g = groups[i];
    out[i].n = g.size();
    out[i].mean = mean_report(g);
    if (g.size() < 2) continue;
    const auto mu = metric_values(out[i].mean);
    std::vector<double> var(mu.size(), 0.0);
    for (const auto& r : g) {
      const auto v = metric_values(r);
      for (std::size_t j = 0; j < v.size(); ++j) var[j] += (v[j] - mu[j]) * (v[j] - mu[j]);
    }
    double* f[] = {&out[i].stddev.b1, &out[i].stddev.b2, &out[i].stddev.b3,     &out[i].stddev.b4,
                   &out[i].stddev.bleu, &out[i].stddev.r1, &out[i].stddev.r2,   &out[i].stddev.rl,
                   &out[i].stddev.meteor, &out[i].stddev.jaccard, &out[i].stddev.embed_sim};
    for (std::size_t j = 0; j < var.size(); ++j) *f[j] = std::sqrt(var[j] / static_cast<double>(g.size() - 1));
  }
  return out;
}

namespace {

std::string cell(double v) { return std::isnan(v) ? "" : fmt("%.4f", v); }

std::string header_cols() {
  std::string h;
  for (const auto& c : metric_columns()) h += "," + c;
  return h;
}

}  // namespace

std::string format_ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "model" + header_cols() + ",seed,paper_scale\n";
  for (const auto& r : rows) {
    out += r.model;
    for (std::size_t j = 0; j < metric_columns().size(); ++j)
      out += "," + (r.report ? cell(metric_values(*r.report)[j]) : "");
    out += "," + (r.seed ? std::to_string(*r.seed) : "") + "," + (r.paper_scale ? "true" : "false") + "\n";
  }
  return out;
}

std::string format_summary_csv(const std::vector<AblationSummary>& s) {
  std::string out = "model,n";
  for (const auto& c : metric_columns()) out += "," + c + "," + c + "_std";
  out += "\n";
  for (const auto& r : s) {
    out += r.model + "," + std::to_string(r.n);
    const auto m = metric_values(r.mean), d = metric_values(r.stddev);
    for (std::size_t j = 0; j < m.size(); ++j) out += "," + (r.n ? cell(m[j]) : "") + "," + (r.n ? cell(d[j]) : "");
    out += "\n";
  }
  return out;
}

std::string format_ablation_markdown(const std::vector<AblationSummary>& s, const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "| Model | n |";
  for (const auto& c : metric_columns()) os << " " << c << " |";
  os << "\n|---|---|";
  for (std::size_t j = 0; j < metric_columns().size(); ++j) os << "---|";
  os << "\n";
  for (const auto& r : s) {
    os << "| " << r.model << " | " << r.n << " |";
    const auto m = metric_values(r.mean), d = metric_values(r.stddev);
    for (std::size_t j = 0; j < m.size(); ++j) {
      if (r.n == 0) os << " failed |";
      else os << " " << fmt("%.2f", m[j]) << " ± " << fmt("%.2f", d[j]) << " |";
    }
    os << "\n";
  }
  for (const auto& r : rows) {
    if (!r.paper_scale || !r.report) continue;
    os << "| " << r.model << " (published reference) | - |";
    for (double v : metric_values(*r.report)) os << " " << (std::isnan(v) ? "-" : fmt("%.2f", v)) << " |";
    os << "\n";
  }
  return os.str();
}

}  // namespace mmk
