#include "mmk/cli.hpp"

#include <filesystem>
#include <iostream>
#include <iterator>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mmk/checkpoint.hpp"
#include "mmk/config.hpp"
#include "mmk/corpus.hpp"
#include "mmk/errors.hpp"
#include "mmk/io.hpp"

namespace mmk {

namespace fs = std::filesystem;

namespace {

// Re-raises library errors with the flag that supplied the input, keeping
// the error family (and so the exit code).
template <typename F>
auto at_flag(const std::string& flag, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError(flag + ": " + e.what());
  } catch (const SchemaError& e) {
    throw SchemaError(flag + ": " + e.what());
  } catch (const DatasetError& e) {
    throw DatasetError(flag + ": " + e.what());
  } catch (const IoError& e) {
    throw IoError(flag + ": " + e.what());
  }
}

std::string fmt4(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", x);
  return buf;
}

fs::path sibling_kb(const std::string& kb_flag, const std::string& data) {
  if (!kb_flag.empty()) return kb_flag;
  const fs::path p = fs::path(data).parent_path() / "kb.jsonl";
  if (!fs::exists(p)) throw ConfigError("--kb: not given and no kb.jsonl next to " + data);
  return p;
}

nlohmann::ordered_json decode_to_json(const DecodeConfig& d) {
  nlohmann::ordered_json j;
  j["strategy"] = d.strategy == DecodeStrategy::Greedy ? "greedy" : "beam";
  j["beam_width"] = d.beam_width;
  j["max_new_tokens"] = d.max_new_tokens;
  j["length_penalty"] = d.length_penalty;
  return j;
}

DecodeConfig decode_from_json(const nlohmann::json& j) {
  DecodeConfig d;
  try {
    d.strategy = j.at("strategy").get<std::string>() == "beam" ? DecodeStrategy::Beam : DecodeStrategy::Greedy;
    d.beam_width = j.at("beam_width").get<std::size_t>();
    d.max_new_tokens = j.at("max_new_tokens").get<std::size_t>();
    d.length_penalty = j.at("length_penalty").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("checkpoint decode settings: ") + e.what());
  }
  return d;
}

// Applies --beam / --max-new over the stored decode settings (0 keeps them).
DecodeConfig override_decode(DecodeConfig d, std::size_t beam, std::size_t max_new) {
  if (beam == 1) {
    d.strategy = DecodeStrategy::Greedy;
  } else if (beam > 1) {
    d.strategy = DecodeStrategy::Beam;
    d.beam_width = beam;
  }
  if (max_new > 0) d.max_new_tokens = max_new;
  d.validate();
  return d;
}

// A trained model with everything inference needs from its directory.
struct LoadedModel {
  Checkpoint ckpt;
  Vocabulary vocab;
  std::optional<KnowledgeIndex> kb;
  std::size_t retrieve_k = 3;
  DecodeConfig decode;
};

LoadedModel load_model(const std::string& path) {
  return at_flag("--ckpt", [&] {
    LoadedModel m;
    m.ckpt = load_checkpoint(path);
    const fs::path dir = fs::path(path).parent_path();
    m.vocab = Vocabulary::load(dir / "vocab.json");
    if (m.vocab.fingerprint() != m.ckpt.vocab_fingerprint)
      throw SchemaError(path + ": vocabulary fingerprint " + fingerprint_hex(m.vocab.fingerprint()) +
                        " does not match the checkpoint's " + fingerprint_hex(m.ckpt.vocab_fingerprint));
    m.kb = KnowledgeIndex::build(load_knowledge_base(dir / "kb.jsonl"));
    const auto& x = m.ckpt.extra;
    if (x.contains("retrieve_k")) m.retrieve_k = x.at("retrieve_k").get<std::size_t>();
    if (x.contains("decode")) m.decode = decode_from_json(x.at("decode"));
    return m;
  });
}

std::vector<Dialogue> load_split(const std::vector<Dialogue>& all, const std::string& split) {
  if (split == "all") return all;
  return select_split(all, at_flag("--split", [&] { return parse_split(split); }));
}

// ----------------------------------------------------------------------------

struct GenDataArgs {
  std::size_t n = 500;
  std::uint64_t seed = 1;
  std::size_t dvis = 20;
  std::string out;
  bool force = false;
};

int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  if (a.n == 0) throw ConfigError("--n: must be >= 1");
  if (a.dvis == 0) throw ConfigError("--dvis: must be >= 1");
  const auto corpus = generate_synthetic(a.n, a.seed, a.dvis);
  at_flag("--out", [&] { prepare_output_dir(a.out, a.force); });
  save_dataset(fs::path(a.out) / "dialogues.jsonl", corpus.dialogues);
  save_knowledge_base(fs::path(a.out) / "kb.jsonl", corpus.knowledge);
  std::size_t counts[3] = {0, 0, 0};
  for (const auto& d : corpus.dialogues) ++counts[static_cast<int>(split_of(d.id))];
  out << "wrote " << corpus.dialogues.size() << " dialogues (train " << counts[0] << ", dev " << counts[1]
      << ", test " << counts[2] << ") and " << corpus.knowledge.size() << " knowledge entries to " << a.out << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string data, config = "test-small", tasks = "sum,mcs,di", kb, out, split = "train";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> max_steps;
  std::size_t log_every = 100;
  bool force = false;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig cfg = at_flag("--config", [&] { return load_run_config(a.config); });
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.max_steps) cfg.train.max_steps = *a.max_steps;
  const TaskSet tasks = at_flag("--tasks", [&] { return TaskSet::parse(a.tasks); });
  if (a.split != "train" && a.split != "all") throw ConfigError("--split: expected 'train' or 'all'");

  LoadOptions lo;
  lo.d_vis = cfg.model.d_vis;
  const auto all = at_flag("--data", [&] { return load_dataset(a.data, lo); });
  const auto kb_path = sibling_kb(a.kb, a.data);
  const auto kb_entries = at_flag("--kb", [&] { return load_knowledge_base(kb_path); });
  const KnowledgeIndex kb = at_flag("--kb", [&] { return KnowledgeIndex::build(kb_entries); });

  const auto train_d = a.split == "all" ? all : select_split(all, Split::Train);
  const auto dev_d = a.split == "all" ? std::vector<Dialogue>{} : select_split(all, Split::Dev);
  if (train_d.empty()) throw DatasetError("--data: no training records in " + a.data);

  const Vocabulary vocab = Vocabulary::build(vocabulary_corpus(train_d, kb_entries), cfg.min_freq);
  if (cfg.model.vocab_size != 0 && cfg.model.vocab_size != vocab.size())
    throw ConfigError("--config: model.vocab_size is " + std::to_string(cfg.model.vocab_size) +
                      " but the data yields " + std::to_string(vocab.size()) + " (use 0 to take it from the data)");
  cfg.model.vocab_size = vocab.size();
  cfg.validate();

  const auto train_r = at_flag("--data", [&] {
    return prepare_records(train_d, vocab, &kb, cfg.retrieve_k, cfg.model.max_len);
  });
  const auto dev_r = at_flag("--data", [&] {
    return prepare_records(dev_d, vocab, &kb, cfg.retrieve_k, cfg.model.max_len);
  });

  at_flag("--out", [&] { prepare_output_dir(a.out, a.force); });
  const fs::path dir = a.out;
  vocab.save(dir / "vocab.json");
  save_knowledge_base(dir / "kb.jsonl", kb_entries);
  write_file_atomic(dir / "config.conf", format_run_config(cfg));

  err << "training " << tasks.str() << " on " << train_r.size() << " records (dev " << dev_r.size() << "), vocab "
      << vocab.size() << ", " << cfg.train.max_steps << " steps\n";
  const TrainResult res = train_loop(cfg.model, init_params(cfg.model, cfg.train.seed), train_r, dev_r, cfg.train, tasks,
                                     [&](const LogRow& r) {
                                       if (a.log_every > 0 && r.step % a.log_every == 0)
                                         err << "step " << r.step << " loss " << fmt4(r.loss_total) << "\n";
                                     });
  write_file_atomic(dir / "train_log.csv", format_log_csv(res.log));

  auto make_ckpt = [&](const ParamMap& params, std::size_t step) {
    Checkpoint c;
    c.config = cfg.model;
    c.vocab_fingerprint = vocab.fingerprint();
    c.step = step;
    if (!res.log.empty()) c.metrics["final_train_loss"] = res.log.back().loss_total;
    if (res.best_dev_loss) c.metrics["best_dev_loss"] = *res.best_dev_loss;
    c.extra["tasks"] = tasks.str();
    c.extra["retrieve_k"] = cfg.retrieve_k;
    c.extra["min_freq"] = cfg.min_freq;
    c.extra["decode"] = decode_to_json(cfg.decode);
    c.params = params;
    return c;
  };
  save_checkpoint(dir / "final.mmks", make_ckpt(res.final_params, cfg.train.max_steps));
  save_checkpoint(dir / "best.mmks", make_ckpt(res.best_params, res.best_step));
  out << "final loss " << (res.log.empty() ? std::string("n/a") : fmt4(res.log.back().loss_total)) << ", best step "
      << res.best_step << "; wrote " << a.out << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string ckpt, data, split = "test", report, tasks = "sum,mcs,di", predictions;
  std::size_t beam = 0, max_new = 0;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  if (a.ckpt.empty() && a.predictions.empty()) throw ConfigError("--ckpt: required unless --predictions is given");
  const TaskSet tasks = at_flag("--tasks", [&] { return TaskSet::parse(a.tasks); });
  std::optional<LoadedModel> model;
  if (!a.ckpt.empty()) model = load_model(a.ckpt);
  LoadOptions lo;
  if (model) lo.d_vis = model->ckpt.config.d_vis;
  const auto gold = load_split(at_flag("--data", [&] { return load_dataset(a.data, lo); }), a.split);
  if (gold.empty()) throw DatasetError("--data: split '" + a.split + "' of " + a.data + " is empty");

  // (id, task) -> output text
  std::map<std::pair<std::string, Task>, std::string> preds;
  if (!a.predictions.empty()) {
    at_flag("--predictions", [&] {
      const std::string text = read_file(a.predictions);
      std::istringstream is(text);
      std::string line;
      std::size_t no = 0;
      while (std::getline(is, line)) {
        ++no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
          const auto j = nlohmann::json::parse(line);
          preds[{j.at("id").get<std::string>(), parse_task(j.at("task").get<std::string>())}] =
              j.at("output").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
          throw SchemaError(a.predictions + ":" + std::to_string(no) + ": " + e.what());
        }
      }
    });
  }

  std::string csv = "task";
  for (const auto& c : metric_columns()) csv += "," + c;
  csv += ",n\n";
  std::ostringstream md;
  md << "| Task |";
  for (const auto& c : metric_columns()) md << " " << c << " |";
  md << "\n|---|";
  for (std::size_t i = 0; i < metric_columns().size(); ++i) md << "---|";
  md << "\n";

  for (Task t : tasks.tasks()) {
    MetricReport r;
    if (!preds.empty()) {
      const Tensor* emb = model ? &model->ckpt.params.at("embed.tokens") : nullptr;
      const Vocabulary* v = model ? &model->vocab : nullptr;
      std::vector<MetricReport> per;
      for (const auto& d : gold) {
        auto it = preds.find({d.id, t});
        if (it == preds.end())
          throw DatasetError("--predictions: no " + std::string(task_name(t)) + " output for record '" + d.id + "'");
        per.push_back(score_pair(it->second, target_text(d.targets, t), v, emb));
      }
      r = mean_report(per);
    } else {
      const DecodeConfig dc = override_decode(model->decode, a.beam, a.max_new);
      const auto recs = prepare_records(gold, model->vocab, &*model->kb, model->retrieve_k,
                                        model->ckpt.config.max_len);
      r = evaluate_generation(model->ckpt.config, model->ckpt.params, model->vocab, recs, gold, t, dc);
    }
    csv += std::string(task_name(t));
    md << "| " << task_name(t) << " |";
    for (double v : metric_values(r)) {
      csv += "," + fmt4(v);
      md << " " << fmt4(v) << " |";
    }
    csv += "," + std::to_string(gold.size()) + "\n";
    md << "\n";
  }
  at_flag("--report", [&] { write_file_atomic(a.report, csv); });
  out << md.str();
  return kExitOk;
}

struct GenerateArgs {
  std::string ckpt, input, task = "sum", out;
  std::size_t beam = 0, max_new = 0;
};

int cmd_generate(const GenerateArgs& a, std::istream& in, std::ostream& out) {
  const LoadedModel m = load_model(a.ckpt);
  const Task task = at_flag("--task", [&] { return parse_task(a.task); });
  const DecodeConfig dc = at_flag("--beam", [&] { return override_decode(m.decode, a.beam, a.max_new); });
  LoadOptions lo;
  lo.d_vis = m.ckpt.config.d_vis;
  lo.require_targets = false;
  const auto dialogues = at_flag("--input", [&] {
    if (a.input == "-") {
      const std::string text(std::istreambuf_iterator<char>(in), {});
      return parse_dataset(text, "<stdin>", lo);
    }
    return load_dataset(a.input, lo);
  });
  const auto recs = prepare_records(dialogues, m.vocab, &*m.kb, m.retrieve_k, m.ckpt.config.max_len, false);
  std::string lines;
  for (const auto& r : recs) {
    const Generation g = generate(r, task, m.ckpt.config, m.ckpt.params, m.vocab, dc);
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["task"] = task_name(task);
    j["output"] = g.text;
    j["score"] = g.score;
    lines += j.dump() + "\n";
  }
  if (a.out.empty()) out << lines;
  else at_flag("--out", [&] { write_file_atomic(a.out, lines); });
  return kExitOk;
}

struct GradcheckArgs {
  std::string config = "test-nano";
  double eps = 1e-5, tol = 1e-4;
  std::size_t max_coords = 0;
  std::uint64_t seed = 1;
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  const RunConfig cfg = at_flag("--config", [&] { return load_run_config(a.config); });
  if (cfg.model.vocab_size == 0) throw ConfigError("--config: gradcheck needs an explicit model.vocab_size");
  if (!(a.eps > 0)) throw ConfigError("--eps: must be > 0");
  if (!(a.tol > 0)) throw ConfigError("--tol: must be > 0");
  FiniteDiffOptions o;
  o.eps = a.eps;
  o.tol = a.tol;
  o.max_coords_per_block = a.max_coords;
  o.sample_seed = a.seed;
  const CheckReport r = model_gradcheck(cfg.model, o, a.seed);
  out << format_report(r);
  return r.passed ? kExitOk : kExitRuntime;
}

struct RetrieveArgs {
  std::string kb, query;
  std::size_t k = 3;
};

int cmd_retrieve(const RetrieveArgs& a, std::ostream& out) {
  if (a.k == 0) throw ConfigError("--k: must be >= 1");
  const KnowledgeIndex kb = at_flag("--kb", [&] { return KnowledgeIndex::build(load_knowledge_base(a.kb)); });
  const auto tokens = tokenize(a.query);
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  std::size_t rank = 0;
  for (const auto& s : kb.retrieve(tokens, a.k)) {
    nlohmann::ordered_json j;
    j["rank"] = ++rank;
    j["term"] = kb.entry(s.entry).term;
    j["description"] = kb.entry(s.entry).description;
    j["score"] = s.score;
    arr.push_back(j);
  }
  out << arr.dump(2) << "\n";
  return kExitOk;
}

struct AblateArgs {
  std::string data, config = "desk-default", seeds = "1,2,3", out, kb;
  std::optional<std::size_t> max_steps;
  bool force = false, paper_rows = false;
};

int cmd_ablate(const AblateArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig cfg = at_flag("--config", [&] { return load_run_config(a.config); });
  if (a.max_steps) cfg.train.max_steps = *a.max_steps;
  std::vector<std::uint64_t> seeds;
  {
    std::stringstream ss(a.seeds);
    std::string part;
    while (std::getline(ss, part, ',')) {
      try {
        std::size_t used = 0;
        seeds.push_back(std::stoull(part, &used));
        if (used != part.size()) throw std::invalid_argument(part);
      } catch (const std::exception&) {
        throw ConfigError("--seeds: '" + part + "' is not a non-negative integer");
      }
    }
    if (seeds.empty()) throw ConfigError("--seeds: at least one seed is required");
  }
  LoadOptions lo;
  lo.d_vis = cfg.model.d_vis;
  const auto all = at_flag("--data", [&] { return load_dataset(a.data, lo); });
  const auto kb_entries = at_flag("--kb", [&] { return load_knowledge_base(sibling_kb(a.kb, a.data)); });
  const KnowledgeIndex kb = at_flag("--kb", [&] { return KnowledgeIndex::build(kb_entries); });
  const auto train_d = select_split(all, Split::Train);
  const auto dev_d = select_split(all, Split::Dev);
  const auto test_d = select_split(all, Split::Test);
  if (train_d.empty() || test_d.empty()) throw DatasetError("--data: train and test splits must be non-empty");

  const Vocabulary vocab = Vocabulary::build(vocabulary_corpus(train_d, kb_entries), cfg.min_freq);
  if (cfg.model.vocab_size != 0 && cfg.model.vocab_size != vocab.size())
    throw ConfigError("--config: model.vocab_size does not match the data's vocabulary");
  cfg.model.vocab_size = vocab.size();
  cfg.validate();
  const auto train_r = prepare_records(train_d, vocab, &kb, cfg.retrieve_k, cfg.model.max_len);
  const auto dev_r = prepare_records(dev_d, vocab, &kb, cfg.retrieve_k, cfg.model.max_len);
  const auto test_r = prepare_records(test_d, vocab, &kb, cfg.retrieve_k, cfg.model.max_len);
  at_flag("--out", [&] { prepare_output_dir(a.out, a.force); });

  AblationInputs in;
  in.model = cfg.model;
  in.train = cfg.train;
  in.decode = cfg.decode;
  in.train_set = train_r;
  in.dev_set = dev_r;
  in.test_set = test_r;
  in.test_gold = test_d;
  in.vocab = &vocab;
  err << "ablation: " << train_r.size() << " train / " << dev_r.size() << " dev / " << test_r.size()
      << " test records, " << seeds.size() << " seed(s), " << cfg.train.max_steps << " steps per run\n";
  auto rows = run_ablation(in, seeds, default_ablation(), [&](const std::string& run, std::uint64_t seed,
                                                              const MetricReport* r) {
    err << run << " seed " << seed << ": "
        << (r ? "ROUGE-L " + fmt4(r->rl) + " BLEU " + fmt4(r->bleu) : std::string("FAILED")) << "\n";
  });
  const auto summary = summarize_ablation(rows);
  bool failed = false;
  for (const auto& r : rows) {
    if (!r.report) {
      failed = true;
      err << "run " << r.model << " seed " << *r.seed << " failed: " << r.error << "\n";
    }
  }
  if (a.paper_rows)
    for (auto& r : paper_reference_rows()) rows.push_back(std::move(r));

  std::string md = format_ablation_markdown(summary, rows);
  const AblationSummary* full = nullptr;
  const AblationSummary* base = nullptr;
  for (const auto& s : summary) {
    if (s.model == "MMK-Summation") full = &s;
    if (s.model == "MM-MDS") base = &s;
  }
  if (full && base && full->n && base->n) {
    const bool ordered = full->mean.rl >= base->mean.rl;
    md += "\nROUGE-L ordering: MMK-Summation " + fmt4(full->mean.rl) + " ± " + fmt4(full->stddev.rl) + " vs MM-MDS " +
          fmt4(base->mean.rl) + " ± " + fmt4(base->stddev.rl) + " -> " +
          (ordered ? "MMK-Summation >= MM-MDS" : "MM-MDS > MMK-Summation") + " (difference " +
          fmt4(full->mean.rl - base->mean.rl) + ")\n";
  }
  const fs::path dir = a.out;
  write_file_atomic(dir / "ablation.csv", format_ablation_csv(rows));
  write_file_atomic(dir / "ablation_summary.csv", format_summary_csv(summary));
  write_file_atomic(dir / "ablation.md", md);
  out << md;
  return failed ? kExitRuntime : kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-task clinical dialogue summarization with knowledge and visual adapters", "mmk"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  bool check_finite = false;
  app.add_flag("--check-finite", check_finite, "Raise on the first NaN/Inf produced by any op")->default_str("false");

  GenDataArgs gd;
  auto* s_gen = app.add_subcommand("gen-data", "Write a synthetic dialogue corpus and knowledge base");
  s_gen->add_option("--n", gd.n, "Number of dialogues");
  s_gen->add_option("--seed", gd.seed, "Generator seed");
  s_gen->add_option("--dvis", gd.dvis, "Visual feature dimension");
  s_gen->add_option("--out", gd.out, "Output directory")->required();
  s_gen->add_flag("--force", gd.force, "Overwrite an existing output directory")->default_str("false");

  TrainArgs tr;
  auto* s_train = app.add_subcommand("train", "Train a model and write checkpoints plus a training log");
  s_train->add_option("--data", tr.data, "Dialogue JSONL")->required();
  s_train->add_option("--config", tr.config, "Preset name (test-nano, test-small, desk-default) or config file");
  s_train->add_option("--tasks", tr.tasks, "Comma-separated subset of sum,mcs,di");
  s_train->add_option("--kb", tr.kb, "Knowledge base JSONL")->default_str("<dir of --data>/kb.jsonl");
  s_train->add_option("--out", tr.out, "Output directory")->required();
  s_train->add_option("--split", tr.split, "Records to train on: train (dev split selects the best checkpoint) or all");
  s_train->add_option("--seed", tr.seed, "Override train.seed")->default_str("config");
  s_train->add_option("--max-steps", tr.max_steps, "Override train.max_steps")->default_str("config");
  s_train->add_option("--log-every", tr.log_every, "Progress line interval in steps (0 = silent)");
  s_train->add_flag("--force", tr.force, "Overwrite an existing output directory")->default_str("false");

  EvalArgs ev;
  auto* s_eval = app.add_subcommand("eval", "Score generations against gold targets");
  s_eval->add_option("--ckpt", ev.ckpt, "Checkpoint (vocab.json and kb.jsonl are read from its directory)")->default_str("none");
  s_eval->add_option("--data", ev.data, "Dialogue JSONL with gold targets")->required();
  s_eval->add_option("--split", ev.split, "train, dev, test or all");
  s_eval->add_option("--report", ev.report, "CSV report path")->required();
  s_eval->add_option("--tasks", ev.tasks, "Comma-separated subset of sum,mcs,di");
  s_eval->add_option("--predictions", ev.predictions, "Score these {id,task,output} JSONL lines instead of decoding")->default_str("none");
  s_eval->add_option("--beam", ev.beam, "Beam width (0 = checkpoint setting, 1 = greedy)");
  s_eval->add_option("--max-new", ev.max_new, "Maximum generated tokens (0 = checkpoint setting)");

  GenerateArgs ge;
  auto* s_gen2 = app.add_subcommand("generate", "Generate one task's output per input dialogue as JSONL");
  s_gen2->add_option("--ckpt", ge.ckpt, "Checkpoint (vocab.json and kb.jsonl are read from its directory)")->required();
  s_gen2->add_option("--input", ge.input, "Dialogue JSONL, or - for stdin")->required();
  s_gen2->add_option("--task", ge.task, "sum, mcs or di");
  s_gen2->add_option("--beam", ge.beam, "Beam width (0 = checkpoint setting, 1 = greedy)");
  s_gen2->add_option("--max-new", ge.max_new, "Maximum generated tokens (0 = checkpoint setting)");
  s_gen2->add_option("--out", ge.out, "Output JSONL")->default_str("stdout");

  GradcheckArgs gc;
  auto* s_gc = app.add_subcommand("gradcheck", "Finite-difference check of the full model's gradients");
  s_gc->add_option("--config", gc.config, "Preset name or config file");
  s_gc->add_option("--eps", gc.eps, "Central-difference step");
  s_gc->add_option("--tol", gc.tol, "Maximum allowed relative error");
  s_gc->add_option("--max-coords", gc.max_coords, "Coordinates sampled per parameter block (0 = all)");
  s_gc->add_option("--seed", gc.seed, "Seed for parameters, inputs and sampling");

  RetrieveArgs rt;
  auto* s_rt = app.add_subcommand("retrieve", "Rank knowledge entries for a query");
  s_rt->add_option("--kb", rt.kb, "Knowledge base JSONL")->required();
  s_rt->add_option("--query", rt.query, "Query text")->required();
  s_rt->add_option("--k", rt.k, "Number of entries");

  AblateArgs ab;
  auto* s_ab = app.add_subcommand("ablate", "Run the four-configuration task ablation over several seeds");
  s_ab->add_option("--data", ab.data, "Dialogue JSONL (split by id hash)")->required();
  s_ab->add_option("--config", ab.config, "Preset name or config file");
  s_ab->add_option("--seeds", ab.seeds, "Comma-separated seeds");
  s_ab->add_option("--out", ab.out, "Output directory")->required();
  s_ab->add_option("--kb", ab.kb, "Knowledge base JSONL")->default_str("<dir of --data>/kb.jsonl");
  s_ab->add_option("--max-steps", ab.max_steps, "Override train.max_steps")->default_str("config");
  s_ab->add_flag("--with-paper-rows", ab.paper_rows, "Append the published reference rows (paper_scale=true)")->default_str("false");
  s_ab->add_flag("--force", ab.force, "Overwrite an existing output directory")->default_str("false");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  const bool prev_finite = default_check_finite();
  if (check_finite) set_default_check_finite(true);
  const std::string cmd = app.get_subcommands().front()->get_name();
  int code = kExitRuntime;
  try {
    if (cmd == "gen-data") code = cmd_gen_data(gd, out);
    else if (cmd == "train") code = cmd_train(tr, out, err);
    else if (cmd == "eval") code = cmd_eval(ev, out);
    else if (cmd == "generate") code = cmd_generate(ge, in, out);
    else if (cmd == "gradcheck") code = cmd_gradcheck(gc, out);
    else if (cmd == "retrieve") code = cmd_retrieve(rt, out);
    else if (cmd == "ablate") code = cmd_ablate(ab, out, err);
  } catch (const ConfigError& e) {
    err << "mmk " << cmd << ": config error: " << e.what() << "\n";
    code = kExitValidation;
  } catch (const SchemaError& e) {
    err << "mmk " << cmd << ": schema error: " << e.what() << "\n";
    code = kExitValidation;
  } catch (const DatasetError& e) {
    err << "mmk " << cmd << ": dataset error: " << e.what() << "\n";
    code = kExitValidation;
  } catch (const IoError& e) {
    err << "mmk " << cmd << ": I/O error: " << e.what() << "\n";
    code = kExitValidation;
  } catch (const std::exception& e) {
    err << "mmk " << cmd << ": runtime error: " << e.what() << "\n";
    code = kExitRuntime;
  }
  set_default_check_finite(prev_finite);
  return code;
}

}  // namespace mmk
