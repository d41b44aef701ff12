#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "mmk/cli.hpp"
#include "mmk/config.hpp"
#include "mmk/corpus.hpp"
#include "mmk/io.hpp"

using namespace mmk;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result mmk_run(std::vector<std::string> args, const std::string& input = "") {
  args.insert(args.begin(), "mmk");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::istringstream in(input);
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), in, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mmk_cli_test_" + name);
  fs::remove_all(p);
  return p;
}

const char* kTinyConfig = R"([model]
d_model = 16
n_heads = 2
n_enc_layers = 1
n_dec_layers = 1
d_ff = 16
d_adapter = 4
d_vis = 6
d_know = 16
max_len = 96
vocab_size = 0

[train]
max_steps = 3
batch_size = 4
warmup_steps = 1
eval_every = 2

[decode]
max_new_tokens = 4
)";

// A 24-dialogue corpus plus a tiny config, shared across cases.
const fs::path& corpus_dir() {
  static const fs::path dir = [] {
    const fs::path d = scratch("corpus");
    const auto r = mmk_run({"gen-data", "--n", "24", "--dvis", "6", "--out", d.string()});
    REQUIRE(r.code == kExitOk);
    write_file_atomic(d / "tiny.conf", kTinyConfig);
    return d;
  }();
  return dir;
}

const fs::path& trained_dir() {
  static const fs::path dir = [] {
    const fs::path d = scratch("trained");
    const auto r = mmk_run({"train", "--data", (corpus_dir() / "dialogues.jsonl").string(), "--config",
                            (corpus_dir() / "tiny.conf").string(), "--out", d.string(), "--log-every", "0"});
    REQUIRE(r.code == kExitOk);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("help lists every option with a default or REQUIRED") {
  for (const char* sub : {"gen-data", "train", "eval", "generate", "gradcheck", "retrieve", "ablate", ""}) {
    std::vector<std::string> args;
    if (*sub) args.push_back(sub);
    args.push_back("--help");
    const auto r = mmk_run(args);
    CAPTURE(sub);
    CHECK(r.code == kExitOk);
    std::istringstream is(r.out);
    std::string line;
    int options = 0;
    while (std::getline(is, line)) {
      if (line.rfind("  --", 0) != 0) continue;
      ++options;
      CAPTURE(line);
      CHECK((line.find("REQUIRED") != std::string::npos || line.find('[') != std::string::npos));
    }
    CHECK(options > 0);
  }
}

TEST_CASE("exit codes for validation failures") {
  CHECK(mmk_run({"train", "--bogus"}).code == kExitValidation);
  CHECK(mmk_run({}).code == kExitValidation);
  CHECK(mmk_run({"retrieve", "--kb", "/nonexistent/kb.jsonl", "--query", "x"}).code == kExitValidation);
  const auto missing = mmk_run({"train", "--data", "/nonexistent/d.jsonl", "--out", scratch("m").string()});
  CHECK(missing.code == kExitValidation);
  CHECK(missing.err.find("--data") != std::string::npos);
  // An existing output directory needs --force.
  const auto exists = mmk_run({"gen-data", "--n", "2", "--out", corpus_dir().string()});
  CHECK(exists.code == kExitValidation);
  CHECK(exists.err.find("--out") != std::string::npos);
  CHECK(mmk_run({"train", "--data", (corpus_dir() / "dialogues.jsonl").string(), "--tasks", "sum,foo", "--out",
                 scratch("t").string()})
            .code == kExitValidation);
  CHECK(mmk_run({"gradcheck", "--config", "no-such-preset"}).code == kExitValidation);
}

TEST_CASE("gradcheck subcommand passes on sampled coordinates") {
  const auto r = mmk_run({"gradcheck", "--max-coords", "3"});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("PASS") != std::string::npos);
}

TEST_CASE("eval with predictions equal to gold scores 100") {
  const auto data = corpus_dir() / "dialogues.jsonl";
  const auto gold = load_dataset(data);
  std::string lines;
  for (const auto& d : gold) {
    for (Task t : kAllTasks) {
      nlohmann::json j{{"id", d.id}, {"task", task_name(t)}, {"output", target_text(d.targets, t)}};
      lines += j.dump() + "\n";
    }
  }
  const fs::path dir = scratch("eval");
  fs::create_directories(dir);
  write_file_atomic(dir / "pred.jsonl", lines);
  const auto r = mmk_run({"eval", "--data", data.string(), "--split", "all", "--predictions",
                          (dir / "pred.jsonl").string(), "--report", (dir / "report.csv").string()});
  REQUIRE(r.code == kExitOk);
  const std::string csv = read_file(dir / "report.csv");
  CHECK(csv.rfind("task,B-1,B-2,B-3,B-4,BLEU,R-1,R-2,ROUGE-L,METEOR,Jaccard,EmbedSim,n\n", 0) == 0);
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  int rows = 0;
  while (std::getline(is, line)) {
    ++rows;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    REQUIRE(cells.size() == 13);
    CHECK(cells[5] == "100.0000");  // BLEU
    CHECK(cells[8] == "100.0000");  // ROUGE-L
    CHECK(cells[10] == "1.0000");   // Jaccard
    CHECK(cells[12] == std::to_string(gold.size()));
  }
  CHECK(rows == 3);
}

TEST_CASE("train, eval, generate and retrieve on a tiny run") {
  const fs::path& d = trained_dir();
  for (const char* f : {"vocab.json", "kb.jsonl", "config.conf", "train_log.csv", "final.mmks", "best.mmks"})
    CHECK(fs::exists(d / f));
  const std::string log = read_file(d / "train_log.csv");
  CHECK(std::count(log.begin(), log.end(), '\n') == 4);
  // The saved config parses and records the data-derived vocabulary size.
  const RunConfig saved = load_run_config((d / "config.conf").string());
  CHECK(saved.model.vocab_size > kNumSpecials);

  const auto data = corpus_dir() / "dialogues.jsonl";
  const auto ev = mmk_run({"eval", "--ckpt", (d / "best.mmks").string(), "--data", data.string(), "--split", "all",
                           "--tasks", "sum", "--report", (d / "eval.csv").string()});
  CHECK(ev.code == kExitOk);
  CHECK(ev.out.find("| sum |") != std::string::npos);

  // Input without targets, read from stdin.
  const auto dialogues = load_dataset(data);
  nlohmann::json in{{"id", "q1"}, {"utterances", nlohmann::json::array()}};
  for (const auto& u : dialogues[0].utterances) {
    nlohmann::json turn{{"speaker", std::string(speaker_name(u.speaker))}, {"text", u.text}};
    in["utterances"].push_back(turn);
  }
  const auto gen = mmk_run({"generate", "--ckpt", (d / "final.mmks").string(), "--input", "-", "--task", "di"},
                           in.dump() + "\n");
  REQUIRE(gen.code == kExitOk);
  const auto out = nlohmann::json::parse(gen.out);
  CHECK(out["id"] == "q1");
  CHECK(out["task"] == "di");
  CHECK(out["output"].is_string());
  CHECK(out["score"].is_number());

  const auto kb = load_knowledge_base(corpus_dir() / "kb.jsonl");
  REQUIRE(kb.size() >= 2);
  const auto rt = mmk_run({"retrieve", "--kb", (corpus_dir() / "kb.jsonl").string(), "--query",
                           "i have " + kb[0].term + " and " + kb[1].term, "--k", "2"});
  REQUIRE(rt.code == kExitOk);
  const auto arr = nlohmann::json::parse(rt.out);
  REQUIRE(arr.size() == 2);
  CHECK(arr[0]["rank"] == 1);
  const double s0 = arr[0]["score"], s1 = arr[1]["score"];
  CHECK(s0 >= s1);

  // A checkpoint beside a different vocabulary is rejected.
  const fs::path other = scratch("other_vocab");
  fs::create_directories(other);
  fs::copy_file(d / "final.mmks", other / "final.mmks");
  fs::copy_file(d / "kb.jsonl", other / "kb.jsonl");
  Vocabulary::build(std::vector<std::string>{"zz"}, 1).save(other / "vocab.json");
  CHECK(mmk_run({"generate", "--ckpt", (other / "final.mmks").string(), "--input", data.string()}).code ==
        kExitValidation);
}

TEST_CASE("ablate writes the four named rows per seed") {
  const fs::path out = scratch("ablate");
  const auto r = mmk_run({"ablate", "--data", (corpus_dir() / "dialogues.jsonl").string(), "--config",
                          (corpus_dir() / "tiny.conf").string(), "--seeds", "1,2", "--max-steps", "2", "--out",
                          out.string(), "--with-paper-rows"});
  REQUIRE(r.code == kExitOk);
  const std::string csv = read_file(out / "ablation.csv");
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  std::vector<std::string> models;
  while (std::getline(is, line)) models.push_back(line.substr(0, line.find(',')));
  const std::vector<std::string> want{"MM-MDS",  "MM-MDS",        "with-MCS",      "with-MCS",
                                      "with-DI", "with-DI",       "MMK-Summation", "MMK-Summation",
                                      "MM-MDS",  "with-MCS",      "with-DI",       "MMK-Summation"};
  CHECK(models == want);
  CHECK(fs::exists(out / "ablation_summary.csv"));
  CHECK(read_file(out / "ablation.md").find("ROUGE-L ordering") != std::string::npos);
}

TEST_CASE("config files: errors carry file and line, shipped files equal presets") {
  const std::string src = "cfg.conf";
  try {
    parse_run_config("[model]\nd_model = 16\nbogus = 3\n", src);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("cfg.conf:3:") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_run_config("[model]\nd_model = 16\nd_model = 32\n", src), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[nope]\n", src), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[train]\nlr =\n", src), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[train]\nlr = fast\n", src), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[model]\nd_model = 15\n", src), ConfigError);  // not divisible by heads

  for (const auto& name : preset_names()) {
    CAPTURE(name);
    const RunConfig p = preset(name);
    CHECK(parse_run_config(format_run_config(p), name) == p);
    const std::string path = std::string(MMK_CONFIG_DIR) + "/" + name;
    REQUIRE(fs::exists(path));
    CHECK(load_run_config(path) == p);
  }
}
