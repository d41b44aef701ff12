#include <cmath>
#include <map>
#include <sstream>

#include "mmk/corpus.hpp"
#include "mmk/io.hpp"
#include "mmk/textproc.hpp"

namespace mmk {

namespace {

std::string describe(const std::string& source, const std::vector<Violation>& violations) {
  std::string msg = source + ": " + std::to_string(violations.size()) + " schema violation(s)";
  for (const auto& v : violations) msg += "\n  line " + std::to_string(v.line) + ": " + v.field + ": " + v.message;
  return msg;
}

class RecordChecker {
 public:
  RecordChecker(std::size_t line, std::vector<Violation>& out) : line_(line), out_(out) {}

  void fail(std::string field, std::string message) {
    out_.push_back({line_, std::move(field), std::move(message)});
    ok_ = false;
  }
  bool ok() const { return ok_; }

  std::optional<std::string> string_field(const nlohmann::json& j, const std::string& key, const std::string& path,
                                          bool non_empty) {
    if (!j.contains(key)) {
      fail(path, "missing");
      return std::nullopt;
    }
    if (!j[key].is_string()) {
      fail(path, "must be a string");
      return std::nullopt;
    }
    std::string s = j[key].get<std::string>();
    if (non_empty && normalize(s).empty()) {
      fail(path, "must be non-empty");
      return std::nullopt;
    }
    return s;
  }

 private:
  std::size_t line_;
  std::vector<Violation>& out_;
  bool ok_ = true;
};

}  // namespace

DatasetSchemaError::DatasetSchemaError(std::string source, std::vector<Violation> violations)
    : SchemaError(describe(source, violations)), violations_(std::move(violations)) {}

std::vector<Dialogue> parse_dataset(std::string_view content, const std::string& source, const LoadOptions& opts) {
  std::vector<Dialogue> records;
  std::vector<Violation> violations;
  std::map<std::string, std::size_t> first_line_of_id;
  std::optional<std::size_t> d_vis = opts.d_vis;

  std::istringstream in{std::string(content)};
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    RecordChecker check(line, violations);

    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      // Includes numeric overflow such as 1e999, the only way JSON text can
      // spell a non-finite number.
      check.fail("$", std::string("invalid JSON: ") + e.what());
      continue;
    }
    if (!j.is_object()) {
      check.fail("$", "record must be a JSON object");
      continue;
    }

    Dialogue d;
    if (auto id = check.string_field(j, "id", "id", false)) {
      if (id->empty()) {
        check.fail("id", "must be non-empty");
      } else if (auto [it, fresh] = first_line_of_id.emplace(*id, line); !fresh) {
        check.fail("id", "duplicate id '" + *id + "' (first seen on line " + std::to_string(it->second) + ")");
      } else {
        d.id = *id;
      }
    }

    if (!j.contains("utterances") || !j["utterances"].is_array()) {
      check.fail("utterances", j.contains("utterances") ? "must be an array" : "missing");
    } else {
      const auto& us = j["utterances"];
      if (us.size() < 2) check.fail("utterances", "needs at least 2 utterances, got " + std::to_string(us.size()));
      for (std::size_t i = 0; i < us.size(); ++i) {
        const std::string path = "utterances[" + std::to_string(i) + "]";
        if (!us[i].is_object()) {
          check.fail(path, "must be an object");
          continue;
        }
        Utterance u;
        bool good = true;
        if (auto sp = check.string_field(us[i], "speaker", path + ".speaker", false)) {
          if (*sp == "patient" || *sp == "doctor") {
            u.speaker = parse_speaker(*sp);
            if (i == 0 && u.speaker != Speaker::Patient) {
              check.fail(path + ".speaker", "dialogue must begin with a patient utterance");
            }
          } else {
            check.fail(path + ".speaker", "unknown speaker '" + *sp + "' (expected patient or doctor)");
            good = false;
          }
        } else {
          good = false;
        }
        if (auto t = check.string_field(us[i], "text", path + ".text", true)) {
          u.text = *t;
        } else {
          good = false;
        }
        if (good) d.utterances.push_back(std::move(u));
      }
    }

    if (j.contains("visual") && !j["visual"].is_null()) {
      const auto& vis = j["visual"];
      if (!vis.is_array() || vis.empty()) {
        check.fail("visual", "must be a non-empty array of numbers");
      } else {
        std::vector<double> v;
        bool good = true;
        for (std::size_t i = 0; i < vis.size(); ++i) {
          if (!vis[i].is_number() || !std::isfinite(vis[i].get<double>())) {
            check.fail("visual[" + std::to_string(i) + "]", "must be a finite number");
            good = false;
            break;
          }
          v.push_back(vis[i].get<double>());
        }
        if (good && d_vis && v.size() != *d_vis) {
          check.fail("visual", "expected " + std::to_string(*d_vis) + " entries, got " + std::to_string(v.size()));
          good = false;
        }
        if (good) {
          if (!d_vis) d_vis = v.size();
          d.visual = std::move(v);
        }
      }
    }

    for (Task t : kAllTasks) {
      const std::string key(task_name(t) == "sum" ? "summary" : task_name(t));
      std::string* dst = t == Task::Sum ? &d.targets.summary : t == Task::Mcs ? &d.targets.mcs : &d.targets.di;
      if (opts.require_targets) {
        if (auto s = check.string_field(j, key, key, true)) *dst = *s;
      } else if (j.contains(key)) {
        if (auto s = check.string_field(j, key, key, false)) *dst = *s;
      }
    }

    if (check.ok()) records.push_back(std::move(d));
  }
  if (!violations.empty()) throw DatasetSchemaError(source, std::move(violations));
  return records;
}

std::vector<Dialogue> load_dataset(const std::filesystem::path& path, const LoadOptions& opts) {
  return parse_dataset(read_file(path), path.string(), opts);
}

nlohmann::ordered_json dialogue_to_json(const Dialogue& d) {
  nlohmann::ordered_json j;
  j["id"] = d.id;
  j["utterances"] = nlohmann::ordered_json::array();
  for (const auto& u : d.utterances) {
    nlohmann::ordered_json uj;
    uj["speaker"] = speaker_name(u.speaker);
    uj["text"] = u.text;
    j["utterances"].push_back(std::move(uj));
  }
  if (d.visual) j["visual"] = *d.visual;
  j["mcs"] = d.targets.mcs;
  j["di"] = d.targets.di;
  j["summary"] = d.targets.summary;
  return j;
}

std::string serialize_dataset(std::span<const Dialogue> records) {
  std::string out;
  for (const auto& d : records) out += dialogue_to_json(d).dump() + "\n";
  return out;
}

void save_dataset(const std::filesystem::path& path, std::span<const Dialogue> records) {
  write_file_atomic(path, serialize_dataset(records));
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "dev") return Split::Dev;
  if (name == "test") return Split::Test;
  throw ConfigError("unknown split '" + std::string(name) + "' (expected train, dev or test)");
}

Split split_of(std::string_view id) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : std::string("mmk-split-v1:") + std::string(id)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  const std::uint64_t bucket = h % 10;
  if (bucket < 8) return Split::Train;
  return bucket == 8 ? Split::Dev : Split::Test;
}

std::vector<Dialogue> select_split(std::span<const Dialogue> records, Split split) {
  std::vector<Dialogue> out;
  for (const auto& d : records)
    if (split_of(d.id) == split) out.push_back(d);
  return out;
}

std::vector<std::string> vocabulary_corpus(std::span<const Dialogue> dialogues,
                                           std::span<const KnowledgeSnippet> knowledge) {
  std::vector<std::string> out;
  auto append = [&](std::vector<std::string> toks) { out.insert(out.end(), toks.begin(), toks.end()); };
  for (const auto& d : dialogues) {
    append(dialogue_tokens(d));
    for (Task t : kAllTasks) append(tokenize(target_text(d.targets, t)));
  }
  for (const auto& k : knowledge) {
    append(tokenize(k.term));
    append(tokenize(k.description));
  }
  return out;
}

}  // namespace mmk
