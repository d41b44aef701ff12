#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mmk/dialogue.hpp"
#include "mmk/errors.hpp"
#include "mmk/knowledge.hpp"

namespace mmk {

// One schema violation, addressed by 1-based line and JSON field path.
struct Violation {
  std::size_t line = 0;
  std::string field;
  std::string message;
};

// Raised by the dataset loader; carries every violation found in the file.
class DatasetSchemaError : public SchemaError {
 public:
  DatasetSchemaError(std::string source, std::vector<Violation> violations);
  const std::vector<Violation>& violations() const { return violations_; }

 private:
  std::vector<Violation> violations_;
};

struct LoadOptions {
  // Expected visual dimension; when unset the first record with a visual
  // vector fixes it for the file.
  std::optional<std::size_t> d_vis;
  // Inference inputs may omit mcs/di/summary.
  bool require_targets = true;
};

// JSON Lines, one dialogue per line; blank lines are skipped. Records come
// back in file order.
std::vector<Dialogue> parse_dataset(std::string_view content, const std::string& source, const LoadOptions& opts = {});
std::vector<Dialogue> load_dataset(const std::filesystem::path& path, const LoadOptions& opts = {});

nlohmann::ordered_json dialogue_to_json(const Dialogue& d);
std::string serialize_dataset(std::span<const Dialogue> records);
void save_dataset(const std::filesystem::path& path, std::span<const Dialogue> records);

enum class Split { Train, Dev, Test };

std::string_view split_name(Split s);
Split parse_split(std::string_view name);
// 80/10/10 by FNV-1a hash of a fixed salt and the dialogue id.
Split split_of(std::string_view id);
std::vector<Dialogue> select_split(std::span<const Dialogue> records, Split split);

// Token stream a vocabulary is built from: dialogue tokens, all three
// targets and the knowledge descriptions.
std::vector<std::string> vocabulary_corpus(std::span<const Dialogue> dialogues,
                                           std::span<const KnowledgeSnippet> knowledge);

// ---------------------------------------------------------------------------
// Synthetic clinical dialogues

struct SymptomProfile {
  std::string symptom;
  std::string description;
};

struct DiagnosisProfile {
  std::string diagnosis;
  std::string description;
  std::string advice;
  std::vector<SymptomProfile> symptoms;
};

// 8 diagnoses partitioning a 20-symptom inventory.
const std::vector<DiagnosisProfile>& clinical_inventory();
// Symptom -> diagnosis implied by the inventory.
std::string diagnosis_for(std::string_view symptom);
// Position of a symptom in the 20-entry inventory.
std::size_t symptom_index(std::string_view symptom);

struct SyntheticRecord {
  std::vector<std::string> symptoms;  // in order of mention
  std::string diagnosis;
  std::string duration;
};

struct SyntheticCorpus {
  std::vector<Dialogue> dialogues;
  std::vector<SyntheticRecord> records;  // parallel to dialogues
  std::vector<KnowledgeSnippet> knowledge;
};

SyntheticCorpus generate_synthetic(std::size_t n, std::uint64_t seed, std::size_t d_vis);

}  // namespace mmk
