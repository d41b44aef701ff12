#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mmk/autograd.hpp"
#include "mmk/textproc.hpp"

namespace mmk {

struct KnowledgeSnippet {
  std::string term;
  std::string description;

  friend bool operator==(const KnowledgeSnippet&, const KnowledgeSnippet&) = default;
};

struct ScoredSnippet {
  std::size_t entry = 0;
  double score = 0.0;
};

using SparseVector = std::vector<std::pair<std::string, double>>;  // sorted by token

// TF-IDF index over "term + description" of each entry.
//   idf(t) = ln((1 + N) / (1 + df(t))) + 1
//   entry vector = raw tf * idf, L2-normalized
// Queries keep only tokens that occur in some entry.
class KnowledgeIndex {
 public:
  // Throws SchemaError on an empty list, empty fields or a duplicate
  // (normalized) term.
  static KnowledgeIndex build(std::vector<KnowledgeSnippet> entries);

  std::size_t size() const { return entries_.size(); }
  const KnowledgeSnippet& entry(std::size_t i) const { return entries_.at(i); }
  const std::vector<KnowledgeSnippet>& entries() const { return entries_; }

  std::size_t df(std::string_view token) const;
  double idf(std::string_view token) const;
  const SparseVector& entry_vector(std::size_t i) const { return vectors_.at(i); }
  double entry_cosine(std::size_t a, std::size_t b) const;

  // Cosine between the tf-idf vector of `context` and entry i.
  double score(std::span<const std::string> context, std::size_t entry) const;

  // Top-k entries by cosine, descending; ties keep entry order; zero scores
  // are dropped, so the result may be shorter than k.
  std::vector<ScoredSnippet> retrieve(std::span<const std::string> context, std::size_t k) const;
  // Same over an encoder sequence: special ids and UNK are skipped.
  std::vector<ScoredSnippet> retrieve(const TokenSequence& context, const Vocabulary& vocab, std::size_t k) const;

 private:
  SparseVector query_vector(std::span<const std::string> context) const;

  std::vector<KnowledgeSnippet> entries_;
  std::unordered_map<std::string, std::size_t> df_;
  std::unordered_map<std::string, std::vector<std::pair<std::size_t, double>>> postings_;
  std::vector<SparseVector> vectors_;
};

// Drops punctuation-only tokens (speaker tags never reach this layer).
std::vector<std::string> query_tokens(std::span<const std::string> tokens);

// JSON Lines, one {"term": str, "description": str} per line.
std::vector<KnowledgeSnippet> parse_knowledge_base(std::string_view content, const std::string& source);
std::vector<KnowledgeSnippet> load_knowledge_base(const std::filesystem::path& path);
std::string serialize_knowledge_base(std::span<const KnowledgeSnippet> entries);
void save_knowledge_base(const std::filesystem::path& path, std::span<const KnowledgeSnippet> entries);

// Mean over snippets of the mean token embedding of each description;
// [1 x d] zeros when there are no snippets. Differentiable into `embeddings`.
Var encode_knowledge(Graph& g, std::span<const std::vector<TokenId>> descriptions, Var embeddings);

}  // namespace mmk
