#include "mmk/knowledge.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "mmk/errors.hpp"
#include "mmk/io.hpp"

namespace mmk {

namespace {

double norm_of(const SparseVector& v) {
  double s = 0.0;
  for (const auto& [t, w] : v) s += w * w;
  return std::sqrt(s);
}

}  // namespace

std::vector<std::string> query_tokens(std::span<const std::string> tokens) {
  std::vector<std::string> out;
  for (const auto& t : tokens)
    if (!t.empty() && !is_punctuation(t)) out.push_back(t);
  return out;
}

KnowledgeIndex KnowledgeIndex::build(std::vector<KnowledgeSnippet> entries) {
  if (entries.empty()) throw SchemaError("knowledge base is empty");
  std::set<std::string> seen;
  for (const auto& e : entries) {
    const std::string term = normalize(e.term);
    if (term.empty()) throw SchemaError("knowledge entry with empty term");
    if (normalize(e.description).empty()) throw SchemaError("knowledge entry '" + e.term + "' has an empty description");
    if (!seen.insert(term).second) throw SchemaError("duplicate knowledge term '" + e.term + "'");
  }

  KnowledgeIndex idx;
  idx.entries_ = std::move(entries);
  std::vector<std::map<std::string, std::size_t>> tfs;
  for (const auto& e : idx.entries_) {
    std::map<std::string, std::size_t> tf;
    for (auto& tok : query_tokens(tokenize(e.term + " " + e.description))) ++tf[tok];
    for (const auto& [tok, n] : tf) ++idx.df_[tok];
    tfs.push_back(std::move(tf));
  }
  for (std::size_t i = 0; i < tfs.size(); ++i) {
    SparseVector v;
    for (const auto& [tok, n] : tfs[i]) v.emplace_back(tok, static_cast<double>(n) * idx.idf(tok));
    const double nrm = norm_of(v);
    for (auto& [tok, w] : v) {
      w /= nrm;
      idx.postings_[tok].emplace_back(i, w);
    }
    idx.vectors_.push_back(std::move(v));
  }
  return idx;
}

std::size_t KnowledgeIndex::df(std::string_view token) const {
  auto it = df_.find(std::string(token));
  return it == df_.end() ? 0 : it->second;
}

double KnowledgeIndex::idf(std::string_view token) const {
  const double n = static_cast<double>(entries_.size());
  return std::log((1.0 + n) / (1.0 + static_cast<double>(df(token)))) + 1.0;
}

double KnowledgeIndex::entry_cosine(std::size_t a, std::size_t b) const {
  const auto& va = vectors_.at(a);
  const auto& vb = vectors_.at(b);
  double dot = 0.0;
  std::size_t i = 0, j = 0;
  while (i < va.size() && j < vb.size()) {
    if (va[i].first == vb[j].first) {
      dot += va[i++].second * vb[j++].second;
    } else if (va[i].first < vb[j].first) {
      ++i;
    } else {
      ++j;
    }
  }
  return dot;
}

SparseVector KnowledgeIndex::query_vector(std::span<const std::string> context) const {
  std::map<std::string, std::size_t> tf;
  for (auto& tok : query_tokens(context))
    if (df_.count(tok)) ++tf[tok];
  SparseVector q;
  for (const auto& [tok, n] : tf) q.emplace_back(tok, static_cast<double>(n) * idf(tok));
  const double nrm = norm_of(q);
  for (auto& [tok, w] : q) w /= nrm;
  return q;
}

double KnowledgeIndex::score(std::span<const std::string> context, std::size_t entry) const {
  const SparseVector q = query_vector(context);
  double dot = 0.0;
  for (const auto& [tok, w] : q) {
    for (const auto& [e, ew] : postings_.at(tok))
      if (e == entry) dot += w * ew;
  }
  return dot;
}

std::vector<ScoredSnippet> KnowledgeIndex::retrieve(std::span<const std::string> context, std::size_t k) const {
  if (k == 0) throw ConfigError("retrieve: k must be >= 1");
  const SparseVector q = query_vector(context);
  std::vector<double> scores(entries_.size(), 0.0);
  for (const auto& [tok, w] : q)
    for (const auto& [e, ew] : postings_.at(tok)) scores[e] += w * ew;
  std::vector<ScoredSnippet> ranked;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i] > 0.0) ranked.push_back({i, std::min(scores[i], 1.0)});
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  if (ranked.size() > k) ranked.resize(k);
  return ranked;
}

std::vector<ScoredSnippet> KnowledgeIndex::retrieve(const TokenSequence& context, const Vocabulary& vocab,
                                                    std::size_t k) const {
  std::vector<std::string> toks;
  for (TokenId id : context.ids)
    if (!is_special(id)) toks.push_back(vocab.token(id));
  return retrieve(toks, k);
}

std::vector<KnowledgeSnippet> parse_knowledge_base(std::string_view content, const std::string& source) {
  std::vector<KnowledgeSnippet> out;
  std::istringstream in{std::string(content)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw SchemaError(where + ": invalid JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw SchemaError(where + ": knowledge record must be an object");
    for (const char* field : {"term", "description"}) {
      if (!j.contains(field) || !j[field].is_string()) throw SchemaError(where + ": field '" + field + "' must be a string");
      if (normalize(j[field].get<std::string>()).empty()) throw SchemaError(where + ": field '" + field + "' is empty");
    }
    out.push_back({j["term"].get<std::string>(), j["description"].get<std::string>()});
  }
  return out;
}

std::vector<KnowledgeSnippet> load_knowledge_base(const std::filesystem::path& path) {
  return parse_knowledge_base(read_file(path), path.string());
}

std::string serialize_knowledge_base(std::span<const KnowledgeSnippet> entries) {
  std::string out;
  for (const auto& e : entries) {
    nlohmann::ordered_json j;
    j["term"] = e.term;
    j["description"] = e.description;
    out += j.dump() + "\n";
  }
  return out;
}

void save_knowledge_base(const std::filesystem::path& path, std::span<const KnowledgeSnippet> entries) {
  write_file_atomic(path, serialize_knowledge_base(entries));
}

Var encode_knowledge(Graph& g, std::span<const std::vector<TokenId>> descriptions, Var embeddings) {
  const std::size_t d = embeddings.value().cols();
  std::vector<TokenId> ids;
  std::vector<double> weights;
  std::size_t used = 0;
  for (const auto& desc : descriptions)
    if (!desc.empty()) ++used;
  for (const auto& desc : descriptions) {
    if (desc.empty()) continue;
    const double w = 1.0 / (static_cast<double>(used) * static_cast<double>(desc.size()));
    for (TokenId id : desc) {
      ids.push_back(id);
      weights.push_back(w);
    }
  }
  if (ids.empty()) return g.constant(Tensor::zeros({1, d}));
  return embedding_bag(embeddings, ids, weights);
}

}  // namespace mmk
