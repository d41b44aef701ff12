#include "mmk/textproc.hpp"

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/locid.h>
#include <unicode/unistr.h>

#include <algorithm>
#include <map>

#include "mmk/errors.hpp"
#include "mmk/io.hpp"

namespace mmk {

namespace {

const std::vector<std::string>& special_names() {
  static const std::vector<std::string> names{"<pad>",  "<bos>",      "<eos>",      "<unk>",     "<sep>", "<patient>",
                                              "<doctor>", "<task_sum>", "<task_mcs>", "<task_di>", "<know>"};
  return names;
}

icu::UnicodeString nfc(const icu::UnicodeString& s) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* norm = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw Error("ICU NFC normalizer unavailable");
  icu::UnicodeString out = norm->normalize(s, status);
  if (U_FAILURE(status)) throw Error("ICU normalization failed");
  return out;
}

TokenSequence finish_sequence(std::vector<TokenId> ids, std::size_t max_len) {
  if (max_len < 2) throw ConfigError("max_len must be at least 2");
  if (ids.size() > max_len) {
    ids.resize(max_len);
    ids.back() = kEos;
  }
  return TokenSequence{std::move(ids)};
}

}  // namespace

TokenId task_token(Task t) {
  switch (t) {
    case Task::Sum: return kTaskSum;
    case Task::Mcs: return kTaskMcs;
    case Task::Di: return kTaskDi;
  }
  throw ContractError("unknown task");
}

std::vector<std::string> tokenize(std::string_view text) {
  icu::UnicodeString s = icu::UnicodeString::fromUTF8(icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  s = nfc(s);
  s.toLower(icu::Locale::getRoot());
  s = nfc(s);

  std::vector<std::string> out;
  icu::UnicodeString current;
  auto flush = [&] {
    if (current.isEmpty()) return;
    std::string utf8;
    current.toUTF8String(utf8);
    out.push_back(std::move(utf8));
    current.remove();
  };
  for (int32_t i = 0; i < s.length();) {
    const UChar32 c = s.char32At(i);
    i += U16_LENGTH(c);
    if (u_isUWhiteSpace(c) || u_iscntrl(c)) {
      flush();
    } else if (u_ispunct(c)) {
      flush();
      current.append(c);
      flush();
    } else {
      current.append(c);
    }
  }
  flush();
  return out;
}

bool is_punctuation(std::string_view token) {
  icu::UnicodeString s = icu::UnicodeString::fromUTF8(icu::StringPiece(token.data(), static_cast<int32_t>(token.size())));
  return s.countChar32() == 1 && u_ispunct(s.char32At(0));
}

std::string normalize(std::string_view text) {
  std::string out;
  for (const auto& tok : tokenize(text)) {
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

Vocabulary Vocabulary::build(std::span<const std::string> corpus, int min_freq) {
  if (min_freq < 1) throw ConfigError("min_freq must be >= 1");
  if (corpus.empty()) throw DatasetError("cannot build a vocabulary from an empty corpus");
  std::map<std::string, std::size_t> freq;
  for (const auto& text : corpus)
    for (auto& tok : tokenize(text)) ++freq[std::move(tok)];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : freq)
    if (n >= static_cast<std::size_t>(min_freq)) kept.emplace_back(tok, n);
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens = special_names();
  for (auto& [tok, n] : kept) tokens.push_back(tok);
  return from_tokens(std::move(tokens), min_freq);
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens, int min_freq) {
  const auto& specials = special_names();
  if (tokens.size() < specials.size() || !std::equal(specials.begin(), specials.end(), tokens.begin())) {
    throw SchemaError("vocabulary must start with the 11 reserved specials in order");
  }
  Vocabulary v;
  v.min_freq_ = min_freq;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto [it, inserted] = v.index_.emplace(tokens[i], static_cast<TokenId>(i));
    if (!inserted) throw SchemaError("duplicate vocabulary token '" + tokens[i] + "'");
  }
  v.tokens_ = std::move(tokens);
  return v;
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DimensionError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(tokens_.size()));
  }
  return tokens_[id];
}

nlohmann::json Vocabulary::to_json() const {
  nlohmann::ordered_json j;
  j["format"] = "mmk-vocab";
  j["version"] = 1;
  j["normalization"] = kNormalizationTag;
  j["min_freq"] = min_freq_;
  j["tokens"] = tokens_;
  return j;
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "mmk-vocab") throw SchemaError("not a vocabulary file");
    if (j.at("version").get<int>() != 1) throw SchemaError("unsupported vocabulary version");
    if (j.at("normalization").get<std::string>() != kNormalizationTag) {
      throw SchemaError("vocabulary normalization tag mismatch");
    }
    return from_tokens(j.at("tokens").get<std::vector<std::string>>(), j.at("min_freq").get<int>());
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed vocabulary JSON: ") + e.what());
  }
}

void Vocabulary::save(const std::filesystem::path& path) const { write_file_atomic(path, to_json().dump(1) + "\n"); }

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  try {
    return from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
}

std::uint64_t Vocabulary::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& tok : tokens_) {
    for (unsigned char c : tok) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    h ^= 0xff;
    h *= 0x100000001b3ULL;
  }
  return h;
}

TokenSequence encode_dialogue(const Dialogue& d, const Vocabulary& v, std::size_t max_len) {
  if (d.utterances.empty()) throw DatasetError("dialogue '" + d.id + "' has no utterances");
  std::vector<TokenId> ids{kBos};
  for (std::size_t u = 0; u < d.utterances.size(); ++u) {
    if (u > 0) ids.push_back(kSep);
    switch (d.utterances[u].speaker) {
      case Speaker::Patient: ids.push_back(kPatient); break;
      case Speaker::Doctor: ids.push_back(kDoctor); break;
      default: throw SchemaError("dialogue '" + d.id + "': unknown speaker label at utterance " + std::to_string(u));
    }
    for (const auto& tok : tokenize(d.utterances[u].text)) ids.push_back(v.id(tok));
  }
  ids.push_back(kEos);
  return finish_sequence(std::move(ids), max_len);
}

std::vector<TokenId> text_ids(std::string_view text, const Vocabulary& v) {
  std::vector<TokenId> ids;
  for (const auto& tok : tokenize(text)) ids.push_back(v.id(tok));
  return ids;
}

TokenSequence encode_text(std::string_view text, const Vocabulary& v, std::size_t max_len) {
  std::vector<TokenId> ids{kBos};
  for (TokenId id : text_ids(text, v)) ids.push_back(id);
  ids.push_back(kEos);
  return finish_sequence(std::move(ids), max_len);
}

TokenSequence encode_target(Task task, std::string_view text, const Vocabulary& v, std::size_t max_len) {
  if (max_len < 3) throw ConfigError("decoder max_len must be at least 3");
  std::vector<TokenId> ids{kBos, task_token(task)};
  for (TokenId id : text_ids(text, v)) ids.push_back(id);
  ids.push_back(kEos);
  return finish_sequence(std::move(ids), max_len);
}

std::string decode_tokens(std::span<const TokenId> ids, const Vocabulary& v) {
  std::string out;
  for (TokenId id : ids) {
    const std::string& tok = v.token(id);
    if (is_special(id)) continue;
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

std::vector<std::string> dialogue_tokens(const Dialogue& d) {
  std::vector<std::string> out;
  for (const auto& u : d.utterances)
    for (auto& tok : tokenize(u.text)) out.push_back(std::move(tok));
  return out;
}

}  // namespace mmk
