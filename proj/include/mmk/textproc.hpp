#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mmk/dialogue.hpp"
#include "json.hpp"

namespace mmk {

using TokenId = std::int32_t;

// Reserved ids, fixed order.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kSep = 4;
inline constexpr TokenId kPatient = 5;
inline constexpr TokenId kDoctor = 6;
inline constexpr TokenId kTaskSum = 7;
inline constexpr TokenId kTaskMcs = 8;
inline constexpr TokenId kTaskDi = 9;
inline constexpr TokenId kKnow = 10;
inline constexpr TokenId kNumSpecials = 11;

inline bool is_special(TokenId id) { return id >= 0 && id < kNumSpecials; }
inline bool is_task_token(TokenId id) { return id >= kTaskSum && id <= kTaskDi; }
TokenId task_token(Task t);

inline constexpr std::string_view kNormalizationTag = "nfc-lower-ws-punct-v1";

// NFC, lowercase (root locale), whitespace split, every punctuation code
// point a token of its own.
std::vector<std::string> tokenize(std::string_view text);
// True for a token consisting of one punctuation code point.
bool is_punctuation(std::string_view token);
// tokenize() joined by single spaces.
std::string normalize(std::string_view text);

class Vocabulary {
 public:
  // Tokens with frequency >= min_freq, ordered by frequency desc then
  // lexicographically, after the 11 reserved specials.
  static Vocabulary build(std::span<const std::string> corpus, int min_freq);
  // Rebuild from a full id-ordered token list (specials included).
  static Vocabulary from_tokens(std::vector<std::string> tokens, int min_freq);

  std::size_t size() const { return tokens_.size(); }
  int min_freq() const { return min_freq_; }
  // UNK for unknown tokens.
  TokenId id(std::string_view token) const;
  bool contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);
  // FNV-1a over the serialized token list; stored in checkpoints.
  std::uint64_t fingerprint() const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  int min_freq_ = 1;
};

struct TokenSequence {
  std::vector<TokenId> ids;

  std::size_t size() const { return ids.size(); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

// BOS, per utterance speaker tag + tokens, SEP between utterances, EOS.
// Head-preserving truncation to max_len with EOS kept last.
TokenSequence encode_dialogue(const Dialogue& d, const Vocabulary& v, std::size_t max_len);
// BOS, tokens, EOS (truncated the same way).
TokenSequence encode_text(std::string_view text, const Vocabulary& v, std::size_t max_len);
// Decoder sequence: BOS, task token, tokens, EOS.
TokenSequence encode_target(Task task, std::string_view text, const Vocabulary& v, std::size_t max_len);
// Plain token ids of a text, no markers.
std::vector<TokenId> text_ids(std::string_view text, const Vocabulary& v);

// Specials stripped, remaining tokens joined with single spaces.
std::string decode_tokens(std::span<const TokenId> ids, const Vocabulary& v);

// Normalized tokens of the whole dialogue (no speaker tags); the retrieval
// query and the vocabulary corpus both use this view.
std::vector<std::string> dialogue_tokens(const Dialogue& d);

}  // namespace mmk
