#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "forge/tensor.hpp"

namespace forge {

inline constexpr std::size_t kNumSpecialTokens = 128;

/// Names of the first special tokens, in id order from the end of the base vocabulary.
/// The remaining slots are "<|reserved_N|>".
inline constexpr std::string_view kBosToken = "<s>";
inline constexpr std::string_view kEosToken = "</s>";
inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kSystemToken = "<|system|>";
inline constexpr std::string_view kUserToken = "<|user|>";
inline constexpr std::string_view kAssistantToken = "<|assistant|>";
inline constexpr std::string_view kToolToken = "<|tool|>";
inline constexpr std::string_view kEndToken = "<|end|>";

enum class SpecialPolicy {
  render,  // special ids decode to their names
  skip,    // special ids decode to nothing
  reject,  // special ids are an error
};

/// Byte-level BPE.
///
/// Ids 0..255 are raw bytes, 256.. are merges in rank order, and the base vocabulary
/// may be padded with unused ids up to base_size. All 128 special tokens follow the
/// base vocabulary. Text is pre-split into chunks (letter, digit and punctuation runs,
/// each taking one preceding space; whitespace runs) and merging never crosses chunks.
class Tokenizer {
 public:
  using Merge = std::pair<std::string, std::string>;

  /// Bytes only.
  Tokenizer() : Tokenizer(std::vector<Merge>{}) {}

  /// Merges are (left, right) byte strings in rank order; each side must already be a
  /// token when the merge is reached. base_size 0 means exactly 256 + merges.size().
  explicit Tokenizer(const std::vector<Merge>& merges, std::size_t base_size = 0);

  /// Learns num_merges merges from a corpus (most frequent adjacent pair first,
  /// ties broken by the lexicographically smaller pair of byte strings).
  static Tokenizer train(std::span<const std::string> corpus, std::size_t num_merges, std::size_t base_size = 0);

  static Tokenizer load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids, SpecialPolicy policy = SpecialPolicy::render) const;

  std::size_t base_size() const noexcept { return base_size_; }
  std::size_t vocab_size() const noexcept { return base_size_ + kNumSpecialTokens; }
  std::size_t num_merges() const noexcept { return merges_.size(); }
  const std::vector<Merge>& merges() const noexcept { return merges_; }

  /// Byte string of a base token; throws DataError for padding slots and specials.
  const std::string& token_bytes(TokenId id) const;

  TokenId special(std::string_view name) const;
  bool is_special(TokenId id) const noexcept;
  std::optional<std::string_view> special_name(TokenId id) const;

  TokenId bos() const { return special(kBosToken); }
  TokenId eos() const { return special(kEosToken); }
  TokenId end() const { return special(kEndToken); }

  friend bool operator==(const Tokenizer& a, const Tokenizer& b) {
    return a.merges_ == b.merges_ && a.base_size_ == b.base_size_;
  }

 private:
  void encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const;

  std::vector<Merge> merges_;
  std::size_t base_size_ = 256;
  std::vector<std::string> vocab_;  // bytes per base id that is in use
  std::unordered_map<std::uint64_t, std::pair<std::uint32_t, TokenId>> ranks_;  // (left,right) -> (rank, merged)
  std::vector<std::string> special_names_;
};

/// Pre-tokenizer used by encode and train. Concatenating the chunks gives the input.
std::vector<std::string_view> pretokenize(std::string_view text);

std::string special_token_name(std::size_t index);

struct TokenStats {
  std::size_t tokens = 0;
  std::size_t chars = 0;  // Unicode scalar values
  std::size_t words = 0;  // maximal runs of non-whitespace
  std::optional<double> cpt;  // chars / tokens, absent when tokens == 0
  std::optional<double> tpw;  // tokens / words, absent when words == 0
};

TokenStats token_stats(std::size_t tokens, std::string_view text);
TokenStats token_stats(const Tokenizer& tok, std::string_view text);

std::size_t utf8_length(std::string_view text);
std::size_t count_words(std::string_view text);

}  // namespace forge
