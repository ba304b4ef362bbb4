#include "forge/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "forge/error.hpp"

namespace forge {

namespace {

constexpr std::string_view kFileMagic = "forge-tokenizer 1";

std::uint64_t pair_key(TokenId a, TokenId b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
}

enum class CharClass { space, letter, digit, other };

bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

CharClass classify(unsigned char c) {
  if (is_space(c)) return CharClass::space;
  if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80) return CharClass::letter;
  if (c >= '0' && c <= '9') return CharClass::digit;
  return CharClass::other;
}

std::string to_hex(std::string_view bytes) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (unsigned char c : bytes) {
    out.push_back(digits[c >> 4]);
    out.push_back(digits[c & 15]);
  }
  return out;
}

std::string from_hex(std::string_view hex, const std::string& where) {
  auto nibble = [&](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    throw DataError(where + ": bad hex digit");
  };
  if (hex.empty() || hex.size() % 2) throw DataError(where + ": bad hex string '" + std::string(hex) + "'");
  std::string out;
  for (std::size_t i = 0; i < hex.size(); i += 2) out.push_back(static_cast<char>(nibble(hex[i]) * 16 + nibble(hex[i + 1])));
  return out;
}

}  // namespace

std::string special_token_name(std::size_t index) {
  static constexpr std::string_view named[] = {kBosToken,       kEosToken,      kPadToken,      kSystemToken,
                                               kUserToken,      kAssistantToken, kToolToken,   kEndToken};
  if (index < std::size(named)) return std::string(named[index]);
  return "<|reserved_" + std::to_string(index) + "|>";
}

std::vector<std::string_view> pretokenize(std::string_view text) {
  std::vector<std::string_view> out;
  const std::size_t n = text.size();
  std::size_t i = 0;
  while (i < n) {
    std::size_t start = i;
    if (is_space(static_cast<unsigned char>(text[i]))) {
      std::size_t j = i;
      while (j < n && is_space(static_cast<unsigned char>(text[j]))) ++j;
      if (j == n || text[j - 1] != ' ') {
        out.push_back(text.substr(i, j - i));
        i = j;
        continue;
      }
      // A single trailing space attaches to the following run.
      if (j - 1 > i) out.push_back(text.substr(i, j - 1 - i));
      start = j - 1;
      i = j;
    }
    const CharClass c = classify(static_cast<unsigned char>(text[i]));
    std::size_t j = i;
    while (j < n && classify(static_cast<unsigned char>(text[j])) == c) ++j;
    out.push_back(text.substr(start, j - start));
    i = j;
  }
  return out;
}

Tokenizer::Tokenizer(const std::vector<Merge>& merges, std::size_t base_size) : merges_(merges) {
  const std::size_t used = 256 + merges.size();
  base_size_ = base_size == 0 ? used : base_size;
  if (base_size_ < used) {
    throw ConfigError("tokenizer: base_size " + std::to_string(base_size_) + " is smaller than 256 + " +
                      std::to_string(merges.size()) + " merges");
  }
  if (base_size_ + kNumSpecialTokens > static_cast<std::size_t>(INT32_MAX)) throw ConfigError("tokenizer: vocabulary too large");

  std::map<std::string, TokenId> by_bytes;
  vocab_.reserve(used);
  for (int b = 0; b < 256; ++b) {
    vocab_.emplace_back(1, static_cast<char>(b));
    by_bytes.emplace(vocab_.back(), b);
  }
  for (std::size_t r = 0; r < merges.size(); ++r) {
    const auto& [left, right] = merges[r];
    auto l = by_bytes.find(left), rr = by_bytes.find(right);
    const std::string where = "tokenizer merge " + std::to_string(r);
    if (l == by_bytes.end() || rr == by_bytes.end()) throw DataError(where + ": side is not an earlier token");
    const TokenId id = static_cast<TokenId>(256 + r);
    if (!by_bytes.emplace(left + right, id).second) throw DataError(where + ": duplicate token '" + left + right + "'");
    if (!ranks_.emplace(pair_key(l->second, rr->second), std::pair{static_cast<std::uint32_t>(r), id}).second) {
      throw DataError(where + ": duplicate pair");
    }
    vocab_.push_back(left + right);
  }
  for (std::size_t i = 0; i < kNumSpecialTokens; ++i) special_names_.push_back(special_token_name(i));
}

void Tokenizer::encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const {
  std::vector<TokenId> parts;
  parts.reserve(chunk.size());
  for (unsigned char c : chunk) parts.push_back(c);
  while (parts.size() > 1) {
    std::uint32_t best = UINT32_MAX;
    TokenId merged = -1;
    TokenId left = 0, right = 0;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      auto it = ranks_.find(pair_key(parts[i], parts[i + 1]));
      if (it != ranks_.end() && it->second.first < best) {
        best = it->second.first;
        merged = it->second.second;
        left = parts[i];
        right = parts[i + 1];
      }
    }
    if (merged < 0) break;
    std::size_t w = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (i + 1 < parts.size() && parts[i] == left && parts[i + 1] == right) {
        parts[w++] = merged;
        ++i;
      } else {
        parts[w++] = parts[i];
      }
    }
    parts.resize(w);
  }
  out.insert(out.end(), parts.begin(), parts.end());
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> out;
  for (auto chunk : pretokenize(text)) encode_chunk(chunk, out);
  return out;
}

std::string Tokenizer::decode(std::span<const TokenId> ids, SpecialPolicy policy) const {
  std::string out;
  for (TokenId id : ids) {
    if (is_special(id)) {
      if (policy == SpecialPolicy::reject) throw DataError("decode: special token id " + std::to_string(id));
      if (policy == SpecialPolicy::render) out += special_names_[static_cast<std::size_t>(id) - base_size_];
      continue;
    }
    out += token_bytes(id);
  }
  return out;
}

const std::string& Tokenizer::token_bytes(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
    throw DataError("tokenizer: unknown token id " + std::to_string(id));
  }
  return vocab_[static_cast<std::size_t>(id)];
}

TokenId Tokenizer::special(std::string_view name) const {
  for (std::size_t i = 0; i < special_names_.size(); ++i)
    if (special_names_[i] == name) return static_cast<TokenId>(base_size_ + i);
  throw DataError("tokenizer: no special token '" + std::string(name) + "'");
}

bool Tokenizer::is_special(TokenId id) const noexcept {
  return id >= 0 && static_cast<std::size_t>(id) >= base_size_ && static_cast<std::size_t>(id) < vocab_size();
}

std::optional<std::string_view> Tokenizer::special_name(TokenId id) const {
  if (!is_special(id)) return std::nullopt;
  return special_names_[static_cast<std::size_t>(id) - base_size_];
}

Tokenizer Tokenizer::train(std::span<const std::string> corpus, std::size_t num_merges, std::size_t base_size) {
  std::map<std::string, std::size_t> chunk_counts;
  for (const auto& doc : corpus)
    for (auto chunk : pretokenize(doc)) ++chunk_counts[std::string(chunk)];

  struct Word {
    std::vector<TokenId> parts;
    std::size_t count;
  };
  std::vector<Word> words;
  for (const auto& [chunk, count] : chunk_counts) {
    Word w{{}, count};
    for (unsigned char c : chunk) w.parts.push_back(c);
    words.push_back(std::move(w));
  }
  std::vector<std::string> vocab;
  std::map<std::string, TokenId> known;
  for (int b = 0; b < 256; ++b) {
    vocab.emplace_back(1, static_cast<char>(b));
    known.emplace(vocab.back(), b);
  }
  std::vector<Merge> merges;
  while (merges.size() < num_merges) {
    std::map<std::pair<TokenId, TokenId>, std::size_t> counts;
    for (const auto& w : words)
      for (std::size_t i = 0; i + 1 < w.parts.size(); ++i) counts[{w.parts[i], w.parts[i + 1]}] += w.count;
    const std::pair<TokenId, TokenId>* best = nullptr;
    std::size_t best_count = 0;
    for (const auto& [pair, count] : counts) {
      if (known.contains(vocab[pair.first] + vocab[pair.second])) continue;
      if (!best || count > best_count ||
          (count == best_count && std::tie(vocab[pair.first], vocab[pair.second]) <
                                      std::tie(vocab[best->first], vocab[best->second]))) {
        best = &pair;
        best_count = count;
      }
    }
    if (!best) break;
    const auto [a, b] = *best;
    const TokenId id = static_cast<TokenId>(vocab.size());
    merges.emplace_back(vocab[a], vocab[b]);
    vocab.push_back(vocab[a] + vocab[b]);
    known.emplace(vocab.back(), id);
    for (auto& w : words) {
      std::size_t out = 0;
      for (std::size_t i = 0; i < w.parts.size(); ++i) {
        if (i + 1 < w.parts.size() && w.parts[i] == a && w.parts[i + 1] == b) {
          w.parts[out++] = id;
          ++i;
        } else {
          w.parts[out++] = w.parts[i];
        }
      }
      w.parts.resize(out);
    }
  }
  return Tokenizer(merges, base_size);
}

// File layout (one record per line):
//   forge-tokenizer 1
//   base_size <n>
//   vocab <k>            followed by k lines "<id> <hex bytes>" for ids 0..k-1
//   merges <m>           followed by m lines "<hex left> <hex right>" in rank order
//   specials <c>         followed by c lines "<id> <name>"
void Tokenizer::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("tokenizer: cannot write '" + path.string() + "'");
  out << kFileMagic << "\nbase_size " << base_size_ << "\nvocab " << vocab_.size() << '\n';
  for (std::size_t i = 0; i < vocab_.size(); ++i) out << i << ' ' << to_hex(vocab_[i]) << '\n';
  out << "merges " << merges_.size() << '\n';
  for (const auto& [l, r] : merges_) out << to_hex(l) << ' ' << to_hex(r) << '\n';
  out << "specials " << special_names_.size() << '\n';
  for (std::size_t i = 0; i < special_names_.size(); ++i) out << base_size_ + i << ' ' << special_names_[i] << '\n';
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  const std::string where = "tokenizer '" + path.string() + "'";
  std::ifstream in(path);
  if (!in) throw DataError(where + ": cannot open");
  std::string line;
  auto next = [&]() -> std::string {
    if (!std::getline(in, line)) throw DataError(where + ": unexpected end of file");
    return line;
  };
  auto header = [&](const std::string& key) -> std::size_t {
    std::istringstream is(next());
    std::string k;
    std::size_t v = 0;
    if (!(is >> k >> v) || k != key) throw DataError(where + ": expected '" + key + " <count>'");
    return v;
  };
  if (next() != kFileMagic) throw DataError(where + ": bad header");
  const std::size_t base = header("base_size");
  const std::size_t nvocab = header("vocab");
  std::vector<std::string> vocab;
  for (std::size_t i = 0; i < nvocab; ++i) {
    std::istringstream is(next());
    std::size_t id = 0;
    std::string hex;
    if (!(is >> id >> hex) || id != i) throw DataError(where + ": bad vocab line " + std::to_string(i));
    vocab.push_back(from_hex(hex, where));
  }
  const std::size_t nmerges = header("merges");
  std::vector<Merge> merges;
  for (std::size_t i = 0; i < nmerges; ++i) {
    std::istringstream is(next());
    std::string l, r;
    if (!(is >> l >> r)) throw DataError(where + ": bad merge line " + std::to_string(i));
    merges.emplace_back(from_hex(l, where), from_hex(r, where));
  }
  const std::size_t nspecial = header("specials");
  if (nspecial != kNumSpecialTokens) throw DataError(where + ": expected " + std::to_string(kNumSpecialTokens) + " specials");
  Tokenizer tok(merges, base);
  for (std::size_t i = 0; i < nspecial; ++i) {
    std::istringstream is(next());
    std::size_t id = 0;
    std::string name;
    if (!(is >> id >> name) || id != base + i || name != tok.special_names_[i]) {
      throw DataError(where + ": special token table does not match line " + std::to_string(i));
    }
  }
  if (vocab != tok.vocab_) throw DataError(where + ": vocabulary does not match merge table");
  return tok;
}

std::size_t utf8_length(std::string_view text) {
  std::size_t n = 0;
  for (unsigned char c : text) n += (c & 0xC0) != 0x80;
  return n;
}

std::size_t count_words(std::string_view text) {
  std::size_t n = 0;
  bool in_word = false;
  for (unsigned char c : text) {
    const bool space = is_space(c);
    if (!space && !in_word) ++n;
    in_word = !space;
  }
  return n;
}

TokenStats token_stats(std::size_t tokens, std::string_view text) {
  TokenStats s;
  s.tokens = tokens;
  s.chars = utf8_length(text);
  s.words = count_words(text);
  if (tokens > 0) s.cpt = static_cast<double>(s.chars) / static_cast<double>(tokens);
  if (s.words > 0) s.tpw = static_cast<double>(tokens) / static_cast<double>(s.words);
  return s;
}

TokenStats token_stats(const Tokenizer& tok, std::string_view text) { return token_stats(tok.encode(text).size(), text); }

}  // namespace forge
