#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "forge/tokenizer.hpp"

namespace forge {

enum class PiiKind { pesel, phone, email, url };

std::string_view placeholder(PiiKind kind);
std::string_view pii_name(PiiKind kind);

struct ScrubReport {
  std::size_t pesel = 0;
  std::size_t phone = 0;
  std::size_t email = 0;
  std::size_t url = 0;

  std::size_t total() const { return pesel + phone + email + url; }
  std::size_t& operator[](PiiKind k);
  ScrubReport& operator+=(const ScrubReport& o);
  friend bool operator==(const ScrubReport&, const ScrubReport&) = default;
};

struct ScrubResult {
  std::string text;
  ScrubReport report;
};

/// 11 ASCII digits whose control digit matches weights 1,3,7,9,1,3,7,9,1,3.
bool pesel_valid(std::string_view digits);

/// Replaces PESEL numbers, phone numbers, e-mail addresses and URLs with
/// "[PESEL]", "[PHONE]", "[EMAIL]", "[URL]". Scanning is left to right; at each
/// position the longest candidate across all categories wins. Passes repeat until
/// the text has no further match, so scrub(scrub(x)) == scrub(x).
///
/// Recognised forms:
///   PESEL  exactly 11 digits, not adjacent to other digits, valid checksum
///   phone  Polish national: 9 digits as 3-3-3 or 2-3-2-2 groups split by single
///          spaces or hyphens, or 9 contiguous digits; optional +48 / 0048 / (+48)
///          prefix. International: + followed by 8-15 digits, optionally split
///          into groups by single spaces or hyphens
///   email  local@domain.tld with an alphabetic TLD of two or more letters
///   URL    http:// or https:// or a www. prefix, up to the first character outside
///          the URL character set, trailing sentence punctuation trimmed
ScrubResult scrub(std::string_view text);

/// Keeps documents with strictly more than min_tokens tokens.
std::vector<std::string> filter_long_docs(const std::vector<std::string>& docs, const Tokenizer& tok,
                                          std::size_t min_tokens);

/// Drops exact duplicates, keeping the first occurrence; order preserved.
std::vector<std::string> dedup_exact(const std::vector<std::string>& docs);

}  // namespace forge
