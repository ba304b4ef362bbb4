#include "forge/scrub.hpp"

#include <array>
#include <unordered_set>

namespace forge {

namespace {

bool digit(char c) { return c >= '0' && c <= '9'; }
bool alpha(char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); }
bool alnum(char c) { return digit(c) || alpha(c); }
bool local_char(char c) { return alnum(c) || c == '.' || c == '_' || c == '%' || c == '+' || c == '-'; }
bool label_char(char c) { return alnum(c) || c == '-'; }
bool phone_sep(char c) { return c == ' ' || c == '-'; }

bool url_char(char c) {
  if (alnum(c) || static_cast<unsigned char>(c) >= 0x80) return true;
  static constexpr std::string_view extra = "-._~:/?#@!$&()*+,;=%";
  return extra.find(c) != std::string_view::npos;
}

char lower(char c) { return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c; }

bool starts_with_ci(std::string_view t, std::size_t i, std::string_view prefix) {
  if (t.size() - i < prefix.size()) return false;
  for (std::size_t k = 0; k < prefix.size(); ++k)
    if (lower(t[i + k]) != prefix[k]) return false;
  return true;
}

std::size_t match_pesel(std::string_view t, std::size_t i) {
  if (i > 0 && digit(t[i - 1])) return 0;
  if (t.size() - i < 11) return 0;
  for (std::size_t k = 0; k < 11; ++k)
    if (!digit(t[i + k])) return 0;
  if (i + 11 < t.size() && digit(t[i + 11])) return 0;
  return pesel_valid(t.substr(i, 11)) ? 11 : 0;
}

// Length of a digit-group pattern such as {3,3,3} starting at p, groups split by one
// separator (or none at all when contiguous), or 0.
std::size_t match_groups(std::string_view t, std::size_t p, std::initializer_list<std::size_t> groups, bool contiguous) {
  std::size_t q = p;
  bool first = true;
  for (std::size_t g : groups) {
    if (!first) {
      if (contiguous) {
      } else if (q < t.size() && phone_sep(t[q])) {
        ++q;
      } else {
        return 0;
      }
    }
    first = false;
    for (std::size_t k = 0; k < g; ++k, ++q)
      if (q >= t.size() || !digit(t[q])) return 0;
  }
  if (q < t.size() && digit(t[q])) return 0;
  return q - p;
}

std::size_t match_national(std::string_view t, std::size_t p) {
  return std::max({match_groups(t, p, {3, 3, 3}, false), match_groups(t, p, {2, 3, 2, 2}, false),
                   match_groups(t, p, {9}, true)});
}

std::size_t match_phone(std::string_view t, std::size_t i) {
  if (i > 0 && (alnum(t[i - 1]) || t[i - 1] == '+')) return 0;
  std::size_t best = 0;
  auto with_prefix = [&](std::string_view prefix) {
    if (t.compare(i, prefix.size(), prefix) != 0) return;
    std::size_t p = i + prefix.size();
    if (p < t.size() && phone_sep(t[p])) {
      if (const auto n = match_national(t, p + 1)) best = std::max(best, p + 1 + n - i);
    }
    if (const auto n = match_national(t, p)) best = std::max(best, p + n - i);
  };
  with_prefix("(+48)");
  with_prefix("0048");
  if (t[i] == '+') {
    std::size_t q = i + 1, digits = 0;
    while (q < t.size()) {
      if (digit(t[q])) {
        ++digits;
        ++q;
      } else if (phone_sep(t[q]) && q + 1 < t.size() && digit(t[q + 1]) && digit(t[q - 1])) {
        ++q;
      } else {
        break;
      }
    }
    if (digits >= 8 && digits <= 15) best = std::max(best, q - i);
  }
  if (digit(t[i])) best = std::max(best, match_national(t, i));
  return best;
}

std::size_t match_email(std::string_view t, std::size_t i) {
  if (i > 0 && local_char(t[i - 1])) return 0;
  std::size_t j = i;
  while (j < t.size() && local_char(t[j])) ++j;
  if (j == i || j >= t.size() || t[j] != '@') return 0;
  std::size_t q = j + 1, labels = 0, best = 0;
  while (true) {
    const std::size_t start = q;
    bool letters_only = true;
    while (q < t.size() && label_char(t[q])) letters_only &= alpha(t[q++]);
    if (q == start) break;
    ++labels;
    if (labels >= 2 && letters_only && q - start >= 2) best = q;
    if (q + 1 < t.size() && t[q] == '.' && label_char(t[q + 1])) {
      ++q;
    } else {
      break;
    }
  }
  return best ? best - i : 0;
}

std::size_t match_url(std::string_view t, std::size_t i) {
  if (i > 0 && (alnum(t[i - 1]) || t[i - 1] == '.' || t[i - 1] == '/' || t[i - 1] == '@')) return 0;
  std::size_t body = 0;
  for (std::string_view prefix : {"https://", "http://", "www."}) {
    if (starts_with_ci(t, i, prefix)) {
      body = i + prefix.size();
      break;
    }
  }
  if (body == 0) return 0;
  std::size_t j = body;
  while (j < t.size() && url_char(t[j])) ++j;
  // Trim punctuation that usually belongs to the surrounding sentence.
  auto opens = [&](std::size_t end) {
    long depth = 0;
    for (std::size_t k = body; k < end; ++k) depth += t[k] == '(' ? 1 : t[k] == ')' ? -1 : 0;
    return depth;
  };
  while (j > body) {
    const char c = t[j - 1];
    if (c == '.' || c == ',' || c == ';' || c == ':' || c == '!' || c == '?' || c == '\'') {
      --j;
    } else if (c == ')' && opens(j) < 0) {
      --j;
    } else {
      break;
    }
  }
  if (j == body || !alnum(t[body])) return 0;
  return j - i;
}

}  // namespace

std::string_view placeholder(PiiKind kind) {
  switch (kind) {
    case PiiKind::pesel: return "[PESEL]";
    case PiiKind::phone: return "[PHONE]";
    case PiiKind::email: return "[EMAIL]";
    case PiiKind::url: return "[URL]";
  }
  return "";
}

std::string_view pii_name(PiiKind kind) {
  switch (kind) {
    case PiiKind::pesel: return "pesel";
    case PiiKind::phone: return "phone";
    case PiiKind::email: return "email";
    case PiiKind::url: return "url";
  }
  return "";
}

std::size_t& ScrubReport::operator[](PiiKind k) {
  switch (k) {
    case PiiKind::pesel: return pesel;
    case PiiKind::phone: return phone;
    case PiiKind::email: return email;
    case PiiKind::url: break;
  }
  return url;
}

ScrubReport& ScrubReport::operator+=(const ScrubReport& o) {
  pesel += o.pesel;
  phone += o.phone;
  email += o.email;
  url += o.url;
  return *this;
}

bool pesel_valid(std::string_view d) {
  if (d.size() != 11) return false;
  for (char c : d)
    if (!digit(c)) return false;
  static constexpr std::array<int, 10> weights{1, 3, 7, 9, 1, 3, 7, 9, 1, 3};
  int sum = 0;
  for (std::size_t k = 0; k < 10; ++k) sum += weights[k] * (d[k] - '0');
  return (10 - sum % 10) % 10 == d[10] - '0';
}

namespace {

ScrubResult scrub_pass(std::string_view text) {
  ScrubResult r;
  r.text.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    const std::array<std::pair<PiiKind, std::size_t>, 4> candidates{{
        {PiiKind::pesel, match_pesel(text, i)},
        {PiiKind::phone, match_phone(text, i)},
        {PiiKind::email, match_email(text, i)},
        {PiiKind::url, match_url(text, i)},
    }};
    auto best = candidates[0];
    for (const auto& c : candidates)
      if (c.second > best.second) best = c;
    if (best.second == 0) {
      r.text.push_back(text[i++]);
      continue;
    }
    r.text += placeholder(best.first);
    ++r.report[best.first];
    i += best.second;
  }
  return r;
}

}  // namespace

// A replacement can expose a new boundary (a placeholder's ']' no longer blocks what
// follows), so passes repeat until nothing matches. Matches never contain placeholder
// characters, so every pass that changes the text removes original characters.
ScrubResult scrub(std::string_view text) {
  ScrubResult r = scrub_pass(text);
  for (std::size_t found = r.report.total(); found > 0;) {
    ScrubResult next = scrub_pass(r.text);
    found = next.report.total();
    r.text = std::move(next.text);
    r.report += next.report;
  }
  return r;
}

std::vector<std::string> filter_long_docs(const std::vector<std::string>& docs, const Tokenizer& tok,
                                          std::size_t min_tokens) {
  std::vector<std::string> kept;
  for (const auto& d : docs)
    if (tok.encode(d).size() > min_tokens) kept.push_back(d);
  return kept;
}

std::vector<std::string> dedup_exact(const std::vector<std::string>& docs) {
  std::unordered_set<std::string_view> seen;
  std::vector<std::string> out;
  for (const auto& d : docs)
    if (seen.insert(d).second) out.push_back(d);
  return out;
}

}  // namespace forge
