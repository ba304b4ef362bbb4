#include "forge/verifiers.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>

namespace forge {

namespace {

constexpr std::string_view kBoxed = "\\boxed";
constexpr std::string_view kFence = "```tool_calls";

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

// Index of the brace closing the one at `open`, skipping \{ and \}; npos when unbalanced.
std::size_t matching_brace(std::string_view s, std::size_t open) {
  int depth = 0;
  for (std::size_t i = open; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size() && (s[i + 1] == '{' || s[i + 1] == '}')) {
      ++i;
      continue;
    }
    if (s[i] == '{') ++depth;
    else if (s[i] == '}' && --depth == 0) return i;
  }
  return std::string_view::npos;
}

// Position of the '{' that opens a \boxed at or after `from`, or npos.
std::size_t next_box(std::string_view s, std::size_t from, std::size_t* macro = nullptr) {
  for (std::size_t at = s.find(kBoxed, from); at != std::string_view::npos; at = s.find(kBoxed, at + 1)) {
    std::size_t i = at + kBoxed.size();
    while (i < s.size() && s[i] == ' ') ++i;
    if (i < s.size() && s[i] == '{') {
      if (macro) *macro = at;
      return i;
    }
  }
  return std::string_view::npos;
}

bool is_word_byte(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  for (std::size_t at = s.find(from); at != std::string::npos; at = s.find(from, at + to.size())) {
    s.replace(at, from.size(), to);
  }
}

std::string trim_decimal_zeros(const std::string& s) {
  std::string out;
  std::size_t i = 0;
  while (i < s.size()) {
    if (!std::isdigit(static_cast<unsigned char>(s[i])) && s[i] != '.') {
      out += s[i++];
      continue;
    }
    std::size_t j = i;
    while (j < s.size() && (std::isdigit(static_cast<unsigned char>(s[j])) || s[j] == '.')) ++j;
    std::string tok = s.substr(i, j - i);
    const auto dot = tok.find('.');
    if (dot != std::string::npos && tok.find('.', dot + 1) == std::string::npos && dot + 1 < tok.size()) {
      while (tok.back() == '0') tok.pop_back();
      if (tok.back() == '.') tok.pop_back();
      if (tok.empty()) tok = "0";
    }
    out += tok;
    i = j;
  }
  return out;
}

using i128 = __int128;
constexpr long long kLimit = 1'000'000'000'000'000'000LL;

std::optional<Rational> make_rational(i128 num, i128 den) {
  if (den == 0) return std::nullopt;
  if (den < 0) num = -num, den = -den;
  i128 a = num < 0 ? -num : num, b = den;
  while (b != 0) {
    const i128 t = a % b;
    a = b;
    b = t;
  }
  const i128 g = a == 0 ? den : a;
  num /= g;
  den /= g;
  if (num > kLimit || num < -kLimit || den > kLimit) return std::nullopt;
  return Rational{static_cast<long long>(num), static_cast<long long>(den)};
}

// [sign] digits [. digits] | [sign] . digits
std::optional<Rational> parse_decimal(std::string_view s) {
  bool neg = false;
  if (!s.empty() && (s[0] == '-' || s[0] == '+')) {
    neg = s[0] == '-';
    s.remove_prefix(1);
  }
  if (s.empty()) return std::nullopt;
  i128 num = 0, den = 1;
  bool seen_dot = false, seen_digit = false;
  int digits = 0;
  for (char c : s) {
    if (c == '.') {
      if (seen_dot) return std::nullopt;
      seen_dot = true;
    } else if (std::isdigit(static_cast<unsigned char>(c))) {
      if (++digits > 18) return std::nullopt;
      seen_digit = true;
      num = num * 10 + (c - '0');
      if (seen_dot) den *= 10;
    } else {
      return std::nullopt;
    }
  }
  if (!seen_digit) return std::nullopt;
  return make_rational(neg ? -num : num, den);
}

std::optional<Rational> divide(const Rational& a, const Rational& b) {
  return make_rational(static_cast<i128>(a.num) * b.den, static_cast<i128>(a.den) * b.num);
}

std::vector<ToolCall> calls_from_json(const json& arr, const std::string& where) {
  if (!arr.is_array()) throw DataError(where + ": tool calls must be an array");
  std::vector<ToolCall> out;
  for (const auto& c : arr) {
    if (!c.is_object() || !c.contains("name") || !c.at("name").is_string() || c.at("name").get<std::string>().empty()) {
      throw DataError(where + ": each tool call needs a non-empty string name");
    }
    for (const auto& [k, _] : c.items()) {
      if (k != "name" && k != "arguments") throw DataError(where + ": unexpected tool call field '" + k + "'");
    }
    ToolCall call{c.at("name").get<std::string>(), json::object()};
    if (c.contains("arguments")) {
      if (!c.at("arguments").is_object()) throw DataError(where + ": tool call arguments must be an object");
      call.arguments = c.at("arguments");
    }
    out.push_back(std::move(call));
  }
  return out;
}

std::optional<Rational> numeric_value(const json& j) {
  if (j.is_number()) return parse_rational(j.dump());
  if (!j.is_string()) return std::nullopt;
  const auto& s = j.get_ref<const std::string&>();
  if (s.empty() || trim(s).size() != s.size()) return std::nullopt;
  return parse_rational(s);
}

std::optional<double> float_value(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (!j.is_string()) return std::nullopt;
  const auto s = j.get<std::string>();
  if (s.empty() || std::isspace(static_cast<unsigned char>(s[0]))) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

bool same_call(const ToolCall& a, const ToolCall& b) {
  return a.name == b.name && tool_values_equal(a.arguments, b.arguments);
}

}  // namespace

std::string extract_boxed(std::string_view text) {
  std::optional<std::string_view> last;
  std::size_t from = 0;
  for (std::size_t open = next_box(text, from); open != std::string_view::npos; open = next_box(text, from)) {
    const auto close = matching_brace(text, open);
    if (close == std::string_view::npos) {
      throw ExtractError("unbalanced", "\\boxed opened at byte " + std::to_string(open) + " is never closed");
    }
    last = text.substr(open + 1, close - open - 1);
    from = close + 1;
  }
  if (!last) throw ExtractError("no_boxed", "no \\boxed{...} in response");
  return std::string(trim(*last));
}

std::optional<Rational> parse_rational(std::string_view s) {
  s = trim(s);
  bool neg = false;
  std::string_view body = s;
  if (!body.empty() && (body[0] == '-' || body[0] == '+')) {
    neg = body[0] == '-';
    body.remove_prefix(1);
  }
  auto sign = [&](std::optional<Rational> r) -> std::optional<Rational> {
    if (r && neg) r->num = -r->num;
    return r;
  };
  if (body.starts_with("\\frac{")) {
    const std::size_t a_open = 5;
    const auto a_close = matching_brace(body, a_open);
    if (a_close == std::string_view::npos || a_close + 1 >= body.size() || body[a_close + 1] != '{') return std::nullopt;
    const auto b_close = matching_brace(body, a_close + 1);
    if (b_close != body.size() - 1) return std::nullopt;
    const auto a = parse_decimal(body.substr(a_open + 1, a_close - a_open - 1));
    const auto b = parse_decimal(body.substr(a_close + 2, b_close - a_close - 2));
    if (!a || !b) return std::nullopt;
    return sign(divide(*a, *b));
  }
  if (const auto slash = body.find('/'); slash != std::string_view::npos) {
    const auto a = parse_decimal(body.substr(0, slash));
    const auto b = parse_decimal(body.substr(slash + 1));
    if (!a || !b || body.substr(0, slash).starts_with('-') || body.substr(0, slash).starts_with('+')) return std::nullopt;
    return sign(divide(*a, *b));
  }
  if (body.starts_with('-') || body.starts_with('+')) return std::nullopt;
  return sign(parse_decimal(body));
}

std::string canonical_math(std::string_view s) {
  std::string out;
  for (char c : s)
    if (!std::isspace(static_cast<unsigned char>(c))) out += c;
  replace_all(out, "\\dfrac", "\\frac");
  replace_all(out, "\\tfrac", "\\frac");
  for (std::string_view spacing : {"\\,", "\\;", "\\!"}) replace_all(out, spacing, "");
  for (bool changed = true; changed;) {
    changed = false;
    if (out.size() >= 2 && out.front() == '$' && out.back() == '$') {
      out = out.substr(1, out.size() - 2);
      changed = true;
    }
    std::size_t macro = 0;
    const auto open = next_box(out, 0, &macro);
    if (open != std::string::npos && macro == 0 && matching_brace(out, open) == out.size() - 1) {
      out = out.substr(open + 1, out.size() - open - 2);
      changed = true;
    } else if (!out.empty() && out.front() == '{' && matching_brace(out, 0) == out.size() - 1) {
      out = out.substr(1, out.size() - 2);
      changed = true;
    }
  }
  if (!out.empty() && out.front() == '+') out.erase(0, 1);
  return trim_decimal_zeros(out);
}

Verdict math_verify(std::string_view response, std::string_view truth) {
  std::string answer;
  try {
    answer = extract_boxed(response);
  } catch (const ExtractError& e) {
    return {0.0, e.reason()};
  }
  const auto a = canonical_math(answer), t = canonical_math(truth);
  if (a == t) return {1.0, "ok"};
  const auto ra = parse_rational(a), rt = parse_rational(t);
  if (ra && rt && *ra == *rt) return {1.0, "ok"};
  return {0.0, "mismatch"};
}

Verdict mcq_verify(std::string_view response, std::string_view correct, std::span<const std::string> labels) {
  if (labels.empty()) throw DataError("mcq: empty label set");
  std::set<std::string_view> distinct;
  for (const auto& l : labels) {
    if (l.empty() || std::any_of(l.begin(), l.end(), [](unsigned char c) { return std::isspace(c); })) {
      throw DataError("mcq: labels must be non-empty single tokens");
    }
    if (!distinct.insert(l).second) throw DataError("mcq: duplicate label '" + l + "'");
  }
  if (!distinct.contains(correct)) throw DataError("mcq: correct label '" + std::string(correct) + "' not among labels");

  // Final non-empty line.
  std::string_view line;
  for (std::size_t end = response.size(); end > 0;) {
    const auto nl = response.rfind('\n', end - 1);
    const std::size_t begin = nl == std::string_view::npos ? 0 : nl + 1;
    const auto cand = trim(response.substr(begin, end - begin));
    if (!cand.empty()) {
      line = cand;
      break;
    }
    if (nl == std::string_view::npos) break;
    end = nl;
  }

  auto labels_in = [&](std::string_view span) {
    std::set<std::string_view> found;
    for (const auto& l : labels) {
      for (auto at = span.find(l); at != std::string_view::npos; at = span.find(l, at + 1)) {
        const bool left = at == 0 || !is_word_byte(static_cast<unsigned char>(span[at - 1]));
        const std::size_t end = at + l.size();
        const bool right = end == span.size() || !is_word_byte(static_cast<unsigned char>(span[end]));
        if (left && right) {
          found.insert(l);
          break;
        }
      }
    }
    return found;
  };

  // Sentences end at . ! ? followed by whitespace or the end of the line.
  std::vector<std::string_view> sentences;
  std::size_t begin = 0;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if ((c == '.' || c == '!' || c == '?') &&
        (i + 1 == line.size() || std::isspace(static_cast<unsigned char>(line[i + 1])))) {
      sentences.push_back(line.substr(begin, i + 1 - begin));
      begin = i + 1;
    }
  }
  if (begin < line.size()) sentences.push_back(line.substr(begin));

  for (auto it = sentences.rbegin(); it != sentences.rend(); ++it) {
    const auto found = labels_in(*it);
    if (found.empty()) continue;
    if (found.size() > 1) return {0.0, "ambiguous"};
    return *found.begin() == correct ? Verdict{1.0, "ok"} : Verdict{0.0, "wrong_label"};
  }
  return {0.0, "no_choice"};
}

std::vector<ToolCall> parse_tool_calls(std::string_view response) {
  const auto at = response.rfind(kFence);
  if (at == std::string_view::npos) throw ExtractError("no_tool_calls", "no ```tool_calls block in response");
  const auto body_begin = at + kFence.size();
  const auto close = response.find("```", body_begin);
  if (close == std::string_view::npos) throw ExtractError("parse_error", "```tool_calls block is not closed");
  const auto parsed = json::parse(response.substr(body_begin, close - body_begin), nullptr, false);
  if (parsed.is_discarded()) throw ExtractError("parse_error", "tool_calls block is not valid JSON");
  try {
    return calls_from_json(parsed, "tool_calls");
  } catch (const ExtractError&) {
    throw;
  } catch (const DataError& e) {
    throw ExtractError("parse_error", e.what());
  }
}

bool tool_values_equal(const json& a, const json& b) {
  if (a.is_boolean() || b.is_boolean() || a.is_null() || b.is_null()) return a == b;
  const bool a_num = numeric_value(a) || float_value(a), b_num = numeric_value(b) || float_value(b);
  if (a_num && b_num) {
    const auto ra = numeric_value(a), rb = numeric_value(b);
    if (ra && rb) return *ra == *rb;
    return *float_value(a) == *float_value(b);
  }
  if (a.is_string() && b.is_string()) return a.get<std::string>() == b.get<std::string>();
  if (a.is_array() && b.is_array()) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!tool_values_equal(a[i], b[i])) return false;
    return true;
  }
  if (a.is_object() && b.is_object()) {
    if (a.size() != b.size()) return false;
    for (const auto& [k, v] : a.items()) {
      if (!b.contains(k) || !tool_values_equal(v, b.at(k))) return false;
    }
    return true;
  }
  return false;
}

Verdict toolcall_verify(std::span<const ToolCall> response, std::span<const ToolCall> expected, bool order_sensitive) {
  if (expected.empty()) throw DataError("tool verifier: expected call list is empty");
  if (response.size() != expected.size()) return {0.0, "count_mismatch"};
  if (order_sensitive) {
    for (std::size_t i = 0; i < expected.size(); ++i) {
      if (response[i].name != expected[i].name) return {0.0, "name_mismatch"};
      if (!tool_values_equal(response[i].arguments, expected[i].arguments)) return {0.0, "arg_mismatch"};
    }
    return {1.0, "ok"};
  }
  std::vector<bool> used(response.size(), false);
  bool all = true;
  for (const auto& e : expected) {
    bool hit = false;
    for (std::size_t i = 0; i < response.size() && !hit; ++i) {
      if (!used[i] && same_call(response[i], e)) used[i] = hit = true;
    }
    all = all && hit;
  }
  if (all) return {1.0, "ok"};
  std::multiset<std::string> rn, en;
  for (const auto& c : response) rn.insert(c.name);
  for (const auto& c : expected) en.insert(c.name);
  return {0.0, rn == en ? "arg_mismatch" : "name_mismatch"};
}

Verdict toolcall_verify(std::string_view response, std::span<const ToolCall> expected, bool order_sensitive) {
  std::vector<ToolCall> calls;
  try {
    calls = parse_tool_calls(response);
  } catch (const ExtractError& e) {
    return {0.0, e.reason()};
  }
  return toolcall_verify(std::span<const ToolCall>(calls), expected, order_sensitive);
}

std::string_view verifier_name(VerifierKind k) {
  switch (k) {
    case VerifierKind::math: return "math";
    case VerifierKind::mcq: return "mcq";
    case VerifierKind::tool: return "tool";
  }
  return "?";
}

VerifierKind parse_verifier_kind(std::string_view name) {
  if (name == "math") return VerifierKind::math;
  if (name == "mcq") return VerifierKind::mcq;
  if (name == "tool") return VerifierKind::tool;
  throw DataError("unknown verifier kind '" + std::string(name) + "' (expected math, mcq or tool)");
}

Verdict verify(VerifierKind kind, std::string_view response, const json& truth, const std::string& where) {
  switch (kind) {
    case VerifierKind::math: {
      if (truth.is_string()) return math_verify(response, truth.get<std::string>());
      if (truth.is_number()) return math_verify(response, truth.dump());
      throw DataError(where + ": math truth must be a string or number");
    }
    case VerifierKind::mcq: {
      static const std::vector<std::string> kDefault{"A", "B", "C", "D"};
      if (truth.is_string()) return mcq_verify(response, truth.get<std::string>(), kDefault);
      if (truth.is_object() && truth.contains("answer") && truth.at("answer").is_string()) {
        std::vector<std::string> labels = kDefault;
        if (truth.contains("labels")) {
          if (!truth.at("labels").is_array()) throw DataError(where + ": mcq labels must be an array");
          labels.clear();
          for (const auto& l : truth.at("labels")) {
            if (!l.is_string()) throw DataError(where + ": mcq labels must be strings");
            labels.push_back(l.get<std::string>());
          }
        }
        try {
          return mcq_verify(response, truth.at("answer").get<std::string>(), labels);
        } catch (const DataError& e) {
          throw DataError(where + ": " + e.what());
        }
      }
      throw DataError(where + ": mcq truth must be a label or {answer, labels}");
    }
    case VerifierKind::tool: {
      bool ordered = false;
      const json* calls = &truth;
      if (truth.is_object()) {
        if (!truth.contains("calls")) throw DataError(where + ": tool truth object needs 'calls'");
        calls = &truth.at("calls");
        if (truth.contains("order_sensitive")) {
          if (!truth.at("order_sensitive").is_boolean()) throw DataError(where + ": order_sensitive must be a boolean");
          ordered = truth.at("order_sensitive").get<bool>();
        }
      }
      const auto expected = calls_from_json(*calls, where);
      if (expected.empty()) throw DataError(where + ": expected call list is empty");
      return toolcall_verify(response, std::span<const ToolCall>(expected), ordered);
    }
  }
  throw DataError(where + ": unknown verifier");
}

std::vector<VerifierCase> read_verifier_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open verifier corpus " + path.string());
  std::vector<VerifierCase> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (trim(line).empty()) continue;
    const std::string where = path.filename().string() + ":" + std::to_string(n);
    const auto j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw DataError(where + ": not a JSON object");
    for (const char* k : {"kind", "response", "truth", "expected_reward"}) {
      if (!j.contains(k)) throw DataError(where + ": missing field '" + k + "'");
    }
    if (!j.at("kind").is_string() || !j.at("response").is_string() || !j.at("expected_reward").is_number()) {
      throw DataError(where + ": kind/response must be strings and expected_reward a number");
    }
    VerifierCase c;
    c.kind = parse_verifier_kind(j.at("kind").get<std::string>());
    c.response = j.at("response").get<std::string>();
    c.truth = j.at("truth");
    c.expected_reward = j.at("expected_reward").get<double>();
    if (j.contains("expected_reason")) c.expected_reason = j.at("expected_reason").get<std::string>();
    c.line = n;
    out.push_back(std::move(c));
  }
  return out;
}

std::size_t CorpusScore::cases() const {
  std::size_t n = 0;
  for (const auto& [_, t] : by_kind) n += t.cases;
  return n;
}

std::size_t CorpusScore::agree() const {
  std::size_t n = 0;
  for (const auto& [_, t] : by_kind) n += t.agree;
  return n;
}

json CorpusScore::to_json() const {
  json kinds = json::object();
  for (const auto& [k, t] : by_kind) {
    kinds[std::string(verifier_name(k))] = {
        {"cases", t.cases},
        {"agree", t.agree},
        {"agreement", t.cases ? static_cast<double>(t.agree) / static_cast<double>(t.cases) : 0.0},
        {"mean_reward", t.cases ? t.reward_sum / static_cast<double>(t.cases) : 0.0}};
  }
  return {{"cases", cases()}, {"agree", agree()}, {"by_kind", kinds}, {"disagreements", disagreements}};
}

CorpusScore score_corpus(std::span<const VerifierCase> cases) {
  CorpusScore s;
  for (const auto& c : cases) {
    const auto v = verify(c.kind, c.response, c.truth, "line " + std::to_string(c.line));
    auto& t = s.by_kind[c.kind];
    ++t.cases;
    t.reward_sum += v.reward;
    const bool ok = v.reward == c.expected_reward && (!c.expected_reason || *c.expected_reason == v.reason);
    if (ok) ++t.agree;
    else s.disagreements.push_back(c.line);
  }
  return s;
}

}  // namespace forge
