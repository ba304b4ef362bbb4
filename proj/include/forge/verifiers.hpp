#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "forge/chat.hpp"
#include "forge/error.hpp"

namespace forge {

/// Binary reward plus a short machine-readable reason:
///   ok, no_boxed, unbalanced, mismatch                (math)
///   no_choice, ambiguous, wrong_label                 (mcq)
///   no_tool_calls, parse_error, count_mismatch,
///   name_mismatch, arg_mismatch                       (tool)
struct Verdict {
  double reward = 0;
  std::string reason;
  friend bool operator==(const Verdict&, const Verdict&) = default;
};

class ExtractError : public DataError {
 public:
  ExtractError(std::string reason, const std::string& msg) : DataError(msg), reason_(std::move(reason)) {}
  const std::string& reason() const noexcept { return reason_; }

 private:
  std::string reason_;
};

/// Content of the last top-level \boxed{...}, braces matched by depth and the result
/// trimmed. A \boxed nested inside another stays part of the outer content.
/// Throws ExtractError with reason no_boxed or unbalanced.
std::string extract_boxed(std::string_view text);

/// Exact rational p/q with q > 0 and gcd(p, q) = 1.
struct Rational {
  long long num = 0;
  long long den = 1;
  friend bool operator==(const Rational&, const Rational&) = default;
};

/// Parses integers, decimals, a/b and \frac{a}{b} (either side integer or decimal,
/// optional leading sign). nullopt for anything else or on overflow.
std::optional<Rational> parse_rational(std::string_view s);

/// Removes whitespace and redundant outer braces, unwraps \boxed, maps \dfrac and
/// \tfrac to \frac, and trims trailing zeros from decimals ("2.50" → "2.5", "3.0" → "3").
std::string canonical_math(std::string_view s);

Verdict math_verify(std::string_view response, std::string_view truth);

/// The committed span is the final non-empty line, narrowed to its last sentence that
/// mentions a label. A label counts when it stands alone (no letters or digits on
/// either side); several distinct labels in the span are ambiguous.
Verdict mcq_verify(std::string_view response, std::string_view correct, std::span<const std::string> labels);

/// Parses the last ```tool_calls fenced block of a response (a JSON array of
/// {name, arguments}). Throws ExtractError: no_tool_calls, parse_error.
std::vector<ToolCall> parse_tool_calls(std::string_view response);

/// Argument values compare numerically when both sides are numbers or numeric
/// strings; text exactly; arrays and objects element-wise.
bool tool_values_equal(const json& a, const json& b);

Verdict toolcall_verify(std::span<const ToolCall> response, std::span<const ToolCall> expected, bool order_sensitive);
Verdict toolcall_verify(std::string_view response, std::span<const ToolCall> expected, bool order_sensitive);

enum class VerifierKind { math, mcq, tool };

std::string_view verifier_name(VerifierKind k);
/// Throws DataError for an unknown name.
VerifierKind parse_verifier_kind(std::string_view name);

/// Ground truth as stored in data files:
///   math  "1/2"
///   mcq   "B" (labels A-D) or {"answer": "B", "labels": [...]}
///   tool  [calls...] or {"calls": [...], "order_sensitive": bool}
/// Throws DataError naming `where` when the truth is malformed.
Verdict verify(VerifierKind kind, std::string_view response, const json& truth, const std::string& where = "truth");

struct VerifierCase {
  VerifierKind kind = VerifierKind::math;
  std::string response;
  json truth;
  double expected_reward = 0;
  std::optional<std::string> expected_reason;
  std::size_t line = 0;
};

/// Line-delimited {kind, response, truth, expected_reward[, expected_reason]}.
std::vector<VerifierCase> read_verifier_corpus(const std::filesystem::path& path);

struct KindTally {
  std::size_t cases = 0;
  std::size_t agree = 0;
  double reward_sum = 0;
};

struct CorpusScore {
  std::map<VerifierKind, KindTally> by_kind;
  std::vector<std::size_t> disagreements;  // corpus line numbers
  std::size_t cases() const;
  std::size_t agree() const;
  json to_json() const;
};

/// A case agrees when the reward matches and, if given, so does the reason.
CorpusScore score_corpus(std::span<const VerifierCase> cases);

}  // namespace forge
