#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "forge/serialization.hpp"
#include "forge/tokenizer.hpp"

namespace forge {

enum class Role { system, user, assistant, tool };

std::string_view role_name(Role r);
/// Throws DataError for anything but system/user/assistant/tool.
Role parse_role(std::string_view name);

struct ToolCall {
  std::string name;
  json arguments = json::object();
  friend bool operator==(const ToolCall&, const ToolCall&) = default;
};

struct ChatMessage {
  Role role = Role::user;
  std::string content;
  std::vector<ToolCall> tool_calls;  // assistant messages only
  friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

struct ChatSample {
  std::vector<ChatMessage> messages;
  friend bool operator==(const ChatSample&, const ChatSample&) = default;
};

/// Turn order: optional leading system message, then a user message; user is
/// answered by assistant; assistant is followed by user or tool; tool is followed by
/// tool or assistant. Throws DataError naming the offending message.
void validate_chat(const ChatSample& sample);

ChatMessage message_from_json(const json& j, const std::string& where);
json to_json(const ChatMessage& m);
ChatSample chat_from_json(const json& j, const std::string& where);
json to_json(const ChatSample& s);

/// Reads line-delimited {"messages": [...]} records; blank lines are skipped.
std::vector<ChatSample> read_chat_jsonl(const std::filesystem::path& path);

/// Fenced block appended to assistant content for tool calls.
std::string format_tool_calls(std::span<const ToolCall> calls);

/// The text an assistant message is trained on: content, then any tool calls.
std::string assistant_text(const ChatMessage& m);

struct MessageSpan {
  Role role;
  std::size_t begin = 0;          // role-open token
  std::size_t end = 0;            // one past the end token
  std::size_t content_begin = 0;  // first content token
  std::size_t content_end = 0;    // the end token's index
};

struct RenderedChat {
  std::vector<TokenId> ids;
  std::vector<MessageSpan> spans;
};

/// Each message becomes <role-open> content <|end|>. Spans partition ids in order.
RenderedChat render_chat(const ChatSample& sample, const Tokenizer& tok);

/// render_chat followed by an open assistant turn, for generation.
std::vector<TokenId> render_generation_prompt(const ChatSample& sample, const Tokenizer& tok);

TokenId role_token(const Tokenizer& tok, Role r);

/// True exactly at assistant content positions (never at control tokens).
std::vector<std::uint8_t> build_loss_mask(const RenderedChat& chat);

// ---- packing ----------------------------------------------------------------

/// One training sequence with its per-token loss mask.
struct TrainSequence {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> loss_mask;
};

struct PackedBatch {
  std::vector<TokenId> token_ids;
  std::vector<std::int32_t> segment_ids;
  std::vector<std::uint8_t> loss_mask;
  std::vector<std::size_t> positions;

  std::size_t size() const { return token_ids.size(); }
  std::size_t num_segments() const { return segment_ids.empty() ? 0 : static_cast<std::size_t>(segment_ids.back()) + 1; }
};

/// First fit in input order: a sample joins the open batch when it fits, otherwise
/// it opens a new one. Segment ids count from 0 within each batch, positions restart
/// at every segment. Throws DataError for empty samples or samples over max_len.
std::vector<PackedBatch> pack_samples(std::span<const TrainSequence> samples, std::size_t max_len);

/// allow(i, j) ⇔ segment_ids[i] == segment_ids[j] ∧ j ≤ i.
std::vector<std::uint8_t> build_attention_mask(std::span<const std::int32_t> segment_ids);

}  // namespace forge
