#include "forge/chat.hpp"

#include <fstream>

#include "forge/error.hpp"

namespace forge {

std::string_view role_name(Role r) {
  switch (r) {
    case Role::system: return "system";
    case Role::user: return "user";
    case Role::assistant: return "assistant";
    case Role::tool: return "tool";
  }
  return "";
}

Role parse_role(std::string_view name) {
  if (name == "system") return Role::system;
  if (name == "user") return Role::user;
  if (name == "assistant") return Role::assistant;
  if (name == "tool") return Role::tool;
  throw DataError("chat: unknown role '" + std::string(name) + "'");
}

void validate_chat(const ChatSample& s) {
  if (s.messages.empty()) throw DataError("chat: sample has no messages");
  std::size_t i = 0;
  if (s.messages[0].role == Role::system) ++i;
  if (i >= s.messages.size()) throw DataError("chat: sample has only a system message");
  auto fail = [&](std::size_t k, const std::string& why) {
    throw DataError("chat: message " + std::to_string(k) + " (" + std::string(role_name(s.messages[k].role)) + ") " + why);
  };
  if (s.messages[i].role != Role::user) fail(i, "must be a user message");
  for (std::size_t k = i + 1; k < s.messages.size(); ++k) {
    const Role prev = s.messages[k - 1].role, cur = s.messages[k].role;
    bool ok = false;
    switch (prev) {
      case Role::user: ok = cur == Role::assistant; break;
      case Role::assistant: ok = cur == Role::user || cur == Role::tool; break;
      case Role::tool: ok = cur == Role::tool || cur == Role::assistant; break;
      case Role::system: ok = false; break;
    }
    if (!ok) fail(k, "cannot follow a " + std::string(role_name(prev)) + " message");
  }
  for (std::size_t k = 0; k < s.messages.size(); ++k)
    if (!s.messages[k].tool_calls.empty() && s.messages[k].role != Role::assistant) fail(k, "carries tool calls");
}

ChatMessage message_from_json(const json& j, const std::string& where) {
  if (!j.is_object()) throw DataError(where + ": message must be an object");
  ChatMessage m;
  try {
    m.role = parse_role(j.at("role").get<std::string>());
    if (j.contains("content") && !j.at("content").is_null()) m.content = j.at("content").get<std::string>();
    if (j.contains("tool_calls")) {
      for (const auto& c : j.at("tool_calls")) {
        ToolCall call;
        call.name = c.at("name").get<std::string>();
        if (c.contains("arguments")) call.arguments = c.at("arguments");
        m.tool_calls.push_back(std::move(call));
      }
    }
  } catch (const json::exception& e) {
    throw DataError(where + ": malformed message (" + e.what() + ")");
  }
  return m;
}

json to_json(const ChatMessage& m) {
  json j{{"role", role_name(m.role)}, {"content", m.content}};
  if (!m.tool_calls.empty()) {
    json calls = json::array();
    for (const auto& c : m.tool_calls) calls.push_back(json{{"name", c.name}, {"arguments", c.arguments}});
    j["tool_calls"] = calls;
  }
  return j;
}

ChatSample chat_from_json(const json& j, const std::string& where) {
  if (!j.is_object() || !j.contains("messages") || !j.at("messages").is_array()) {
    throw DataError(where + ": expected an object with a \"messages\" array");
  }
  ChatSample s;
  std::size_t k = 0;
  for (const auto& m : j.at("messages")) s.messages.push_back(message_from_json(m, where + " message " + std::to_string(k++)));
  try {
    validate_chat(s);
  } catch (const DataError& e) {
    throw DataError(where + ": " + e.what());
  }
  return s;
}

json to_json(const ChatSample& s) {
  json msgs = json::array();
  for (const auto& m : s.messages) msgs.push_back(to_json(m));
  return json{{"messages", msgs}};
}

std::vector<ChatSample> read_chat_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("chat: cannot open '" + path.string() + "'");
  std::vector<ChatSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.filename().string() + ":" + std::to_string(lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError(where + ": invalid JSON (" + e.what() + ")");
    }
    out.push_back(chat_from_json(j, where));
  }
  return out;
}

std::string format_tool_calls(std::span<const ToolCall> calls) {
  json arr = json::array();
  for (const auto& c : calls) arr.push_back(json{{"name", c.name}, {"arguments", c.arguments}});
  return "```tool_calls\n" + arr.dump() + "\n```";
}

std::string assistant_text(const ChatMessage& m) {
  if (m.tool_calls.empty()) return m.content;
  return m.content.empty() ? format_tool_calls(m.tool_calls) : m.content + "\n" + format_tool_calls(m.tool_calls);
}

TokenId role_token(const Tokenizer& tok, Role r) {
  switch (r) {
    case Role::system: return tok.special(kSystemToken);
    case Role::user: return tok.special(kUserToken);
    case Role::assistant: return tok.special(kAssistantToken);
    case Role::tool: return tok.special(kToolToken);
  }
  return tok.special(kUserToken);
}

RenderedChat render_chat(const ChatSample& sample, const Tokenizer& tok) {
  validate_chat(sample);
  RenderedChat r;
  const TokenId end = tok.end();
  for (const auto& m : sample.messages) {
    MessageSpan span{m.role};
    span.begin = r.ids.size();
    r.ids.push_back(role_token(tok, m.role));
    span.content_begin = r.ids.size();
    const auto content = tok.encode(m.role == Role::assistant ? assistant_text(m) : m.content);
    r.ids.insert(r.ids.end(), content.begin(), content.end());
    span.content_end = r.ids.size();
    r.ids.push_back(end);
    span.end = r.ids.size();
    r.spans.push_back(span);
  }
  return r;
}

std::vector<TokenId> render_generation_prompt(const ChatSample& sample, const Tokenizer& tok) {
  auto ids = render_chat(sample, tok).ids;
  ids.push_back(role_token(tok, Role::assistant));
  return ids;
}

std::vector<std::uint8_t> build_loss_mask(const RenderedChat& chat) {
  std::vector<std::uint8_t> mask(chat.ids.size(), 0);
  for (const auto& s : chat.spans) {
    if (s.role != Role::assistant) continue;
    for (std::size_t i = s.content_begin; i < s.content_end; ++i) mask[i] = 1;
  }
  return mask;
}

}  // namespace forge
