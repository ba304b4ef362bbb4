#include "forge/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "forge/chat.hpp"
#include "forge/error.hpp"

namespace forge {

namespace {

std::string trimmed(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return std::string(s);
}

std::vector<std::u32string::value_type> scalars(std::string_view s) {
  std::vector<char32_t> out;
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    const int len = c < 0x80 ? 1 : (c >> 5) == 6 ? 2 : (c >> 4) == 14 ? 3 : (c >> 3) == 30 ? 4 : 1;
    char32_t cp = len == 1 ? c : c & (0x7f >> len);
    for (int k = 1; k < len && i + k < s.size(); ++k) cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3f);
    out.push_back(cp);
    i += static_cast<std::size_t>(len);
  }
  return out;
}

// Generated byte tokens can split a character; broken sequences become U+FFFD so
// reports stay valid JSON.
std::string valid_utf8(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 6 ? 2 : (c >> 4) == 14 ? 3 : (c >> 3) == 30 ? 4 : 0;
    bool ok = len > 0 && i + len <= s.size();
    for (std::size_t k = 1; ok && k < len; ++k) ok = (static_cast<unsigned char>(s[i + k]) >> 6) == 2;
    if (ok && len > 1) {
      const auto b = static_cast<unsigned char>(s[i + 1]);
      if (len == 2) ok = c >= 0xc2;
      if (len == 3) ok = !(c == 0xe0 && b < 0xa0) && !(c == 0xed && b >= 0xa0);
      if (len == 4) ok = !(c == 0xf0 && b < 0x90) && (c < 0xf4 || (c == 0xf4 && b < 0x90));
    }
    if (ok) {
      out.append(s.substr(i, len));
      i += len;
    } else {
      out += "\xEF\xBF\xBD";
      ++i;
    }
  }
  return out;
}

double f1(std::size_t tp, std::size_t fp, std::size_t fn) {
  const double p = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  const double r = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

std::string_view mode_name(EvalMode m) { return m == EvalMode::loglikelihood ? "loglikelihood" : "generate"; }

std::string_view metric_name(Metric m) {
  switch (m) {
    case Metric::accuracy: return "accuracy";
    case Metric::f1_binary: return "f1_binary";
    case Metric::f1_macro: return "f1_macro";
    case Metric::levenshtein: return "levenshtein";
    case Metric::exact_match: return "exact_match";
  }
  return "?";
}

EvalMode parse_mode(std::string_view s) {
  if (s == "loglikelihood") return EvalMode::loglikelihood;
  if (s == "generate") return EvalMode::generate;
  throw ConfigError("unknown eval mode '" + std::string(s) + "' (expected loglikelihood or generate)");
}

Metric parse_metric(std::string_view s) {
  for (auto m : {Metric::accuracy, Metric::f1_binary, Metric::f1_macro, Metric::levenshtein, Metric::exact_match}) {
    if (metric_name(m) == s) return m;
  }
  throw ConfigError("unknown metric '" + std::string(s) + "'");
}

ChoiceResult loglikelihood_choice(const Policy& policy, std::span<const TokenId> context,
                                  std::span<const std::vector<TokenId>> choices) {
  if (choices.size() < 2) throw DataError("loglikelihood: need at least two choices");
  if (context.empty()) throw DataError("loglikelihood: empty context");
  ChoiceResult r;
  for (std::size_t i = 0; i < choices.size(); ++i) {
    if (choices[i].empty()) throw DataError("loglikelihood: choice " + std::to_string(i) + " is empty");
    std::vector<TokenId> ids(context.begin(), context.end());
    ids.insert(ids.end(), choices[i].begin(), choices[i].end());
    r.logprobs.push_back(continuation_logprob(policy, ids, context.size()));
    if (r.logprobs[i] > r.logprobs[r.index]) r.index = i;
  }
  return r;
}

std::vector<TokenId> generate_greedy(const Policy& policy, std::span<const TokenId> context, std::size_t max_new,
                                     std::span<const TokenId> stop_ids) {
  if (max_new == 0) throw ConfigError("generate: max_new must be >= 1");
  GenerationOptions opts;
  opts.max_new_tokens = max_new;
  opts.temperature = 0;
  opts.stop_ids.assign(stop_ids.begin(), stop_ids.end());
  Rng unused(0);
  auto out = generate(policy, context, opts, unused);
  if (!out.empty() && std::find(stop_ids.begin(), stop_ids.end(), out.back()) != stop_ids.end()) out.pop_back();
  return out;
}

std::size_t levenshtein(std::string_view a, std::string_view b) {
  const auto x = scalars(a), y = scalars(b);
  std::vector<std::size_t> prev(y.size() + 1), cur(y.size() + 1);
  for (std::size_t j = 0; j <= y.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= x.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= y.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x[i - 1] == y[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[y.size()];
}

double metric_eval(Metric m, std::span<const std::string> preds, std::span<const std::string> golds,
                   const std::string& positive) {
  if (preds.size() != golds.size()) {
    throw DataError("metric: " + std::to_string(preds.size()) + " predictions for " + std::to_string(golds.size()) +
                    " golds");
  }
  if (golds.empty()) throw DataError("metric: no items");
  const double n = static_cast<double>(golds.size());
  switch (m) {
    case Metric::accuracy:
    case Metric::exact_match: {
      std::size_t hit = 0;
      for (std::size_t i = 0; i < golds.size(); ++i) hit += preds[i] == golds[i];
      return static_cast<double>(hit) / n;
    }
    case Metric::f1_binary: {
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < golds.size(); ++i) {
        const bool p = preds[i] == positive, g = golds[i] == positive;
        tp += p && g;
        fp += p && !g;
        fn += !p && g;
      }
      return f1(tp, fp, fn);
    }
    case Metric::f1_macro: {
      const std::set<std::string> classes(golds.begin(), golds.end());
      double total = 0;
      for (const auto& c : classes) {
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < golds.size(); ++i) {
          const bool p = preds[i] == c, g = golds[i] == c;
          tp += p && g;
          fp += p && !g;
          fn += !p && g;
        }
        total += f1(tp, fp, fn);
      }
      return total / static_cast<double>(classes.size());
    }
    case Metric::levenshtein: {
      double total = 0;
      for (std::size_t i = 0; i < golds.size(); ++i) {
        const std::size_t longest = std::max(scalars(preds[i]).size(), scalars(golds[i]).size());
        total += longest == 0 ? 1.0 : 1.0 - static_cast<double>(levenshtein(preds[i], golds[i])) / longest;
      }
      return total / n;
    }
  }
  throw DataError("metric: unknown");
}

double normalize_score(double raw, double baseline) {
  if (!(baseline < 1)) throw ConfigError("normalize: baseline must be < 1");
  return (raw - baseline) / (1 - baseline);
}

std::vector<const TaskItem*> TaskSpec::exemplars() const {
  std::vector<const TaskItem*> out;
  for (const auto& it : items)
    if (it.fewshot) out.push_back(&it);
  return out;
}

std::vector<const TaskItem*> TaskSpec::scored() const {
  std::vector<const TaskItem*> out;
  for (const auto& it : items)
    if (!it.fewshot) out.push_back(&it);
  return out;
}

double TaskSpec::effective_baseline() const {
  if (baseline) return *baseline;
  if (mode == EvalMode::generate) return 0.0;
  const auto s = scored();
  return s.empty() ? 0.0 : 1.0 / static_cast<double>(s.front()->choices.size());
}

std::vector<TaskItem> read_task_items(const std::filesystem::path& path, EvalMode mode) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open task file " + path.string());
  std::vector<TaskItem> items;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (trimmed(line).empty()) continue;
    const std::string where = path.filename().string() + ":" + std::to_string(n);
    const auto j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw DataError(where + ": not a JSON object");
    if (!j.contains("context") || !j.at("context").is_string()) throw DataError(where + ": missing string 'context'");
    if (!j.contains("gold")) throw DataError(where + ": missing 'gold'");
    TaskItem it;
    it.context = j.at("context").get<std::string>();
    if (j.contains("fewshot")) {
      if (!j.at("fewshot").is_boolean()) throw DataError(where + ": 'fewshot' must be a boolean");
      it.fewshot = j.at("fewshot").get<bool>();
    }
    if (mode == EvalMode::loglikelihood) {
      if (!j.contains("choices") || !j.at("choices").is_array() || j.at("choices").size() < 2) {
        throw DataError(where + ": loglikelihood items need at least two choices");
      }
      for (const auto& c : j.at("choices")) {
        if (!c.is_string() || c.get<std::string>().empty()) throw DataError(where + ": choices must be non-empty strings");
        it.choices.push_back(c.get<std::string>());
      }
      if (!j.at("gold").is_number_unsigned() || j.at("gold").get<std::size_t>() >= it.choices.size()) {
        throw DataError(where + ": 'gold' must index a choice");
      }
      it.gold_index = j.at("gold").get<std::size_t>();
    } else {
      if (!j.at("gold").is_string()) throw DataError(where + ": generate items need a string 'gold'");
      it.gold_text = j.at("gold").get<std::string>();
    }
    items.push_back(std::move(it));
  }
  return items;
}

std::vector<TaskSpec> load_suite(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw DataError("cannot open suite manifest " + manifest.string());
  const auto j = json::parse(in, nullptr, false);
  const std::string where = manifest.filename().string();
  if (j.is_discarded() || !j.is_object() || !j.contains("tasks") || !j.at("tasks").is_array() || j.at("tasks").empty()) {
    throw DataError(where + ": expected {\"tasks\": [...]} with at least one task");
  }
  static const std::set<std::string> known{"name", "file", "mode", "metric", "n_shot", "baseline", "positive",
                                           "max_new_tokens", "per_byte", "chat"};
  std::vector<TaskSpec> out;
  std::set<std::string> names;
  for (std::size_t k = 0; k < j.at("tasks").size(); ++k) {
    const auto& t = j.at("tasks")[k];
    const std::string at = where + ": tasks[" + std::to_string(k) + "]";
    if (!t.is_object()) throw DataError(at + " is not an object");
    for (const auto& [key, _] : t.items())
      if (!known.contains(key)) throw ConfigError(at + "." + key + ": unknown key");
    for (const char* req : {"name", "file", "mode", "metric"})
      if (!t.contains(req) || !t.at(req).is_string()) throw ConfigError(at + "." + req + ": required string");
    TaskSpec s;
    s.name = t.at("name").get<std::string>();
    if (!names.insert(s.name).second) throw ConfigError(at + ".name: duplicate task '" + s.name + "'");
    s.file = manifest.parent_path() / t.at("file").get<std::string>();
    s.mode = parse_mode(t.at("mode").get<std::string>());
    s.metric = parse_metric(t.at("metric").get<std::string>());
    if (t.contains("n_shot")) {
      if (!t.at("n_shot").is_number_unsigned()) throw ConfigError(at + ".n_shot: expected 0 or 5");
      s.n_shot = t.at("n_shot").get<std::size_t>();
      if (s.n_shot != 0 && s.n_shot != 5) throw ConfigError(at + ".n_shot: expected 0 or 5");
    }
    if (t.contains("baseline")) {
      if (!t.at("baseline").is_number()) throw ConfigError(at + ".baseline: expected a number");
      s.baseline = t.at("baseline").get<double>();
      if (!(*s.baseline < 1)) throw ConfigError(at + ".baseline: must be < 1");
    }
    if (t.contains("positive")) s.positive = t.at("positive").get<std::string>();
    if (t.contains("max_new_tokens")) {
      if (!t.at("max_new_tokens").is_number_unsigned() || t.at("max_new_tokens").get<std::size_t>() == 0) {
        throw ConfigError(at + ".max_new_tokens: expected a positive integer");
      }
      s.max_new_tokens = t.at("max_new_tokens").get<std::size_t>();
    }
    if (t.contains("per_byte")) {
      if (!t.at("per_byte").is_boolean()) throw ConfigError(at + ".per_byte: expected a boolean");
      s.per_byte = t.at("per_byte").get<bool>();
    }
    if (t.contains("chat")) {
      if (!t.at("chat").is_boolean()) throw ConfigError(at + ".chat: expected a boolean");
      s.chat = t.at("chat").get<bool>();
    }
    s.items = read_task_items(s.file, s.mode);
    if (s.scored().empty()) throw DataError(at + ": task '" + s.name + "' has no scored items");
    if (s.exemplars().size() < s.n_shot) {
      throw DataError(at + ": " + std::to_string(s.n_shot) + "-shot needs that many items marked fewshot, found " +
                      std::to_string(s.exemplars().size()));
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::string build_prompt(const TaskSpec& task, const TaskItem& item) {
  std::string p;
  const auto ex = task.exemplars();
  if (ex.size() < task.n_shot) throw DataError("task '" + task.name + "': not enough few-shot exemplars");
  for (std::size_t k = 0; k < task.n_shot; ++k) {
    const auto& e = *ex[k];
    p += e.context;
    p += task.mode == EvalMode::loglikelihood ? e.choices[e.gold_index] : e.gold_text;
    p += "\n\n";
  }
  return p + item.context;
}

std::vector<TokenId> prompt_ids(const TaskSpec& task, const TaskItem& item, const Tokenizer& tok) {
  if (!task.chat) {
    std::vector<TokenId> ids{tok.bos()};
    for (auto id : tok.encode(build_prompt(task, item))) ids.push_back(id);
    return ids;
  }
  const auto ex = task.exemplars();
  if (ex.size() < task.n_shot) throw DataError("task '" + task.name + "': not enough few-shot exemplars");
  ChatSample s;
  for (std::size_t k = 0; k < task.n_shot; ++k) {
    const auto& e = *ex[k];
    s.messages.push_back({Role::user, e.context, {}});
    s.messages.push_back(
        {Role::assistant, trimmed(task.mode == EvalMode::loglikelihood ? e.choices[e.gold_index] : e.gold_text), {}});
  }
  s.messages.push_back({Role::user, item.context, {}});
  return render_generation_prompt(s, tok);
}

json EvalReport::to_json() const {
  json tasks_j = json::array();
  for (const auto& t : tasks) {
    tasks_j.push_back({{"name", t.name},
                       {"mode", mode_name(t.mode)},
                       {"metric", metric_name(t.metric)},
                       {"n_shot", t.n_shot},
                       {"chat", t.chat},
                       {"items", t.items},
                       {"raw", t.raw},
                       {"baseline", t.baseline},
                       {"normalized", t.normalized},
                       {"predictions", t.predictions}});
  }
  json j{{"tasks", tasks_j}, {"average", average}};
  j["step"] = step ? json(*step) : json(nullptr);
  return j;
}

EvalReport run_suite(const Policy& policy, const Tokenizer& tok, std::span<const TaskSpec> tasks,
                     std::optional<std::size_t> step) {
  if (tasks.empty()) throw DataError("eval: empty task list");
  EvalReport rep;
  rep.step = step;
  const std::vector<TokenId> stops{tok.eos(), tok.end()};
  for (const auto& task : tasks) {
    TaskScore s;
    s.name = task.name;
    s.mode = task.mode;
    s.metric = task.metric;
    s.n_shot = task.n_shot;
    s.chat = task.chat;
    std::vector<std::string> golds;
    for (const auto* item : task.scored()) {
      const auto ctx = prompt_ids(task, *item, tok);
      if (task.mode == EvalMode::loglikelihood) {
        std::vector<std::vector<TokenId>> choices;
        for (const auto& c : item->choices) choices.push_back(tok.encode(c));
        auto r = loglikelihood_choice(policy, ctx, choices);
        if (task.per_byte) {
          r.index = 0;
          for (std::size_t c = 0; c < choices.size(); ++c) {
            r.logprobs[c] /= static_cast<double>(item->choices[c].size());
            if (r.logprobs[c] > r.logprobs[r.index]) r.index = c;
          }
        }
        s.predictions.push_back(trimmed(item->choices[r.index]));
        golds.push_back(trimmed(item->choices[item->gold_index]));
      } else {
        const auto out = generate_greedy(policy, ctx, task.max_new_tokens, stops);
        s.predictions.push_back(trimmed(valid_utf8(tok.decode(out, SpecialPolicy::skip))));
        golds.push_back(trimmed(item->gold_text));
      }
    }
    s.items = golds.size();
    s.raw = metric_eval(task.metric, s.predictions, golds, trimmed(task.positive));
    s.baseline = task.effective_baseline();
    s.normalized = normalize_score(s.raw, s.baseline);
    rep.average += s.normalized;
    rep.tasks.push_back(std::move(s));
  }
  rep.average /= static_cast<double>(rep.tasks.size());
  return rep;
}

void append_monitoring_row(const std::filesystem::path& csv, const EvalReport& report) {
  std::string header = "step";
  for (const auto& t : report.tasks) header += "," + t.name;
  header += ",average";
  if (std::filesystem::exists(csv)) {
    std::ifstream in(csv);
    std::string first;
    std::getline(in, first);
    if (first != header) throw DataError(csv.string() + ": header '" + first + "' does not match suite '" + header + "'");
  } else {
    std::ofstream(csv, std::ios::binary) << header << "\n";
  }
  std::ofstream out(csv, std::ios::binary | std::ios::app);
  if (!out) throw DataError("cannot append to " + csv.string());
  out << (report.step ? std::to_string(*report.step) : std::string("-"));
  for (const auto& t : report.tasks) out << ',' << num(t.normalized);
  out << ',' << num(report.average) << "\n";
}

}  // namespace forge
