#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "forge/decode.hpp"
#include "forge/serialization.hpp"
#include "forge/tokenizer.hpp"

namespace forge {

enum class EvalMode { loglikelihood, generate };
enum class Metric { accuracy, f1_binary, f1_macro, levenshtein, exact_match };

std::string_view mode_name(EvalMode m);
std::string_view metric_name(Metric m);
EvalMode parse_mode(std::string_view s);
Metric parse_metric(std::string_view s);

struct ChoiceResult {
  std::size_t index = 0;
  std::vector<double> logprobs;
};

/// Sums teacher-forced log-probs of each choice after the context; the highest
/// total wins, ties go to the lowest index. Throws DataError for fewer than two
/// choices, an empty choice, or an empty context.
ChoiceResult loglikelihood_choice(const Policy& policy, std::span<const TokenId> context,
                                  std::span<const std::vector<TokenId>> choices);

/// Greedy continuation; stops before a stop id (which is not returned) or after max_new.
std::vector<TokenId> generate_greedy(const Policy& policy, std::span<const TokenId> context, std::size_t max_new,
                                     std::span<const TokenId> stop_ids);

/// Edit distance over Unicode scalar values.
std::size_t levenshtein(std::string_view a, std::string_view b);

/// All metrics take equal-length, non-empty prediction and gold lists and return a
/// score in [0, 1]. f1_binary scores the `positive` class. Throws DataError.
double metric_eval(Metric m, std::span<const std::string> preds, std::span<const std::string> golds,
                   const std::string& positive = "1");

/// (raw − baseline) / (1 − baseline); throws ConfigError when baseline >= 1.
double normalize_score(double raw, double baseline);

struct TaskItem {
  std::string context;
  std::vector<std::string> choices;  // loglikelihood
  std::size_t gold_index = 0;        // loglikelihood
  std::string gold_text;             // generate
  bool fewshot = false;              // exemplar pool, never scored
};

struct TaskSpec {
  std::string name;
  std::filesystem::path file;
  EvalMode mode = EvalMode::loglikelihood;
  Metric metric = Metric::accuracy;
  std::size_t n_shot = 0;
  /// Defaults: 1/choices for loglikelihood tasks (from the first item), 0 otherwise.
  std::optional<double> baseline;
  std::string positive = "1";
  std::size_t max_new_tokens = 16;
  /// Rank choices by log-prob per UTF-8 byte of the choice text instead of the raw sum.
  bool per_byte = false;
  /// Render prompts as chat turns: exemplars become user/assistant pairs and the item
  /// an open assistant turn. Otherwise prompts are BOS + build_prompt text.
  bool chat = false;
  std::vector<TaskItem> items;

  std::vector<const TaskItem*> exemplars() const;
  std::vector<const TaskItem*> scored() const;
  double effective_baseline() const;
};

/// Items are {context, choices, gold: index} (loglikelihood) or {context, gold: text}
/// (generate), with optional "fewshot": true. Errors name file:line.
std::vector<TaskItem> read_task_items(const std::filesystem::path& path, EvalMode mode);

/// Manifest {"tasks": [{name, file, mode, metric, n_shot, baseline?, positive?,
/// max_new_tokens?, per_byte?, chat?}]}; file paths resolve against the manifest's directory.
std::vector<TaskSpec> load_suite(const std::filesystem::path& manifest);

/// Exemplars in file order, each as context + answer + "\n\n", then the item context.
/// Contexts carry their own separators (e.g. "Sentiment:") and choices their leading space.
std::string build_prompt(const TaskSpec& task, const TaskItem& item);

/// Token ids the model is conditioned on for item, in the task's prompt style.
std::vector<TokenId> prompt_ids(const TaskSpec& task, const TaskItem& item, const Tokenizer& tok);

struct TaskScore {
  std::string name;
  EvalMode mode = EvalMode::loglikelihood;
  Metric metric = Metric::accuracy;
  std::size_t n_shot = 0;
  bool chat = false;
  std::size_t items = 0;
  double raw = 0;
  double baseline = 0;
  double normalized = 0;
  std::vector<std::string> predictions;
};

struct EvalReport {
  std::optional<std::size_t> step;
  std::vector<TaskScore> tasks;
  double average = 0;  // mean normalized score
  json to_json() const;
};

EvalReport run_suite(const Policy& policy, const Tokenizer& tok, std::span<const TaskSpec> tasks,
                     std::optional<std::size_t> step = std::nullopt);

/// Appends "step,task1,...,taskN,average" (writes the header for a new file; an
/// existing header must match). Normalized scores with 10 significant digits.
void append_monitoring_row(const std::filesystem::path& csv, const EvalReport& report);

}  // namespace forge
