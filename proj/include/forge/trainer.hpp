#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "forge/chat.hpp"
#include "forge/decode.hpp"
#include "forge/losses.hpp"
#include "forge/optim.hpp"

namespace forge {

/// Shared optimisation settings. One optimizer step consumes grad_accum micro-batches
/// of micro_batch examples; the run lasts schedule.total_steps steps.
struct TrainLoopConfig {
  ScheduleSpec schedule;
  AdamWConfig adamw;
  double max_grad_norm = 1.0;
  std::size_t micro_batch = 1;
  std::size_t grad_accum = 1;

  std::size_t examples_per_step() const { return micro_batch * grad_accum; }
  void validate() const;
};

struct StepLog {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
  double grad_norm = 0;
  std::optional<double> mean_reward;
  std::optional<double> mean_kl;
};

using StepCallback = std::function<void(const StepLog&)>;

/// CSV with columns step, lr, loss, grad_norm (plus mean_reward, mean_kl when the
/// first row carries them). Numbers use 10 significant digits.
void write_step_log(const std::filesystem::path& path, std::span<const StepLog> rows);

/// Endless epoch-shuffled index stream over n examples.
class ExampleStream {
 public:
  ExampleStream(std::size_t n, Rng rng);
  std::size_t next();

 private:
  std::size_t n_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

struct LmTrainConfig {
  TrainLoopConfig loop;
  /// Rows are packed up to this many tokens.
  std::size_t pack_len = 512;
};

/// Next-token cross-entropy on masked-in targets (SFT, and pretraining with an
/// all-ones mask). Each example predicts ids[1..] from ids[..−1]; targets that
/// would cross a packed segment boundary are dropped. Loss is the mean over every
/// masked target of the step.
std::vector<StepLog> train_lm(Policy& policy, std::span<const TrainSequence> data, const LmTrainConfig& cfg, Rng rng,
                              const StepCallback& on_step = {});

/// Mean masked cross-entropy of data under policy, in the same target convention.
double evaluate_lm_loss(const Policy& policy, std::span<const TrainSequence> data);

/// A preference pair as token sequences: prompt, then response, sharing the prefix length.
struct PreferenceIds {
  std::vector<TokenId> chosen;
  std::vector<TokenId> rejected;
  std::size_t chosen_prefix = 0;
  std::size_t rejected_prefix = 0;
};

/// Renders prompt + response messages; the response covers everything after the
/// assistant role-open token, including its <|end|>.
PreferenceIds encode_preference(const ChatSample& prompt, const ChatMessage& chosen, const ChatMessage& rejected,
                                const Tokenizer& tok);

struct DpoTrainConfig {
  TrainLoopConfig loop;
  double beta = 0.1;
  /// Weight of the positive-likelihood hinge; 0 gives plain DPO.
  double lambda = 5.0;
};

/// Preference optimisation against a frozen copy of the starting policy.
std::vector<StepLog> train_dpo(Policy& policy, std::span<const PreferenceIds> data, const DpoTrainConfig& cfg, Rng rng,
                               const StepCallback& on_step = {});

/// Mean DPO-P loss of data under policy against ref.
double evaluate_dpo_loss(const Policy& policy, const Policy& ref, std::span<const PreferenceIds> data,
                         const DpoTrainConfig& cfg);

/// Reward for response ids sampled on prompt `index`.
using RewardFn = std::function<double(std::size_t index, std::span<const TokenId> response)>;

struct GrpoTrainConfig {
  /// micro_batch counts prompts; each prompt gets group_size sampled responses.
  TrainLoopConfig loop;
  std::size_t group_size = 8;
  GrpoConfig objective;
  GenerationOptions generation;
};

/// Group-relative policy optimisation with one update per rollout batch (the
/// behaviour policy equals the current policy) and a frozen starting reference.
std::vector<StepLog> train_grpo(Policy& policy, std::span<const std::vector<TokenId>> prompts, const RewardFn& reward,
                                const GrpoTrainConfig& cfg, Rng rng, const StepCallback& on_step = {});

}  // namespace forge
