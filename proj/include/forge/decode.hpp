#pragma once

#include <span>
#include <vector>

#include "forge/model.hpp"
#include "forge/optim.hpp"
#include "forge/rng.hpp"

namespace forge {

/// Trainable double-precision copy of a checkpoint.
struct Policy {
  ModelConfig config;
  TensorMap params;

  static Policy from_checkpoint(const Checkpoint& ckpt);
  /// Rounds every parameter to float32.
  Checkpoint to_checkpoint() const;
};

/// Logits [T × vocab] without recording gradients.
Tensor<double> policy_logits(const Policy& policy, std::span<const TokenId> tokens, const ForwardOptions& opts = {});

/// Per-token log-probabilities of ids[prefix..] given everything before them, as a
/// [|ids| − prefix] vector on g. Requires 1 <= prefix < |ids|.
Var<double> continuation_logprobs(Graph<double>& g, const ModelConfig& cfg, const VarMap<double>& params,
                                  std::span<const TokenId> ids, std::size_t prefix);

/// Summed continuation log-probability (no gradients).
double continuation_logprob(const Policy& policy, std::span<const TokenId> ids, std::size_t prefix);

struct GenerationOptions {
  std::size_t max_new_tokens = 64;
  /// 0 selects greedy decoding (argmax, lowest id on ties).
  double temperature = 1.0;
  std::vector<TokenId> stop_ids;
};

/// Draws one id from softmax(logits / temperature); greedy when temperature is 0.
TokenId sample_token(std::span<const double> logits, double temperature, Rng& rng);

/// Autoregressive continuation of prompt. The returned ids exclude the prompt and
/// include the stop id when one is produced.
std::vector<TokenId> generate(const Policy& policy, std::span<const TokenId> prompt, const GenerationOptions& opts,
                              Rng& rng);

}  // namespace forge
