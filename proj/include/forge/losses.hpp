#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "forge/autograd.hpp"

namespace forge {

/// log softmax(logits[t])[targets[t]] for every row; logits is [T × V], result [T].
template <typename T>
Var<T> token_logprobs(const Var<T>& logits, std::span<const TokenId> targets);

/// Mean of −log p(target) over positions with mask set. Unmasked rows get exactly
/// zero gradient. Throws DataError when no position is masked in.
template <typename T>
Var<T> sft_loss(const Var<T>& logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask);

/// Summed sequence log-probabilities, one entry per preference pair ([P] vectors).
template <typename T>
struct PreferenceLogps {
  Var<T> policy_chosen, policy_rejected, ref_chosen, ref_rejected;
};

/// mean softplus(−β[(π_w − ref_w) − (π_l − ref_l)])
template <typename T>
Var<T> dpo_loss(const PreferenceLogps<T>& lp, T beta);

/// DPO with the positive-likelihood hinge: the margin is reduced by
/// λ·max(0, ref_w − π_w) before scaling by β.
template <typename T>
Var<T> dpop_loss(const PreferenceLogps<T>& lp, T beta, T lambda);

enum class GrpoVariant { grpo, dr_grpo };

/// grpo: (r − mean) / population std, all zero when std < 1e-8. dr_grpo: r − mean.
std::vector<double> grpo_advantages(std::span<const double> rewards, GrpoVariant variant);

/// ρ − log ρ − 1 with ρ = exp(logp_ref − logp_policy).
double kl_k3(double logp_policy, double logp_ref);

/// Element-wise k3 on the tape; the reference side is a constant.
template <typename T>
Var<T> kl_k3(const Var<T>& logp_policy, const Tensor<T>& logp_ref);

struct GrpoConfig {
  double clip_eps = 0.2;
  double kl_coef = 0.001;
  GrpoVariant variant = GrpoVariant::grpo;
  /// Divisor for dr_grpo aggregation (the generation budget per response).
  std::size_t max_tokens = 64;
};

/// Clipped-surrogate objective for one group of G responses. logp_policy[i] holds the
/// per-token log-probs of response i on the tape; logp_old and logp_ref are fixed.
/// grpo averages tokens within a response, then over the group; dr_grpo sums all
/// tokens and divides by G·max_tokens.
template <typename T>
Var<T> grpo_objective(std::span<const Var<T>> logp_policy, std::span<const Tensor<T>> logp_old,
                      std::span<const Tensor<T>> logp_ref, std::span<const double> advantages, const GrpoConfig& cfg);

}  // namespace forge
