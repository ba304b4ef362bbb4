#include "forge/losses.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "forge/error.hpp"

namespace forge {

namespace {

template <typename T>
Mask target_mask(const Shape& logits_shape, std::span<const TokenId> targets, std::span<const std::uint8_t> rows) {
  if (logits_shape.size() != 2 || logits_shape[0] != targets.size()) {
    throw ShapeError("loss: logits " + shape_str(logits_shape) + " for " + std::to_string(targets.size()) + " targets");
  }
  const std::size_t vocab = logits_shape[1];
  Mask m(logits_shape, 0);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= vocab) {
      throw DataError("loss: target id " + std::to_string(targets[t]) + " outside vocabulary of " + std::to_string(vocab));
    }
    if (rows.empty() || rows[t]) m[t * vocab + static_cast<std::size_t>(targets[t])] = 1;
  }
  return m;
}

template <typename T>
void check_finite(const Var<T>& v, const char* what) {
  if (!v.value().all_finite()) throw NumericError(std::string(what) + ": non-finite log-probabilities");
}

template <typename T>
Mask value_mask(const Tensor<T>& t, bool (*pred)(T)) {
  Mask m(t.shape(), 0);
  for (std::size_t i = 0; i < t.numel(); ++i) m[i] = pred(t[i]);
  return m;
}

}  // namespace

template <typename T>
Var<T> token_logprobs(const Var<T>& logits, std::span<const TokenId> targets) {
  auto& g = logits.graph();
  const auto m = target_mask<T>(logits.shape(), targets, {});
  const auto picked = sum(where(m, log_softmax(logits, 1), g.constant(T(0))), 1);
  return reshape(picked, Shape{targets.size()});
}

template <typename T>
Var<T> sft_loss(const Var<T>& logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask) {
  if (mask.size() != targets.size()) throw ShapeError("sft_loss: mask length differs from targets");
  const std::size_t count = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto b) { return b != 0; }));
  if (count == 0) throw DataError("sft_loss: loss mask selects no position");
  auto& g = logits.graph();
  const auto m = target_mask<T>(logits.shape(), targets, mask);
  const auto total = sum(where(m, log_softmax(logits, 1), g.constant(T(0))));
  return scale(total, T(-1) / static_cast<T>(count));
}

template <typename T>
Var<T> dpo_loss(const PreferenceLogps<T>& lp, T beta) {
  return dpop_loss(lp, beta, T(0));
}

template <typename T>
Var<T> dpop_loss(const PreferenceLogps<T>& lp, T beta, T lambda) {
  if (!(beta > 0)) throw ConfigError("dpo: beta must be > 0");
  if (!(lambda >= 0)) throw ConfigError("dpo: lambda must be >= 0");
  check_finite(lp.policy_chosen, "dpo");
  check_finite(lp.policy_rejected, "dpo");
  check_finite(lp.ref_chosen, "dpo");
  check_finite(lp.ref_rejected, "dpo");
  auto margin = (lp.policy_chosen - lp.ref_chosen) - (lp.policy_rejected - lp.ref_rejected);
  if (lambda > 0) {
    auto& g = margin.graph();
    const auto lost = lp.ref_chosen - lp.policy_chosen;
    const auto hinge = where(value_mask<T>(lost.value(), [](T x) { return x > T(0); }), lost, g.constant(T(0)));
    margin = margin - scale(hinge, lambda);
  }
  return mean(softplus(scale(margin, -beta)));
}

std::vector<double> grpo_advantages(std::span<const double> rewards, GrpoVariant variant) {
  for (double r : rewards)
    if (!std::isfinite(r)) throw NumericError("grpo: non-finite reward");
  const double n = static_cast<double>(rewards.size());
  const double mean = rewards.empty() ? 0.0 : std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  std::vector<double> a(rewards.size(), 0.0);
  if (std::adjacent_find(rewards.begin(), rewards.end(), std::not_equal_to<>()) == rewards.end()) return a;
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = rewards[i] - mean;
  if (variant == GrpoVariant::dr_grpo) return a;
  double var = 0;
  for (double x : a) var += x * x;
  const double sd = rewards.empty() ? 0.0 : std::sqrt(var / n);
  for (auto& x : a) x = sd < 1e-8 ? 0.0 : x / sd;
  return a;
}

double kl_k3(double logp_policy, double logp_ref) {
  const double d = logp_ref - logp_policy;
  return std::exp(d) - d - 1.0;
}

template <typename T>
Var<T> kl_k3(const Var<T>& logp_policy, const Tensor<T>& logp_ref) {
  auto& g = logp_policy.graph();
  const auto d = g.constant(logp_ref) - logp_policy;
  return add_scalar(exp(d) - d, T(-1));
}

template <typename T>
Var<T> grpo_objective(std::span<const Var<T>> logp_policy, std::span<const Tensor<T>> logp_old,
                      std::span<const Tensor<T>> logp_ref, std::span<const double> advantages, const GrpoConfig& cfg) {
  const std::size_t G = logp_policy.size();
  if (G == 0) throw DataError("grpo: empty group");
  if (logp_old.size() != G || logp_ref.size() != G || advantages.size() != G) {
    throw ShapeError("grpo: group members misaligned (policy " + std::to_string(G) + ", old " +
                     std::to_string(logp_old.size()) + ", ref " + std::to_string(logp_ref.size()) + ", advantages " +
                     std::to_string(advantages.size()) + ")");
  }
  if (cfg.variant == GrpoVariant::dr_grpo && cfg.max_tokens == 0) throw ConfigError("dr_grpo: max_tokens must be >= 1");
  auto& g = logp_policy[0].graph();
  const T lo = static_cast<T>(1 - cfg.clip_eps), hi = static_cast<T>(1 + cfg.clip_eps);
  std::vector<Var<T>> per_response;
  for (std::size_t i = 0; i < G; ++i) {
    const auto& lp = logp_policy[i];
    if (lp.shape().size() != 1 || logp_old[i].shape() != lp.shape() || logp_ref[i].shape() != lp.shape()) {
      throw ShapeError("grpo: response " + std::to_string(i) + " log-prob lengths differ");
    }
    check_finite(lp, "grpo");
    const auto ratio = exp(lp - g.constant(logp_old[i]));
    const Tensor<T> rv = ratio.value();
    Mask below(rv.shape(), 0), above(rv.shape(), 0);
    for (std::size_t t = 0; t < rv.numel(); ++t) {
      below[t] = rv[t] < lo;
      above[t] = rv[t] > hi;
    }
    const auto bounded = where(below, g.constant(lo), where(above, g.constant(hi), ratio));
    const T a = static_cast<T>(advantages[i]);
    const auto s1 = scale(ratio, a), s2 = scale(bounded, a);
    Mask take_first(rv.shape(), 0);
    for (std::size_t t = 0; t < rv.numel(); ++t) take_first[t] = s1.value()[t] <= s2.value()[t];
    const auto surrogate = where(take_first, s1, s2);
    const auto term = scale(kl_k3(lp, logp_ref[i]), static_cast<T>(cfg.kl_coef)) - surrogate;
    per_response.push_back(cfg.variant == GrpoVariant::grpo ? mean(term) : sum(term));
  }
  for (auto& v : per_response) v = reshape(v, Shape{1});
  const auto stacked = concat(std::span<const Var<T>>(per_response), 0);
  const T denom = cfg.variant == GrpoVariant::grpo ? static_cast<T>(G) : static_cast<T>(G * cfg.max_tokens);
  return scale(sum(stacked), T(1) / denom);
}

#define FORGE_INSTANTIATE(T)                                                                                    \
  template Var<T> token_logprobs(const Var<T>&, std::span<const TokenId>);                                      \
  template Var<T> sft_loss(const Var<T>&, std::span<const TokenId>, std::span<const std::uint8_t>);             \
  template Var<T> dpo_loss(const PreferenceLogps<T>&, T);                                                       \
  template Var<T> dpop_loss(const PreferenceLogps<T>&, T, T);                                                   \
  template Var<T> kl_k3(const Var<T>&, const Tensor<T>&);                                                       \
  template Var<T> grpo_objective(std::span<const Var<T>>, std::span<const Tensor<T>>, std::span<const Tensor<T>>, \
                                 std::span<const double>, const GrpoConfig&);

FORGE_INSTANTIATE(float)
FORGE_INSTANTIATE(double)

#undef FORGE_INSTANTIATE

}  // namespace forge
