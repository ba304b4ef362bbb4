#include "forge/decode.hpp"

#include <algorithm>
#include <cmath>

#include "forge/error.hpp"
#include "forge/losses.hpp"

namespace forge {

Policy Policy::from_checkpoint(const Checkpoint& ckpt) {
  ckpt.validate();
  return Policy{ckpt.config, cast_params<double>(ckpt.params)};
}

Checkpoint Policy::to_checkpoint() const {
  Checkpoint out{config, {}};
  for (const auto& [name, t] : params) out.params.emplace(name, t.cast<float>());
  return out;
}

Tensor<double> policy_logits(const Policy& policy, std::span<const TokenId> tokens, const ForwardOptions& opts) {
  Graph<double> g;
  const auto vars = bind_params(g, policy.params, false);
  return forward(g, policy.config, vars, tokens, opts).value();
}

Var<double> continuation_logprobs(Graph<double>& g, const ModelConfig& cfg, const VarMap<double>& params,
                                  std::span<const TokenId> ids, std::size_t prefix) {
  if (prefix == 0 || prefix >= ids.size()) {
    throw DataError("continuation: prefix " + std::to_string(prefix) + " for sequence of " + std::to_string(ids.size()) +
                    " tokens");
  }
  const auto logits = forward(g, cfg, params, ids.first(ids.size() - 1));
  const auto rows = slice(logits, 0, prefix - 1, ids.size() - 1);
  return token_logprobs(rows, ids.subspan(prefix));
}

double continuation_logprob(const Policy& policy, std::span<const TokenId> ids, std::size_t prefix) {
  Graph<double> g;
  const auto vars = bind_params(g, policy.params, false);
  const auto lp = continuation_logprobs(g, policy.config, vars, ids, prefix).value();
  double s = 0;
  for (double v : lp.data()) s += v;
  return s;
}

TokenId sample_token(std::span<const double> logits, double temperature, Rng& rng) {
  if (logits.empty()) throw DataError("sample_token: empty logits");
  if (!(temperature >= 0)) throw ConfigError("sampling: temperature must be >= 0");
  for (double v : logits)
    if (!std::isfinite(v)) throw NumericError("sampling: non-finite logit");
  if (temperature == 0) {
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  const double top = *std::max_element(logits.begin(), logits.end());
  std::vector<double> w(logits.size());
  double z = 0;
  for (std::size_t i = 0; i < w.size(); ++i) z += w[i] = std::exp((logits[i] - top) / temperature);
  double u = rng.uniform() * z;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (u < w[i]) return static_cast<TokenId>(i);
    u -= w[i];
  }
  // Rounding left u just past the last bucket.
  for (std::size_t i = w.size(); i-- > 0;)
    if (w[i] > 0) return static_cast<TokenId>(i);
  return 0;
}

std::vector<TokenId> generate(const Policy& policy, std::span<const TokenId> prompt, const GenerationOptions& opts,
                              Rng& rng) {
  if (prompt.empty()) throw DataError("generate: empty prompt");
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  std::vector<TokenId> out;
  const std::size_t vocab = policy.config.vocab_size;
  for (std::size_t step = 0; step < opts.max_new_tokens; ++step) {
    const auto logits = policy_logits(policy, seq);
    const auto last = logits.data().subspan((seq.size() - 1) * vocab, vocab);
    const TokenId next = sample_token(last, opts.temperature, rng);
    seq.push_back(next);
    out.push_back(next);
    if (std::find(opts.stop_ids.begin(), opts.stop_ids.end(), next) != opts.stop_ids.end()) break;
  }
  return out;
}

}  // namespace forge
