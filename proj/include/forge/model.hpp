#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "forge/autograd.hpp"
#include "forge/tensor.hpp"

namespace forge {

/// Decoder hyperparameters. Defaults are the production 11B configuration.
struct ModelConfig {
  std::size_t n_layers = 50;
  std::size_t d_model = 4096;
  std::size_t n_heads = 32;
  std::size_t n_kv_heads = 8;
  std::size_t head_size = 128;
  std::size_t d_ff = 14336;
  std::size_t vocab_size = 32128;
  double rope_theta = 1e6;
  std::size_t native_ctx = 32768;
  std::size_t extended_ctx = 131072;
  bool use_yarn = false;
  double rmsnorm_eps = 1e-5;

  double yarn_factor() const { return static_cast<double>(extended_ctx) / static_cast<double>(native_ctx); }
  std::size_t kv_group() const { return n_heads / n_kv_heads; }
  std::size_t q_width() const { return n_heads * head_size; }
  std::size_t kv_width() const { return n_kv_heads * head_size; }

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

std::string layer_param(std::size_t layer, std::string_view leaf);

/// Every parameter the config implies, keyed by name (lexicographic order).
std::map<std::string, Shape> param_shapes(const ModelConfig& cfg);

/// Closed-form parameter count: 2·V·d + d + L·(2d + d·H·h + 2·d·K·h + H·h·d + 3·d·f).
std::size_t param_count(const ModelConfig& cfg);

using ParamMap = std::map<std::string, Tensor<float>>;

/// Name-indexed parameter tensors plus the config they were built for.
struct Checkpoint {
  ModelConfig config;
  ParamMap params;

  /// Checks the tensor directory against the config (exact name set, shapes) and
  /// that every value is finite. Throws DataError.
  void validate() const;
  std::size_t parameter_count() const;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

template <typename T>
using VarMap = std::map<std::string, Var<T>>;

/// Records every tensor of params as a leaf of g.
template <typename T>
VarMap<T> bind_params(Graph<T>& g, const std::map<std::string, Tensor<T>>& params, bool requires_grad);

template <typename T>
std::map<std::string, Tensor<T>> cast_params(const ParamMap& params);

// ---- building blocks ------------------------------------------------------

/// y = x / sqrt(mean(x²) + eps) ⊙ g over the last dimension.
template <typename T>
Var<T> rms_norm(const Var<T>& x, const Var<T>& gain, T eps);

/// (silu(x·W_gate) ⊙ (x·W_up)) · W_down
template <typename T>
Var<T> swiglu_ffn(const Var<T>& x, const Var<T>& w_gate, const Var<T>& w_up, const Var<T>& w_down);

/// NTK-by-parts interpolation settings. Ramp bounds are in rotations per original
/// context: dimensions that rotate fewer than beta_slow times are fully interpolated,
/// more than beta_fast times are left untouched.
struct YarnParams {
  double factor = 4.0;
  std::size_t original_ctx = 32768;
  double beta_fast = 32.0;
  double beta_slow = 1.0;
};

struct RopeTables {
  std::size_t positions = 0;
  std::size_t half = 0;
  std::vector<double> inv_freq;  // length half
  Tensor<double> cos;            // [positions × half]
  Tensor<double> sin;
  /// Multiplier applied to rotated q and k (1 without YaRN, 0.1·ln(s) + 1 with it).
  double attention_factor = 1.0;
};

std::vector<double> rope_inv_frequencies(std::size_t head_size, double theta,
                                         const std::optional<YarnParams>& yarn = std::nullopt);

RopeTables rope_frequencies(std::size_t head_size, double theta, std::span<const std::size_t> positions,
                            const std::optional<YarnParams>& yarn = std::nullopt);

/// Rotates each (even, odd) channel pair of x [T × head_size] by its position angle.
template <typename T>
Var<T> apply_rope(const Var<T>& x, const RopeTables& tables);

template <typename T>
std::pair<Var<T>, Var<T>> apply_rope(const Var<T>& q, const Var<T>& k, const RopeTables& tables);

template <typename T>
struct AttentionWeights {
  Var<T> wq, wk, wv, wo;
};

/// Value used in place of -inf for disallowed attention scores.
template <typename T>
constexpr T masked_score() {
  if constexpr (sizeof(T) >= 8) return T(-1e30);
  else return T(-1e9);
}

/// Causal self-attention with grouped key/value heads.
///
/// mask is T×T with mask[i·T + j] != 0 meaning query i may attend to key j; it must
/// never allow j > i. When probs_out is given it receives the per-head attention
/// weight matrices.
template <typename T>
Var<T> gqa_attention(const Var<T>& x, const AttentionWeights<T>& w, const Mask& mask, const ModelConfig& cfg,
                     const RopeTables& rope, std::vector<Tensor<T>>* probs_out = nullptr);

/// allow(i, j) ⇔ segment[i] == segment[j] ∧ j ≤ i. Empty segments means one segment.
Mask causal_mask(std::size_t length, std::span<const std::int32_t> segments = {});

struct ForwardOptions {
  std::span<const std::int32_t> segment_ids;  // default: single segment
  std::span<const std::size_t> positions;     // default: 0..T-1
};

/// Pre-norm decoder forward pass; returns logits [T × vocab].
template <typename T>
Var<T> forward(Graph<T>& g, const ModelConfig& cfg, const VarMap<T>& params, std::span<const TokenId> tokens,
               const ForwardOptions& opts = {});

/// Gradient-free forward over a checkpoint.
template <typename T>
Tensor<T> forward_logits(const Checkpoint& ckpt, std::span<const TokenId> tokens, const ForwardOptions& opts = {});

}  // namespace forge
