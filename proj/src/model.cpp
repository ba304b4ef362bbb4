#include "forge/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "forge/error.hpp"

namespace forge {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (n_layers == 0) fail("n_layers must be >= 1");
  if (d_model == 0 || n_heads == 0 || n_kv_heads == 0 || head_size == 0 || d_ff == 0 || vocab_size == 0)
    fail("dimensions must be >= 1");
  if (n_heads % n_kv_heads != 0)
    fail("n_heads (" + std::to_string(n_heads) + ") not divisible by n_kv_heads (" + std::to_string(n_kv_heads) + ")");
  if (head_size % 2 != 0) fail("head_size must be even for rotary embeddings");
  if (!(rope_theta > 1.0)) fail("rope_theta must be > 1");
  if (native_ctx == 0 || extended_ctx < native_ctx) fail("extended_ctx must be >= native_ctx >= 1");
  if (!(rmsnorm_eps >= 0.0)) fail("rmsnorm_eps must be >= 0");
}

std::string layer_param(std::size_t layer, std::string_view leaf) {
  return "layers." + std::to_string(layer) + "." + std::string(leaf);
}

std::map<std::string, Shape> param_shapes(const ModelConfig& c) {
  std::map<std::string, Shape> s;
  s["embed.tok"] = {c.vocab_size, c.d_model};
  s["final_norm.g"] = {c.d_model};
  s["lm_head"] = {c.d_model, c.vocab_size};
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    s[layer_param(l, "attn_norm.g")] = {c.d_model};
    s[layer_param(l, "attn.wq")] = {c.d_model, c.q_width()};
    s[layer_param(l, "attn.wk")] = {c.d_model, c.kv_width()};
    s[layer_param(l, "attn.wv")] = {c.d_model, c.kv_width()};
    s[layer_param(l, "attn.wo")] = {c.q_width(), c.d_model};
    s[layer_param(l, "ffn_norm.g")] = {c.d_model};
    s[layer_param(l, "ffn.w_gate")] = {c.d_model, c.d_ff};
    s[layer_param(l, "ffn.w_up")] = {c.d_model, c.d_ff};
    s[layer_param(l, "ffn.w_down")] = {c.d_ff, c.d_model};
  }
  return s;
}

std::size_t param_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  const std::size_t per_layer = 2 * d + d * c.q_width() + 2 * d * c.kv_width() + c.q_width() * d + 3 * d * c.d_ff;
  return 2 * c.vocab_size * d + d + c.n_layers * per_layer;
}

void Checkpoint::validate() const {
  const auto expected = param_shapes(config);
  for (const auto& [name, shape] : expected) {
    auto it = params.find(name);
    if (it == params.end()) throw DataError("checkpoint: missing tensor '" + name + "'");
    if (it->second.shape() != shape) {
      throw DataError("checkpoint: tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                      ", config implies " + shape_str(shape));
    }
    if (!it->second.all_finite()) throw DataError("checkpoint: tensor '" + name + "' has non-finite values");
  }
  for (const auto& [name, t] : params) {
    if (!expected.contains(name)) throw DataError("checkpoint: unexpected tensor '" + name + "'");
  }
}

std::size_t Checkpoint::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params) n += t.numel();
  return n;
}

template <typename T>
VarMap<T> bind_params(Graph<T>& g, const std::map<std::string, Tensor<T>>& params, bool requires_grad) {
  VarMap<T> vars;
  for (const auto& [name, t] : params) vars.emplace(name, g.leaf(t, requires_grad));
  return vars;
}

template <typename T>
std::map<std::string, Tensor<T>> cast_params(const ParamMap& params) {
  std::map<std::string, Tensor<T>> out;
  for (const auto& [name, t] : params) out.emplace(name, t.template cast<T>());
  return out;
}

template <typename T>
Var<T> rms_norm(const Var<T>& x, const Var<T>& gain, T eps) {
  const auto& xs = x.shape();
  if (xs.empty() || gain.shape() != Shape{xs.back()}) {
    throw ShapeError("rms_norm: input " + shape_str(xs) + " with gain " + shape_str(gain.shape()));
  }
  const auto ms = mean(x * x, -1);
  return x / sqrt(ms + eps) * gain;
}

template <typename T>
Var<T> swiglu_ffn(const Var<T>& x, const Var<T>& w_gate, const Var<T>& w_up, const Var<T>& w_down) {
  if (w_gate.shape() != w_up.shape()) {
    throw ShapeError("swiglu_ffn: gate " + shape_str(w_gate.shape()) + " vs up " + shape_str(w_up.shape()));
  }
  return matmul(silu(matmul(x, w_gate)) * matmul(x, w_up), w_down);
}

std::vector<double> rope_inv_frequencies(std::size_t head_size, double theta, const std::optional<YarnParams>& yarn) {
  if (head_size == 0 || head_size % 2 != 0) {
    throw ShapeError("rope: head_size must be even, got " + std::to_string(head_size));
  }
  const std::size_t half = head_size / 2;
  std::vector<double> inv(half);
  for (std::size_t i = 0; i < half; ++i) {
    inv[i] = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_size));
  }
  if (!yarn || yarn->factor == 1.0) return inv;
  const double s = yarn->factor;
  for (auto& w : inv) {
    const double wavelength = 2.0 * std::numbers::pi / w;
    const double rotations = static_cast<double>(yarn->original_ctx) / wavelength;
    double gamma = (rotations - yarn->beta_slow) / (yarn->beta_fast - yarn->beta_slow);
    gamma = std::clamp(gamma, 0.0, 1.0);
    w = (1.0 - gamma) * (w / s) + gamma * w;
  }
  return inv;
}

RopeTables rope_frequencies(std::size_t head_size, double theta, std::span<const std::size_t> positions,
                            const std::optional<YarnParams>& yarn) {
  if (positions.empty()) throw ShapeError("rope: no positions");
  RopeTables t;
  t.inv_freq = rope_inv_frequencies(head_size, theta, yarn);
  t.half = head_size / 2;
  t.positions = positions.size();
  t.cos = Tensor<double>(Shape{t.positions, t.half});
  t.sin = Tensor<double>(Shape{t.positions, t.half});
  for (std::size_t p = 0; p < t.positions; ++p) {
    for (std::size_t i = 0; i < t.half; ++i) {
      const double angle = static_cast<double>(positions[p]) * t.inv_freq[i];
      t.cos[p * t.half + i] = std::cos(angle);
      t.sin[p * t.half + i] = std::sin(angle);
    }
  }
  if (yarn && yarn->factor > 1.0) t.attention_factor = 0.1 * std::log(yarn->factor) + 1.0;
  return t;
}

template <typename T>
Var<T> apply_rope(const Var<T>& x, const RopeTables& tables) {
  const auto& s = x.shape();
  if (s.size() != 2 || s[1] != 2 * tables.half || s[0] != tables.positions) {
    throw ShapeError("apply_rope: input " + shape_str(s) + " against tables [" + std::to_string(tables.positions) +
                     ", " + std::to_string(2 * tables.half) + "]");
  }
  auto& g = x.graph();
  const std::size_t n = s[0], half = tables.half;
  const auto pairs = reshape(x, Shape{n, half, 2});
  const auto even = reshape(slice(pairs, 2, 0, 1), Shape{n, half});
  const auto odd = reshape(slice(pairs, 2, 1, 2), Shape{n, half});
  Tensor<T> c(Shape{n, half}), sn(Shape{n, half});
  for (std::size_t i = 0; i < c.numel(); ++i) {
    c[i] = static_cast<T>(tables.cos[i] * tables.attention_factor);
    sn[i] = static_cast<T>(tables.sin[i] * tables.attention_factor);
  }
  const auto cv = g.constant(std::move(c));
  const auto sv = g.constant(std::move(sn));
  const auto re = even * cv - odd * sv;
  const auto ro = even * sv + odd * cv;
  const std::vector<Var<T>> parts{reshape(re, Shape{n, half, 1}), reshape(ro, Shape{n, half, 1})};
  return reshape(concat<T>(parts, 2), Shape{n, 2 * half});
}

template <typename T>
std::pair<Var<T>, Var<T>> apply_rope(const Var<T>& q, const Var<T>& k, const RopeTables& tables) {
  return {apply_rope(q, tables), apply_rope(k, tables)};
}

Mask causal_mask(std::size_t length, std::span<const std::int32_t> segments) {
  if (!segments.empty() && segments.size() != length) {
    throw ShapeError("causal_mask: " + std::to_string(segments.size()) + " segment ids for length " +
                     std::to_string(length));
  }
  Mask m(Shape{length, length}, 0);
  for (std::size_t i = 0; i < length; ++i)
    for (std::size_t j = 0; j <= i; ++j)
      m[i * length + j] = segments.empty() || segments[i] == segments[j];
  return m;
}

template <typename T>
Var<T> gqa_attention(const Var<T>& x, const AttentionWeights<T>& w, const Mask& mask, const ModelConfig& cfg,
                     const RopeTables& rope, std::vector<Tensor<T>>* probs_out) {
  if (cfg.n_kv_heads == 0 || cfg.n_heads % cfg.n_kv_heads != 0) {
    throw ShapeError("gqa_attention: n_heads " + std::to_string(cfg.n_heads) + " not divisible by n_kv_heads " +
                     std::to_string(cfg.n_kv_heads));
  }
  const std::size_t n = x.shape().at(0);
  if (mask.shape() != Shape{n, n}) {
    throw ShapeError("gqa_attention: mask " + shape_str(mask.shape()) + " for sequence length " + std::to_string(n));
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (mask[i * n + j]) throw ShapeError("gqa_attention: mask allows attention to a future position");

  auto& g = x.graph();
  const std::size_t hs = cfg.head_size;
  const auto q = matmul(x, w.wq);
  const auto k = matmul(x, w.wk);
  const auto v = matmul(x, w.wv);
  const T score_scale = T(1) / std::sqrt(static_cast<T>(hs));
  const auto blocked = g.constant(masked_score<T>());

  std::vector<Var<T>> keys, values;
  for (std::size_t j = 0; j < cfg.n_kv_heads; ++j) {
    keys.push_back(transpose(apply_rope(slice(k, 1, j * hs, (j + 1) * hs), rope)));
    values.push_back(slice(v, 1, j * hs, (j + 1) * hs));
  }
  std::vector<Var<T>> heads;
  const std::size_t group = cfg.kv_group();
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const auto qh = apply_rope(slice(q, 1, h * hs, (h + 1) * hs), rope);
    const auto scores = scale(matmul(qh, keys[h / group]), score_scale);
    const auto probs = softmax(where(mask, scores, blocked), 1);
    if (probs_out) probs_out->push_back(probs.value());
    heads.push_back(matmul(probs, values[h / group]));
  }
  return matmul(concat<T>(heads, 1), w.wo);
}

template <typename T>
Var<T> forward(Graph<T>& g, const ModelConfig& cfg, const VarMap<T>& params, std::span<const TokenId> tokens,
               const ForwardOptions& opts) {
  if (tokens.empty()) throw ShapeError("forward: empty token sequence");
  for (auto t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
      throw DataError("forward: token id " + std::to_string(t) + " outside vocabulary of " +
                      std::to_string(cfg.vocab_size));
    }
  }
  const std::size_t n = tokens.size();
  std::vector<std::size_t> default_pos;
  std::span<const std::size_t> positions = opts.positions;
  if (positions.empty()) {
    default_pos.resize(n);
    for (std::size_t i = 0; i < n; ++i) default_pos[i] = i;
    positions = default_pos;
  }
  if (positions.size() != n) throw ShapeError("forward: positions length does not match tokens");

  std::optional<YarnParams> yarn;
  if (cfg.use_yarn) yarn = YarnParams{cfg.yarn_factor(), cfg.native_ctx};
  const RopeTables rope = rope_frequencies(cfg.head_size, cfg.rope_theta, positions, yarn);
  const Mask mask = causal_mask(n, opts.segment_ids);
  const T eps = static_cast<T>(cfg.rmsnorm_eps);

  auto p = [&](const std::string& name) -> const Var<T>& {
    auto it = params.find(name);
    if (it == params.end()) throw DataError("forward: missing parameter '" + name + "'");
    return it->second;
  };

  auto x = gather_rows(p("embed.tok"), tokens);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const AttentionWeights<T> aw{p(layer_param(l, "attn.wq")), p(layer_param(l, "attn.wk")),
                                 p(layer_param(l, "attn.wv")), p(layer_param(l, "attn.wo"))};
    x = x + gqa_attention(rms_norm(x, p(layer_param(l, "attn_norm.g")), eps), aw, mask, cfg, rope);
    const auto h = rms_norm(x, p(layer_param(l, "ffn_norm.g")), eps);
    x = x + swiglu_ffn(h, p(layer_param(l, "ffn.w_gate")), p(layer_param(l, "ffn.w_up")), p(layer_param(l, "ffn.w_down")));
  }
  return matmul(rms_norm(x, p("final_norm.g"), eps), p("lm_head"));
}

template <typename T>
Tensor<T> forward_logits(const Checkpoint& ckpt, std::span<const TokenId> tokens, const ForwardOptions& opts) {
  Graph<T> g;
  const auto params = bind_params(g, cast_params<T>(ckpt.params), false);
  return forward(g, ckpt.config, params, tokens, opts).value();
}

#define FORGE_INSTANTIATE(T)                                                                                  \
  template VarMap<T> bind_params(Graph<T>&, const std::map<std::string, Tensor<T>>&, bool);                 \
  template std::map<std::string, Tensor<T>> cast_params<T>(const ParamMap&);                                \
  template Var<T> rms_norm(const Var<T>&, const Var<T>&, T);                                                 \
  template Var<T> swiglu_ffn(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&);                    \
  template Var<T> apply_rope(const Var<T>&, const RopeTables&);                                              \
  template std::pair<Var<T>, Var<T>> apply_rope(const Var<T>&, const Var<T>&, const RopeTables&);            \
  template Var<T> gqa_attention(const Var<T>&, const AttentionWeights<T>&, const Mask&, const ModelConfig&,  \
                                const RopeTables&, std::vector<Tensor<T>>*);                                 \
  template Var<T> forward(Graph<T>&, const ModelConfig&, const VarMap<T>&, std::span<const TokenId>,          \
                          const ForwardOptions&);                                                            \
  template Tensor<T> forward_logits<T>(const Checkpoint&, std::span<const TokenId>, const ForwardOptions&);

FORGE_INSTANTIATE(float)
FORGE_INSTANTIATE(double)

#undef FORGE_INSTANTIATE

}  // namespace forge
