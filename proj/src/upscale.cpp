#include "forge/upscale.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "forge/error.hpp"

namespace forge {

void UpscaleSpec::validate() const {
  if (n == 0) throw ConfigError("upscale: n must be >= 1");
  if (m >= n) {
    throw ConfigError("upscale: m (" + std::to_string(m) + ") must be smaller than n (" + std::to_string(n) + ")");
  }
}

std::vector<std::size_t> upscale_layer_map(const UpscaleSpec& spec) {
  spec.validate();
  std::vector<std::size_t> map;
  map.reserve(spec.s());
  for (std::size_t i = 0; i < spec.n - spec.m; ++i) map.push_back(i);
  for (std::size_t i = spec.m; i < spec.n; ++i) map.push_back(i);
  return map;
}

Checkpoint depth_upscale(const Checkpoint& ckpt, const UpscaleSpec& spec) {
  spec.validate();
  if (ckpt.config.n_layers != spec.n) {
    throw DataError("upscale: checkpoint has " + std::to_string(ckpt.config.n_layers) + " layers, expected n = " +
                    std::to_string(spec.n));
  }
  ckpt.validate();
  const auto map = upscale_layer_map(spec);

  Checkpoint out;
  out.config = ckpt.config;
  out.config.n_layers = map.size();
  const std::string prefix = "layers.";
  for (const auto& [name, t] : ckpt.params) {
    if (!name.starts_with(prefix)) out.params.emplace(name, t);
  }
  for (std::size_t dst = 0; dst < map.size(); ++dst) {
    const std::string src_prefix = prefix + std::to_string(map[dst]) + ".";
    for (auto it = ckpt.params.lower_bound(src_prefix); it != ckpt.params.end() && it->first.starts_with(src_prefix);
         ++it) {
      out.params.emplace(layer_param(dst, it->first.substr(src_prefix.size())), it->second);
    }
  }
  out.validate();
  return out;
}

Checkpoint merge_checkpoints(std::span<const Checkpoint> ckpts, std::span<const double> weights) {
  if (ckpts.size() < 2) throw DataError("merge: need at least two checkpoints");
  if (weights.size() != ckpts.size()) {
    throw DataError("merge: " + std::to_string(weights.size()) + " weights for " + std::to_string(ckpts.size()) +
                    " checkpoints");
  }
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw DataError("merge: weights must be finite and non-negative");
  }
  std::vector<double> sorted_w(weights.begin(), weights.end());
  std::sort(sorted_w.begin(), sorted_w.end());
  const double total = std::accumulate(sorted_w.begin(), sorted_w.end(), 0.0);
  if (total <= 0.0) throw DataError("merge: all weights are zero");

  const Checkpoint& base = ckpts[0];
  for (std::size_t c = 1; c < ckpts.size(); ++c) {
    if (!(ckpts[c].config == base.config)) throw DataError("merge: checkpoint " + std::to_string(c) + " has a different config");
    if (ckpts[c].params.size() != base.params.size()) throw DataError("merge: tensor directories differ in size");
    for (const auto& [name, t] : base.params) {
      auto it = ckpts[c].params.find(name);
      if (it == ckpts[c].params.end()) throw DataError("merge: checkpoint " + std::to_string(c) + " lacks '" + name + "'");
      if (it->second.shape() != t.shape()) {
        throw DataError("merge: shape mismatch for '" + name + "': " + shape_str(t.shape()) + " vs " +
                        shape_str(it->second.shape()));
      }
    }
  }

  Checkpoint out;
  out.config = base.config;
  std::vector<const Tensor<float>*> sources(ckpts.size());
  std::vector<double> terms(ckpts.size());
  for (const auto& [name, t] : base.params) {
    for (std::size_t c = 0; c < ckpts.size(); ++c) sources[c] = &ckpts[c].params.at(name);
    Tensor<float> merged(t.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) {
      for (std::size_t c = 0; c < ckpts.size(); ++c) terms[c] = weights[c] * static_cast<double>((*sources[c])[i]);
      std::sort(terms.begin(), terms.end());
      const double acc = std::accumulate(terms.begin(), terms.end(), 0.0);
      merged[i] = static_cast<float>(acc / total);
    }
    out.params.emplace(name, std::move(merged));
  }
  return out;
}

std::vector<std::size_t> rank_by_score(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

std::vector<std::vector<std::size_t>> merge_combinations(std::size_t k, std::size_t min_size) {
  std::vector<std::vector<std::size_t>> out;
  if (k > 20) throw ConfigError("merge: too many candidates to enumerate (" + std::to_string(k) + ")");
  for (std::size_t size = std::max<std::size_t>(min_size, 1); size <= k; ++size) {
    // Lexicographic enumeration of size-subsets.
    std::vector<std::size_t> pick(size);
    std::iota(pick.begin(), pick.end(), 0);
    while (true) {
      out.push_back(pick);
      std::size_t i = size;
      while (i > 0 && pick[i - 1] == k - size + i - 1) --i;
      if (i == 0) break;
      ++pick[i - 1];
      for (std::size_t j = i; j < size; ++j) pick[j] = pick[j - 1] + 1;
    }
  }
  return out;
}

}  // namespace forge
