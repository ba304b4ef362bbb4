#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "forge/model.hpp"

namespace forge {

/// Depth up-scaling: two copies of an n-layer stack joined after excising m layers
/// at the junction from each side, giving s = 2n - 2m layers.
struct UpscaleSpec {
  std::size_t n = 32;
  std::size_t m = 7;

  std::size_t s() const { return 2 * n - 2 * m; }
  /// Throws ConfigError unless 0 <= m < n.
  void validate() const;
};

/// Source layer for each output layer: [0 .. n-m-1] followed by [m .. n-1].
std::vector<std::size_t> upscale_layer_map(const UpscaleSpec& spec);

/// Builds the up-scaled checkpoint. Embeddings, final norm and head are copied once.
Checkpoint depth_upscale(const Checkpoint& ckpt, const UpscaleSpec& spec);

/// Element-wise weighted average Σ wᵢ·θᵢ / Σ wᵢ over checkpoints with identical
/// configs and tensor directories. Per element the terms are summed in sorted order,
/// so the result does not depend on the order of the inputs.
Checkpoint merge_checkpoints(std::span<const Checkpoint> ckpts, std::span<const double> weights);

/// Indices of the candidates sorted by descending score (stable for ties).
std::vector<std::size_t> rank_by_score(std::span<const double> scores);

/// All subsets of {0..k-1} with at least min_size members, smallest subsets first,
/// each subset in ascending index order.
std::vector<std::vector<std::size_t>> merge_combinations(std::size_t k, std::size_t min_size = 2);

}  // namespace forge
