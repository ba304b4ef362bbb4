#pragma once

#include <filesystem>
#include <string>

#include "forge/model.hpp"
#include "forge/rng.hpp"

namespace forge {

inline constexpr int kCheckpointFormatVersion = 1;

/// Writes the checkpoint file:
///
///   line 1   "FORGE-CKPT"
///   line 2   decimal byte length N of the manifest
///   N bytes  manifest (JSON, keys sorted): format_version, config, and the tensor
///            directory as [{name, shape, offset, length}] in lexicographic name order
///   payload  little-endian IEEE-754 float32 values, tensors in directory order,
///            offsets in bytes from the start of the payload
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

/// Reads and validates a checkpoint file. Throws DataError on any format violation.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Fresh weights: normal(0, init_std) for embeddings and projections, ones for norm gains.
Checkpoint init_checkpoint(const ModelConfig& cfg, Rng& rng, double init_std = 0.02);

}  // namespace forge
