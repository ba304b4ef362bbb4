#include "forge/chat.hpp"
#include "forge/error.hpp"

namespace forge {

std::vector<PackedBatch> pack_samples(std::span<const TrainSequence> samples, std::size_t max_len) {
  if (max_len == 0) throw ConfigError("pack: max_len must be >= 1");
  std::vector<PackedBatch> out;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const auto& s = samples[k];
    if (s.ids.empty()) throw DataError("pack: sample " + std::to_string(k) + " is empty");
    if (s.loss_mask.size() != s.ids.size()) throw DataError("pack: sample " + std::to_string(k) + " mask length differs");
    if (s.ids.size() > max_len) {
      throw DataError("pack: sample " + std::to_string(k) + " has " + std::to_string(s.ids.size()) +
                      " tokens, over max_len " + std::to_string(max_len));
    }
    if (out.empty() || out.back().size() + s.ids.size() > max_len) out.emplace_back();
    auto& b = out.back();
    const auto seg = static_cast<std::int32_t>(b.num_segments());
    for (std::size_t i = 0; i < s.ids.size(); ++i) {
      b.token_ids.push_back(s.ids[i]);
      b.segment_ids.push_back(seg);
      b.loss_mask.push_back(s.loss_mask[i]);
      b.positions.push_back(i);
    }
  }
  return out;
}

std::vector<std::uint8_t> build_attention_mask(std::span<const std::int32_t> segment_ids) {
  const std::size_t n = segment_ids.size();
  std::vector<std::uint8_t> m(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m[i * n + j] = segment_ids[i] == segment_ids[j];
  return m;
}

}  // namespace forge
