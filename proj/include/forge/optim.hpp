#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "forge/tensor.hpp"

namespace forge {

enum class ScheduleShape { cosine, constant };

/// Linear warm-up to peak_lr over warmup_steps, then cosine decay to min_lr at
/// total_steps, or a constant peak_lr.
struct ScheduleSpec {
  double peak_lr = 1e-3;
  double min_lr = 0.0;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
  ScheduleShape shape = ScheduleShape::constant;

  /// Throws ConfigError unless 0 <= min_lr <= peak_lr and warmup_steps <= total_steps.
  void validate() const;
};

/// step < warmup: peak·(step+1)/warmup. After warm-up, cosine gives
/// min + ½(peak−min)(1 + cos(π·(step−warmup)/(total−warmup))), constant gives peak.
/// Throws ConfigError for step > total_steps.
double lr_at(const ScheduleSpec& spec, std::size_t step);

using TensorMap = std::map<std::string, Tensor<double>>;

double global_grad_norm(const TensorMap& grads);

/// Scales every gradient by max_norm/norm when the global L2 norm exceeds max_norm.
/// Returns the norm before clipping. Throws NumericError naming the first parameter
/// with a non-finite gradient.
double clip_grad_norm(TensorMap& grads, double max_norm = 1.0);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct OptimizerState {
  TensorMap m;
  TensorMap v;
  std::size_t t = 0;
};

/// One decoupled-decay Adam update of every parameter that has a gradient:
///   θ ← θ − lr·m̂/(√v̂ + eps) − lr·λ·θ
/// Parameters without an entry in grads are left untouched. Throws ShapeError when a
/// gradient does not match its parameter.
void adamw_step(TensorMap& params, const TensorMap& grads, OptimizerState& state, double lr, const AdamWConfig& cfg);

}  // namespace forge
