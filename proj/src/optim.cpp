#include "forge/optim.hpp"

#include <cmath>
#include <numbers>

#include "forge/error.hpp"

namespace forge {

void ScheduleSpec::validate() const {
  if (!(min_lr >= 0.0) || !(peak_lr >= min_lr) || !std::isfinite(peak_lr)) {
    throw ConfigError("schedule: need 0 <= min_lr <= peak_lr");
  }
  if (warmup_steps > total_steps) {
    throw ConfigError("schedule: warmup_steps (" + std::to_string(warmup_steps) + ") exceeds total_steps (" +
                      std::to_string(total_steps) + ")");
  }
}

double lr_at(const ScheduleSpec& s, std::size_t step) {
  if (step > s.total_steps) {
    throw ConfigError("schedule: step " + std::to_string(step) + " beyond total_steps " + std::to_string(s.total_steps));
  }
  if (step < s.warmup_steps) {
    return s.peak_lr * static_cast<double>(step + 1) / static_cast<double>(s.warmup_steps);
  }
  if (s.shape == ScheduleShape::constant || s.total_steps == s.warmup_steps) return s.peak_lr;
  const double progress =
      static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
  return s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

double global_grad_norm(const TensorMap& grads) {
  double sq = 0;
  for (const auto& [name, g] : grads) {
    for (double v : g.data()) {
      if (!std::isfinite(v)) throw NumericError("non-finite gradient in parameter '" + name + "'");
      sq += v * v;
    }
  }
  return std::sqrt(sq);
}

double clip_grad_norm(TensorMap& grads, double max_norm) {
  if (!(max_norm > 0)) throw ConfigError("clip_grad_norm: max_norm must be > 0");
  const double norm = global_grad_norm(grads);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& [_, g] : grads)
      for (auto& v : g.data()) v *= scale;
  }
  return norm;
}

void adamw_step(TensorMap& params, const TensorMap& grads, OptimizerState& st, double lr, const AdamWConfig& cfg) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw ShapeError("adamw: gradient for unknown parameter '" + name + "'");
    if (it->second.shape() != g.shape()) {
      throw ShapeError("adamw: gradient " + shape_str(g.shape()) + " for parameter '" + name + "' of shape " +
                       shape_str(it->second.shape()));
    }
  }
  ++st.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (const auto& [name, g] : grads) {
    auto& theta = params.at(name);
    auto& m = st.m.try_emplace(name, g.shape()).first->second;
    auto& v = st.v.try_emplace(name, g.shape()).first->second;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      theta[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps) + lr * cfg.weight_decay * theta[i];
    }
  }
}

}  // namespace forge
