#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <unistd.h>

#include "forge/checkpoint.hpp"
#include "forge/error.hpp"
#include "forge/trainer.hpp"
#include "support/gradcheck.hpp"
#include "support/toy.hpp"

using namespace forge;
using forge::testing::grad_check;
using forge::testing::random_tensor;

namespace {

using V = Var<double>;
const double kLn2 = std::log(2.0);

double softplus_ref(double x) { return std::log1p(std::exp(x)); }

Tensor<double> vec(std::vector<double> v) { return Tensor<double>::vector(std::move(v)); }

// ---- schedule ---------------------------------------------------------------

ScheduleSpec pretrain_schedule() {
  ScheduleSpec s;
  s.peak_lr = 2.5e-5;
  s.min_lr = 9e-6;
  s.warmup_steps = 50;
  s.total_steps = 1000;
  s.shape = ScheduleShape::cosine;
  return s;
}

TEST(Schedule, CosineEndpoints) {
  const auto s = pretrain_schedule();
  EXPECT_NEAR(lr_at(s, 50), 2.5e-5, 1e-12);
  EXPECT_NEAR(lr_at(s, 1000), 9e-6, 1e-12);
  EXPECT_NEAR(lr_at(s, 525), 1.7e-5, 1e-12);
}

TEST(Schedule, WarmupIsLinearFromFirstStep) {
  const auto s = pretrain_schedule();
  EXPECT_NEAR(lr_at(s, 0), 2.5e-5 / 50, 1e-18);
  for (std::size_t k = 0; k + 1 < 50; ++k) EXPECT_NEAR(lr_at(s, k + 1) - lr_at(s, k), 2.5e-5 / 50, 1e-18);
  EXPECT_LE(std::abs(lr_at(s, 49) - lr_at(s, 50)), s.peak_lr / 50 + 1e-12);
}

TEST(Schedule, CosineIsMonotoneAfterWarmup) {
  const auto s = pretrain_schedule();
  for (std::size_t k = 50; k < 1000; ++k) EXPECT_LE(lr_at(s, k + 1), lr_at(s, k) + 1e-18);
}

TEST(Schedule, ConstantShape) {
  ScheduleSpec s;
  s.peak_lr = 5e-6;
  s.warmup_steps = 100;
  s.total_steps = 300;
  EXPECT_NEAR(lr_at(s, 99), 5e-6, 1e-18);
  EXPECT_EQ(lr_at(s, 100), 5e-6);
  EXPECT_EQ(lr_at(s, 300), 5e-6);
}

TEST(Schedule, Errors) {
  auto s = pretrain_schedule();
  EXPECT_THROW(lr_at(s, 1001), ConfigError);
  s.warmup_steps = 2000;
  EXPECT_THROW(s.validate(), ConfigError);
  s = pretrain_schedule();
  s.min_lr = 1e-4;
  EXPECT_THROW(s.validate(), ConfigError);
  s.min_lr = -1;
  EXPECT_THROW(s.validate(), ConfigError);
}

// ---- clipping and AdamW -------------------------------------------------------

TEST(ClipGradNorm, HalvesAboveThreshold) {
  TensorMap g{{"a", vec({1.2, 0})}, {"b", vec({0, 1.6})}};
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, 1.0), 2.0);
  EXPECT_DOUBLE_EQ(g.at("a")[0], 0.6);
  EXPECT_DOUBLE_EQ(g.at("b")[1], 0.8);
}

TEST(ClipGradNorm, UnchangedBelowThreshold) {
  TensorMap g{{"a", vec({0.3, -0.4})}};
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, 1.0), 0.5);
  EXPECT_EQ(g.at("a")[0], 0.3);
  EXPECT_EQ(g.at("a")[1], -0.4);
}

TEST(ClipGradNorm, PostClipNormProperty) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    TensorMap g{{"x", random_tensor(rng, {3, 4}, -2, 2)}, {"y", random_tensor(rng, {5}, -2, 2)}};
    const double max_norm = 0.1 + 4 * rng.uniform();
    const double before = clip_grad_norm(g, max_norm);
    EXPECT_NEAR(global_grad_norm(g), std::min(before, max_norm), 1e-9);
  }
}

TEST(ClipGradNorm, NonFiniteNamesParameter) {
  TensorMap g{{"layers.0.attn.wq", vec({1, NAN})}};
  try {
    clip_grad_norm(g, 1.0);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layers.0.attn.wq"), std::string::npos);
  }
  EXPECT_THROW(clip_grad_norm(g, 0.0), ConfigError);
}

TEST(AdamW, FirstStepHandEvaluation) {
  TensorMap p{{"w", vec({1.0})}};
  OptimizerState st;
  AdamWConfig cfg;
  adamw_step(p, {{"w", vec({1.0})}}, st, 0.1, cfg);
  EXPECT_EQ(st.t, 1u);
  EXPECT_NEAR(st.m.at("w")[0] / (1 - 0.9), 1.0, 1e-12);
  EXPECT_NEAR(st.v.at("w")[0] / (1 - 0.95), 1.0, 1e-12);
  EXPECT_NEAR(p.at("w")[0], 0.9, 1e-8);
}

TEST(AdamW, ZeroGradientLeavesParameters) {
  TensorMap p{{"w", vec({1.0, -2.0})}};
  OptimizerState st;
  adamw_step(p, {{"w", vec({0, 0})}}, st, 0.1, AdamWConfig{});
  EXPECT_EQ(p.at("w")[0], 1.0);
  EXPECT_EQ(p.at("w")[1], -2.0);
}

TEST(AdamW, DecoupledDecayOnly) {
  TensorMap p{{"w", vec({1.0})}};
  OptimizerState st;
  AdamWConfig cfg;
  cfg.weight_decay = 0.1;
  adamw_step(p, {{"w", vec({0})}}, st, 0.1, cfg);
  EXPECT_NEAR(p.at("w")[0], 0.99, 1e-15);
}

// Scalar re-implementation of the update rule over several steps.
TEST(AdamW, MatchesScalarRecurrence) {
  Rng rng(5);
  TensorMap p{{"w", random_tensor(rng, {6})}};
  std::vector<double> theta(p.at("w").data().begin(), p.at("w").data().end()), m(6, 0), v(6, 0);
  OptimizerState st;
  AdamWConfig cfg;
  cfg.weight_decay = 0.05;
  for (int t = 1; t <= 20; ++t) {
    const auto g = random_tensor(rng, {6});
    const double lr = 1e-2 / t;
    adamw_step(p, {{"w", g}}, st, lr, cfg);
    for (int i = 0; i < 6; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.95 * v[i] + 0.05 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.95, t));
      theta[i] = theta[i] - lr * mh / (std::sqrt(vh) + 1e-8) - lr * 0.05 * theta[i];
    }
  }
  for (int i = 0; i < 6; ++i) {
    EXPECT_NEAR(p.at("w")[i], theta[i], 1e-13);
    EXPECT_GE(st.v.at("w")[i], 0.0);
  }
  EXPECT_EQ(st.t, 20u);
}

TEST(AdamW, ShapeMismatch) {
  TensorMap p{{"w", vec({1.0, 2.0})}};
  OptimizerState st;
  EXPECT_THROW(adamw_step(p, {{"w", vec({1.0})}}, st, 0.1, AdamWConfig{}), ShapeError);
  EXPECT_THROW(adamw_step(p, {{"u", vec({1.0, 1.0})}}, st, 0.1, AdamWConfig{}), ShapeError);
  EXPECT_EQ(st.t, 0u);
}

// ---- SFT loss -------------------------------------------------------------------

TEST(SftLoss, UniformLogitsGiveLnV) {
  Graph<double> g;
  const auto logits = g.leaf(Tensor<double>(Shape{4, 7}, 0.3), false);
  const std::vector<TokenId> targets{0, 3, 6, 2};
  const std::vector<std::uint8_t> mask{1, 1, 1, 1};
  EXPECT_NEAR(sft_loss(logits, targets, mask).value().item(), std::log(7.0), 1e-12);
}

TEST(SftLoss, ToyCaseIsLn2) {
  Graph<double> g;
  const auto logits = g.leaf(Tensor<double>(Shape{1, 3}, {0, 0, kLn2}), false);
  const std::vector<TokenId> targets{2};
  const std::vector<std::uint8_t> mask{1};
  EXPECT_NEAR(sft_loss(logits, targets, mask).value().item(), kLn2, 1e-12);
}

TEST(SftLoss, MaskedOutRowsHaveExactlyZeroGradient) {
  Rng rng(3);
  Graph<double> g;
  const auto logits = g.leaf(random_tensor(rng, {5, 6}, -3, 3));
  const std::vector<TokenId> targets{1, 2, 3, 4, 5};
  const std::vector<std::uint8_t> mask{0, 1, 0, 1, 0};
  const auto loss = sft_loss(logits, targets, mask);
  g.backward(loss);
  const auto& grad = g.grad(logits);
  for (std::size_t t : {0u, 2u, 4u})
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(grad[t * 6 + j], 0.0);
  double row_sum = 0;
  for (std::size_t j = 0; j < 6; ++j) row_sum += grad[6 + j];
  EXPECT_NEAR(row_sum, 0.0, 1e-12);
  EXPECT_NE(grad[6 + 2], 0.0);
}

TEST(SftLoss, MaskedOutRowsDoNotAffectValue) {
  Rng rng(4);
  auto a = random_tensor(rng, {3, 5});
  auto b = a;
  for (std::size_t j = 0; j < 5; ++j) b[j] = 100.0 * j;
  const std::vector<TokenId> targets{0, 1, 2};
  const std::vector<std::uint8_t> mask{0, 1, 1};
  Graph<double> g;
  EXPECT_EQ(sft_loss(g.leaf(a, false), targets, mask).value().item(), sft_loss(g.leaf(b, false), targets, mask).value().item());
}

TEST(SftLoss, Errors) {
  Graph<double> g;
  const auto logits = g.leaf(Tensor<double>(Shape{2, 3}), false);
  const std::vector<TokenId> targets{0, 1};
  EXPECT_THROW(sft_loss(logits, targets, std::vector<std::uint8_t>{0, 0}), DataError);
  EXPECT_THROW(sft_loss(logits, targets, std::vector<std::uint8_t>{1}), ShapeError);
  EXPECT_THROW(sft_loss(logits, std::vector<TokenId>{0, 3}, std::vector<std::uint8_t>{1, 1}), DataError);
}

TEST(TokenLogprobs, MatchesLogSoftmaxOracle) {
  Rng rng(8);
  const auto x = random_tensor(rng, {4, 5}, -2, 2);
  const std::vector<TokenId> targets{4, 0, 2, 2};
  Graph<double> g;
  const auto lp = token_logprobs(g.leaf(x, false), targets).value();
  ASSERT_EQ(lp.shape(), Shape{4});
  for (std::size_t t = 0; t < 4; ++t) {
    double z = 0;
    for (std::size_t j = 0; j < 5; ++j) z += std::exp(x[t * 5 + j]);
    EXPECT_NEAR(lp[t], x[t * 5 + targets[t]] - std::log(z), 1e-12);
  }
}

// ---- DPO / DPO-P --------------------------------------------------------------------

struct PrefValues {
  std::vector<double> pw, pl, rw, rl;
};

double dpo_value(const PrefValues& v, double beta, double lambda) {
  Graph<double> g;
  PreferenceLogps<double> lp{g.leaf(vec(v.pw), false), g.leaf(vec(v.pl), false), g.leaf(vec(v.rw), false),
                             g.leaf(vec(v.rl), false)};
  return dpop_loss(lp, beta, lambda).value().item();
}

double plain_dpo(const PrefValues& v, double beta) {
  Graph<double> g;
  PreferenceLogps<double> lp{g.leaf(vec(v.pw), false), g.leaf(vec(v.pl), false), g.leaf(vec(v.rw), false),
                             g.leaf(vec(v.rl), false)};
  return dpo_loss(lp, beta).value().item();
}

TEST(Dpo, EqualPoliciesGiveLn2) {
  const PrefValues v{{-3.0, -7.5}, {-4.0, -1.25}, {-3.0, -7.5}, {-4.0, -1.25}};
  EXPECT_NEAR(plain_dpo(v, 0.1), kLn2, 1e-12);
}

TEST(Dpo, ScalarExample) {
  // Δw = +1, Δl = −1.
  const PrefValues v{{-2.0}, {-6.0}, {-3.0}, {-5.0}};
  const double got = plain_dpo(v, 0.1);
  EXPECT_NEAR(got, softplus_ref(-0.2), 1e-12);
  EXPECT_NEAR(got, 0.59814, 5e-6);
}

TEST(Dpo, MonotoneInMargin) {
  double prev = INFINITY;
  for (int k = -20; k <= 20; ++k) {
    const double dw = 0.25 * k;
    const double cur = plain_dpo({{dw - 5}, {-5}, {-5}, {-5}}, 0.1);
    EXPECT_LT(cur, prev);
    prev = cur;
  }
}

TEST(Dpo, ShiftInvariance) {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    PrefValues v;
    for (int i = 0; i < 3; ++i) {
      v.pw.push_back(-10 * rng.uniform());
      v.pl.push_back(-10 * rng.uniform());
      v.rw.push_back(-10 * rng.uniform());
      v.rl.push_back(-10 * rng.uniform());
    }
    auto shifted = v;
    const double cw = -5 * rng.uniform(), cl = 3 * rng.uniform();
    for (int i = 0; i < 3; ++i) {
      shifted.pw[i] += cw;
      shifted.rw[i] += cw;
      shifted.pl[i] += cl;
      shifted.rl[i] += cl;
    }
    EXPECT_NEAR(plain_dpo(v, 0.1), plain_dpo(shifted, 0.1), 1e-12);
  }
}

TEST(Dpop, LambdaZeroEqualsDpoExactly) {
  Rng rng(22);
  for (int trial = 0; trial < 50; ++trial) {
    PrefValues v{{-9 * rng.uniform()}, {-9 * rng.uniform()}, {-9 * rng.uniform()}, {-9 * rng.uniform()}};
    EXPECT_EQ(dpo_value(v, 0.1, 0.0), plain_dpo(v, 0.1));
  }
}

TEST(Dpop, HingeInactiveWhenChosenGainedMass) {
  const PrefValues v{{-2.0, -1.0}, {-6.0, -3.0}, {-3.0, -1.0}, {-5.0, -2.0}};
  EXPECT_EQ(dpo_value(v, 0.1, 5.0), plain_dpo(v, 0.1));
}

TEST(Dpop, ScalarExample) {
  // Δw = Δl = −0.5, hinge 0.5.
  const PrefValues v{{-3.5}, {-4.5}, {-3.0}, {-4.0}};
  const double got = dpo_value(v, 0.1, 5.0);
  EXPECT_NEAR(got, softplus_ref(0.25), 1e-12);
  EXPECT_NEAR(got, 0.82593, 1e-5);
}

TEST(Dpop, Errors) {
  const PrefValues v{{-1}, {-1}, {-1}, {-1}};
  EXPECT_THROW(dpo_value(v, 0.0, 1.0), ConfigError);
  EXPECT_THROW(dpo_value(v, 0.1, -1.0), ConfigError);
  EXPECT_THROW(dpo_value({{NAN}, {-1}, {-1}, {-1}}, 0.1, 1.0), NumericError);
  EXPECT_THROW(dpo_value({{-1}, {-1}, {-INFINITY}, {-1}}, 0.1, 1.0), NumericError);
}

// ---- GRPO ---------------------------------------------------------------------------

TEST(GrpoAdvantages, Examples) {
  const std::vector<double> r{1, 0, 0, 1};
  EXPECT_EQ(grpo_advantages(r, GrpoVariant::grpo), (std::vector<double>{1, -1, -1, 1}));
  EXPECT_EQ(grpo_advantages(r, GrpoVariant::dr_grpo), (std::vector<double>{.5, -.5, -.5, .5}));
  const std::vector<double> same{0.7, 0.7, 0.7};
  for (auto variant : {GrpoVariant::grpo, GrpoVariant::dr_grpo})
    for (double a : grpo_advantages(same, variant)) EXPECT_EQ(a, 0.0);
  EXPECT_THROW(grpo_advantages(std::vector<double>{1, NAN}, GrpoVariant::grpo), NumericError);
}

TEST(GrpoAdvantages, ZeroSumAndUnitVariance) {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> r(2 + rng.below(14));
    for (auto& x : r) x = rng.below(4) == 0 ? 1.0 : rng.uniform();
    for (auto variant : {GrpoVariant::grpo, GrpoVariant::dr_grpo}) {
      const auto a = grpo_advantages(r, variant);
      EXPECT_NEAR(std::accumulate(a.begin(), a.end(), 0.0), 0.0, 1e-12);
    }
    if (std::adjacent_find(r.begin(), r.end(), std::not_equal_to<>()) == r.end()) continue;
    const auto a = grpo_advantages(r, GrpoVariant::grpo);
    double var = 0;
    for (double x : a) var += x * x;
    EXPECT_NEAR(var / a.size(), 1.0, 1e-12);
  }
}

TEST(KlK3, Examples) {
  EXPECT_EQ(kl_k3(-1.3, -1.3), 0.0);
  EXPECT_NEAR(kl_k3(-2.0, -2.0 + kLn2), 1.0 - kLn2, 1e-15);
  EXPECT_NEAR(kl_k3(-2.0, -2.0 + kLn2), 0.30685, 5e-6);
}

TEST(KlK3, NonNegativeWithEqualityOnlyAtEqualInputs) {
  Rng rng(32);
  for (int i = 0; i < 10000; ++i) {
    const double p = -20 * rng.uniform();
    const double q = rng.below(10) == 0 ? p : -20 * rng.uniform();
    const double k = kl_k3(p, q);
    EXPECT_GE(k, 0.0);
    if (p == q) {
      EXPECT_EQ(k, 0.0);
    } else if (std::abs(p - q) > 1e-4) {
      EXPECT_GT(k, 0.0);
    }
  }
}

TEST(KlK3, TapeMatchesScalar) {
  Graph<double> g;
  const auto lp = g.leaf(vec({-1.0, -2.0, -0.5}), false);
  const auto k = kl_k3(lp, vec({-1.5, -2.0, -0.1})).value();
  EXPECT_NEAR(k[0], kl_k3(-1.0, -1.5), 1e-15);
  EXPECT_EQ(k[1], 0.0);
  EXPECT_NEAR(k[2], kl_k3(-0.5, -0.1), 1e-15);
}

struct Group {
  std::vector<Tensor<double>> policy, old, ref;
  std::vector<double> adv;
};

double grpo_value(const Group& grp, const GrpoConfig& cfg, std::vector<Tensor<double>>* grads = nullptr) {
  Graph<double> g;
  std::vector<V> lp;
  for (const auto& t : grp.policy) lp.push_back(g.leaf(t, grads != nullptr));
  const auto loss = grpo_objective(std::span<const V>(lp), std::span<const Tensor<double>>(grp.old),
                                   std::span<const Tensor<double>>(grp.ref), grp.adv, cfg);
  if (grads) {
    g.backward(loss);
    grads->clear();
    for (const auto& v : lp) grads->push_back(g.has_grad(v) ? g.grad(v) : Tensor<double>(v.shape()));
  }
  return loss.value().item();
}

TEST(GrpoObjective, StationaryStartIsZero) {
  Group grp{{vec({-1, -2}), vec({-0.5})}, {vec({-1, -2}), vec({-0.5})}, {vec({-1, -2}), vec({-0.5})}, {0, 0}};
  EXPECT_EQ(grpo_value(grp, GrpoConfig{}), 0.0);
  grp.ref = {vec({-1.5, -2}), vec({-0.5})};
  const double k = kl_k3(-1.0, -1.5);
  EXPECT_NEAR(grpo_value(grp, GrpoConfig{}), 0.001 * (k / 2) / 2, 1e-15);
}

TEST(GrpoObjective, ClippedSurrogate) {
  GrpoConfig cfg;
  cfg.kl_coef = 0;
  const double old = -2.0;
  Group grp{{vec({old + std::log(1.5)})}, {vec({old})}, {vec({old})}, {1.0}};
  EXPECT_NEAR(grpo_value(grp, cfg), -1.2, 1e-12);
  grp.adv = {-1.0};  // unclipped branch is the minimum
  EXPECT_NEAR(grpo_value(grp, cfg), 1.5, 1e-12);
  grp.policy = {vec({old + std::log(0.5)})};  // clipped at 0.8 against negative advantage
  EXPECT_NEAR(grpo_value(grp, cfg), 0.8, 1e-12);
}

TEST(GrpoObjective, SaturatedClipHasZeroGradient) {
  GrpoConfig cfg;
  cfg.kl_coef = 0;
  const double old = -1.0;
  for (auto [ratio, adv] : {std::pair{1.5, 1.0}, std::pair{0.5, -1.0}}) {
    Group grp{{vec({old + std::log(ratio)})}, {vec({old})}, {vec({old})}, {adv}};
    std::vector<Tensor<double>> grads;
    grpo_value(grp, cfg, &grads);
    EXPECT_EQ(grads[0][0], 0.0);
    // Finite differences agree: the loss is flat there.
    const double h = 1e-5;
    auto up = grp, down = grp;
    up.policy[0][0] += h;
    down.policy[0][0] -= h;
    EXPECT_NEAR((grpo_value(up, cfg) - grpo_value(down, cfg)) / (2 * h), 0.0, 1e-9);
  }
  // Unsaturated side keeps the gradient −a·ρ.
  Group grp{{vec({old + std::log(1.5)})}, {vec({old})}, {vec({old})}, {-1.0}};
  std::vector<Tensor<double>> grads;
  grpo_value(grp, cfg, &grads);
  EXPECT_NEAR(grads[0][0], 1.5, 1e-12);
}

TEST(GrpoObjective, Aggregation) {
  GrpoConfig cfg;
  cfg.kl_coef = 0;
  // ρ = 1 everywhere, so the surrogate per token is the advantage.
  Group grp{{vec({-1, -1, -1}), vec({-2})}, {vec({-1, -1, -1}), vec({-2})}, {vec({-1, -1, -1}), vec({-2})}, {1.0, -1.0}};
  EXPECT_NEAR(grpo_value(grp, cfg), -(1.0 + -1.0) / 2, 1e-15);
  cfg.variant = GrpoVariant::dr_grpo;
  cfg.max_tokens = 4;
  EXPECT_NEAR(grpo_value(grp, cfg), -(3 * 1.0 - 1.0) / (2 * 4), 1e-15);
}

TEST(GrpoObjective, Errors) {
  Group grp{{vec({-1, -1})}, {vec({-1})}, {vec({-1, -1})}, {0.0}};
  EXPECT_THROW(grpo_value(grp, GrpoConfig{}), ShapeError);
  grp.old = {vec({-1, -1})};
  grp.adv = {0.0, 1.0};
  EXPECT_THROW(grpo_value(grp, GrpoConfig{}), ShapeError);
  EXPECT_THROW(grpo_value(Group{}, GrpoConfig{}), DataError);
}

// ---- finite-difference suite over every loss ---------------------------------------

TEST(LossGradients, Sft) {
  Rng rng(41);
  const std::vector<TokenId> targets{3, 0, 4, 1};
  const std::vector<std::uint8_t> mask{1, 0, 1, 1};
  for (int trial = 0; trial < 10; ++trial) {
    const auto r = grad_check([&](Graph<double>&, const std::vector<V>& in) { return sft_loss(in[0], targets, mask); },
                              {random_tensor(rng, {4, 5}, -2, 2)});
    EXPECT_LT(r.max_rel_error, 1e-4);
  }
}

TEST(LossGradients, DpoAndDpop) {
  Rng rng(42);
  for (double lambda : {0.0, 5.0}) {
    for (int trial = 0; trial < 10; ++trial) {
      const auto r = grad_check(
          [&](Graph<double>&, const std::vector<V>& in) {
            return dpop_loss(PreferenceLogps<double>{in[0], in[1], in[2], in[3]}, 0.5, lambda);
          },
          {random_tensor(rng, {4}, -6, -1), random_tensor(rng, {4}, -6, -1), random_tensor(rng, {4}, -6, -1),
           random_tensor(rng, {4}, -6, -1)});
      EXPECT_LT(r.max_rel_error, 1e-4);
    }
  }
}

TEST(LossGradients, DpoThroughTokenLogprobs) {
  Rng rng(43);
  const std::vector<TokenId> tw{1, 2, 0}, tl{2, 2};
  const auto r = grad_check(
      [&](Graph<double>& g, const std::vector<V>& in) {
        const auto pw = reshape(sum(token_logprobs(in[0], tw)), Shape{1});
        const auto pl = reshape(sum(token_logprobs(in[1], tl)), Shape{1});
        return dpop_loss(PreferenceLogps<double>{pw, pl, g.constant(vec({-3.0})), g.constant(vec({-2.5}))}, 0.1, 5.0);
      },
      {random_tensor(rng, {3, 4}, -1, 1), random_tensor(rng, {2, 4}, -1, 1)});
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(LossGradients, KlK3) {
  Rng rng(44);
  const auto ref = random_tensor(rng, {6}, -4, -0.1);
  const auto r = grad_check([&](Graph<double>&, const std::vector<V>& in) { return sum(kl_k3(in[0], ref)); },
                            {random_tensor(rng, {6}, -4, -0.1)});
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(LossGradients, GrpoObjectiveBothVariants) {
  Rng rng(45);
  for (auto variant : {GrpoVariant::grpo, GrpoVariant::dr_grpo}) {
    for (int trial = 0; trial < 10; ++trial) {
      GrpoConfig cfg;
      cfg.variant = variant;
      cfg.kl_coef = 0.1;
      cfg.max_tokens = 5;
      std::vector<Tensor<double>> old, ref, init;
      for (std::size_t len : {3u, 1u, 4u}) {
        old.push_back(random_tensor(rng, {len}, -3, -0.2));
        ref.push_back(random_tensor(rng, {len}, -3, -0.2));
        // Ratios drawn away from the clip kinks at 0.8 and 1.2.
        Tensor<double> lp(Shape{len});
        for (std::size_t t = 0; t < len; ++t) {
          const double choices[] = {0.5, 0.9, 1.0, 1.1, 1.5};
          lp[t] = old.back()[t] + std::log(choices[rng.below(5)] * (1 + 0.02 * (rng.uniform() - 0.5)));
        }
        init.push_back(lp);
      }
      const std::vector<double> rewards{rng.uniform(), rng.uniform(), rng.uniform()};
      const auto adv = grpo_advantages(rewards, variant);
      const auto r = grad_check(
          [&](Graph<double>&, const std::vector<V>& in) {
            return grpo_objective(std::span<const V>(in), std::span<const Tensor<double>>(old),
                                  std::span<const Tensor<double>>(ref), adv, cfg);
          },
          init);
      EXPECT_LT(r.max_rel_error, 1e-4);
    }
  }
}

// ---- decoding -------------------------------------------------------------------------

Policy toy_policy(std::uint64_t seed, ModelConfig cfg = forge::testing::toy_config()) {
  Rng rng(seed);
  return Policy::from_checkpoint(init_checkpoint(cfg, rng, 0.5));
}

TEST(Decode, GreedyPicksLowestIndexOnTies) {
  Rng rng(1);
  const std::vector<double> l{0.5, 2.0, -1.0, 2.0};
  EXPECT_EQ(sample_token(l, 0.0, rng), 1);
  EXPECT_THROW(sample_token(std::vector<double>{0, NAN}, 1.0, rng), NumericError);
  EXPECT_THROW(sample_token(l, -1.0, rng), ConfigError);
}

TEST(Decode, SamplingFollowsSoftmax) {
  Rng rng(2);
  const std::vector<double> l{0.0, std::log(2.0), std::log(5.0)};
  std::vector<int> counts(3, 0);
  const int n = 40000;
  for (int i = 0; i < n; ++i) ++counts[sample_token(l, 1.0, rng)];
  EXPECT_NEAR(counts[0] / double(n), 1.0 / 8, 0.01);
  EXPECT_NEAR(counts[1] / double(n), 2.0 / 8, 0.01);
  EXPECT_NEAR(counts[2] / double(n), 5.0 / 8, 0.01);
}

TEST(Decode, ContinuationLogprobMatchesLogits) {
  const auto policy = toy_policy(7);
  const std::vector<TokenId> ids{1, 4, 2, 9, 3};
  const auto logits = policy_logits(policy, ids);
  double expect = 0;
  for (std::size_t t = 2; t < ids.size(); ++t) {
    const auto row = logits.data().subspan((t - 1) * 11, 11);
    double z = 0;
    for (double v : row) z += std::exp(v);
    expect += row[ids[t]] - std::log(z);
  }
  EXPECT_NEAR(continuation_logprob(policy, ids, 2), expect, 1e-12);
  EXPECT_THROW(continuation_logprob(policy, ids, 0), DataError);
  EXPECT_THROW(continuation_logprob(policy, ids, 5), DataError);
}

TEST(Decode, GenerateGreedyIsArgmaxChainAndStops) {
  const auto policy = toy_policy(8);
  const std::vector<TokenId> prompt{1, 2};
  GenerationOptions opts;
  opts.temperature = 0;
  opts.max_new_tokens = 6;
  Rng rng(0);
  const auto out = generate(policy, prompt, opts, rng);
  ASSERT_EQ(out.size(), 6u);
  std::vector<TokenId> seq = prompt;
  for (auto id : out) {
    const auto logits = policy_logits(policy, seq);
    const auto row = logits.data().subspan((seq.size() - 1) * 11, 11);
    EXPECT_EQ(id, std::max_element(row.begin(), row.end()) - row.begin());
    seq.push_back(id);
  }
  opts.stop_ids = {out[2]};
  const auto stopped = generate(policy, prompt, opts, rng);
  const auto first = std::find(out.begin(), out.end(), out[2]) - out.begin();
  EXPECT_EQ(stopped.size(), static_cast<std::size_t>(first + 1));
}

TEST(Decode, SamplingIsSeedDeterministic) {
  const auto policy = toy_policy(9);
  const std::vector<TokenId> prompt{3};
  GenerationOptions opts;
  opts.max_new_tokens = 8;
  Rng a(5), b(5);
  EXPECT_EQ(generate(policy, prompt, opts, a), generate(policy, prompt, opts, b));
}

TEST(Policy, CheckpointRoundTripRoundsToFloat) {
  const auto policy = toy_policy(10);
  const auto ckpt = policy.to_checkpoint();
  EXPECT_EQ(ckpt.config, policy.config);
  const auto again = Policy::from_checkpoint(ckpt);
  EXPECT_EQ(again.params, policy.params);  // values came from float32 in the first place
}

TEST(StepLog, CsvFormat) {
  const auto dir = std::filesystem::temp_directory_path() / ("forge_steplog_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  std::vector<StepLog> rows{{0, 1e-3, 2.5, 0.75, std::nullopt, std::nullopt}, {1, 5e-4, 1.0 / 3, 2.0, {}, {}}};
  write_step_log(dir / "a.csv", rows);
  std::ifstream in(dir / "a.csv");
  std::stringstream ss;
  ss << in.rdbuf();
  EXPECT_EQ(ss.str(), "step,lr,loss,grad_norm\n0,0.001,2.5,0.75\n1,0.0005,0.3333333333,2\n");
  rows[0].mean_reward = 0.5;
  rows[0].mean_kl = 0.0;
  write_step_log(dir / "b.csv", rows);
  std::ifstream in2(dir / "b.csv");
  std::string header;
  std::getline(in2, header);
  EXPECT_EQ(header, "step,lr,loss,grad_norm,mean_reward,mean_kl");
  std::filesystem::remove_all(dir);
}

TEST(ExampleStream, EachEpochIsAPermutation) {
  ExampleStream s(7, Rng(3));
  for (int epoch = 0; epoch < 4; ++epoch) {
    std::vector<int> seen(7, 0);
    for (int i = 0; i < 7; ++i) ++seen[s.next()];
    EXPECT_EQ(seen, std::vector<int>(7, 1));
  }
  EXPECT_THROW(ExampleStream(0, Rng(1)), DataError);
}

// ---- toy end-to-end training ------------------------------------------------------------

std::filesystem::path fixture(const std::string& name) { return std::filesystem::path(FORGE_FIXTURES) / name; }

struct ToyChat {
  Tokenizer tok;
  std::vector<ChatSample> dialogues;
  std::vector<TrainSequence> seqs;
};

ToyChat toy_chat() {
  ToyChat t;
  t.dialogues = read_chat_jsonl(fixture("toy/sft.jsonl"));
  std::vector<std::string> corpus;
  for (const auto& d : t.dialogues)
    for (const auto& m : d.messages) corpus.push_back(assistant_text(m));
  t.tok = Tokenizer::train(corpus, 40);
  for (const auto& d : t.dialogues) {
    const auto r = render_chat(d, t.tok);
    t.seqs.push_back({r.ids, build_loss_mask(r)});
  }
  return t;
}

ModelConfig chat_config(std::size_t vocab) {
  auto c = forge::testing::toy_config();
  c.d_model = 32;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.head_size = 8;
  c.d_ff = 64;
  c.vocab_size = vocab;
  c.native_ctx = c.extended_ctx = 256;
  return c;
}

TEST(TrainLm, ToySftOverfitsEightDialogues) {
  const auto toy = toy_chat();
  ASSERT_EQ(toy.seqs.size(), 8u);
  Rng rng(1234);
  auto policy = Policy::from_checkpoint(init_checkpoint(chat_config(toy.tok.vocab_size()), rng));
  LmTrainConfig cfg;
  cfg.loop.schedule.peak_lr = 3e-3;
  cfg.loop.schedule.warmup_steps = 10;
  cfg.loop.schedule.total_steps = 200;
  cfg.loop.micro_batch = 8;
  cfg.pack_len = 512;
  const double before = evaluate_lm_loss(policy, toy.seqs);
  const auto logs = train_lm(policy, toy.seqs, cfg, Rng(99));
  ASSERT_EQ(logs.size(), 200u);
  const double after = evaluate_lm_loss(policy, toy.seqs);
  EXPECT_GT(before, 3.0);
  EXPECT_LT(after, 0.1);
  // The logged loss of a full-data step is the same quantity before the update.
  EXPECT_NEAR(logs.front().loss, before, 1e-9);
}

TEST(TrainLm, DeterministicForFixedSeed) {
  const auto toy = toy_chat();
  LmTrainConfig cfg;
  cfg.loop.schedule.peak_lr = 1e-2;
  cfg.loop.schedule.total_steps = 5;
  cfg.loop.micro_batch = 2;
  cfg.loop.grad_accum = 2;
  cfg.pack_len = 128;
  auto run = [&] {
    Rng rng(5);
    auto p = Policy::from_checkpoint(init_checkpoint(chat_config(toy.tok.vocab_size()), rng));
    train_lm(p, toy.seqs, cfg, Rng(6));
    return p.params;
  };
  EXPECT_EQ(run(), run());
}

TEST(TrainDpo, ToyPairsDriveLossBelowLn2) {
  const auto toy = toy_chat();
  std::vector<PreferenceIds> pairs;
  std::ifstream in(fixture("toy/dpo.jsonl"));
  std::string line;
  while (std::getline(in, line)) {
    const auto j = json::parse(line);
    ChatSample prompt;
    for (const auto& m : j.at("prompt")) prompt.messages.push_back(message_from_json(m, "prompt"));
    pairs.push_back(encode_preference(prompt, message_from_json(j.at("chosen"), "chosen"),
                                      message_from_json(j.at("rejected"), "rejected"), toy.tok));
  }
  ASSERT_EQ(pairs.size(), 16u);
  EXPECT_EQ(pairs[0].chosen_prefix, pairs[0].rejected_prefix);
  EXPECT_EQ(pairs[0].chosen.back(), toy.tok.end());
  EXPECT_EQ(pairs[0].chosen[pairs[0].chosen_prefix - 1], toy.tok.special("<|assistant|>"));

  Rng rng(77);
  auto policy = Policy::from_checkpoint(init_checkpoint(chat_config(toy.tok.vocab_size()), rng));
  const auto ref = policy;
  DpoTrainConfig cfg;
  cfg.loop.schedule.peak_lr = 2e-3;
  cfg.loop.schedule.total_steps = 30;
  cfg.loop.micro_batch = 8;
  cfg.loop.grad_accum = 2;
  EXPECT_NEAR(evaluate_dpo_loss(policy, ref, pairs, cfg), kLn2, 1e-12);
  const auto logs = train_dpo(policy, pairs, cfg, Rng(3));
  EXPECT_NEAR(logs.front().loss, kLn2, 1e-12);
  EXPECT_LT(evaluate_dpo_loss(policy, ref, pairs, cfg), kLn2 - 0.05);
}

TEST(TrainGrpo, LearnsToEmitRewardedToken) {
  // Reward 1 whenever the first sampled token is 7.
  auto policy = toy_policy(12);
  const std::vector<std::vector<TokenId>> prompts{{1, 2}, {3}, {4, 5, 6}, {2}};
  GrpoTrainConfig cfg;
  cfg.loop.schedule.peak_lr = 3e-2;
  cfg.loop.schedule.total_steps = 15;
  cfg.loop.micro_batch = 2;
  cfg.loop.grad_accum = 2;
  cfg.group_size = 8;
  cfg.generation.max_new_tokens = 2;
  const RewardFn reward = [](std::size_t, std::span<const TokenId> r) { return r[0] == 7 ? 1.0 : 0.0; };
  const auto logs = train_grpo(policy, prompts, reward, cfg, Rng(4));
  ASSERT_EQ(logs.size(), 15u);
  for (const auto& l : logs) {
    ASSERT_TRUE(l.mean_reward && l.mean_kl);
    EXPECT_GE(*l.mean_kl, 0.0);
  }
  EXPECT_EQ(*logs.front().mean_kl, 0.0);
  const double early = (*logs[0].mean_reward + *logs[1].mean_reward + *logs[2].mean_reward) / 3;
  const double late = (*logs[12].mean_reward + *logs[13].mean_reward + *logs[14].mean_reward) / 3;
  EXPECT_GT(late, early + 0.3);
}

TEST(TrainGrpo, ConfigErrors) {
  auto policy = toy_policy(13);
  const std::vector<std::vector<TokenId>> prompts{{1}};
  const RewardFn reward = [](std::size_t, std::span<const TokenId>) { return 0.0; };
  GrpoTrainConfig cfg;
  cfg.group_size = 1;
  EXPECT_THROW(train_grpo(policy, prompts, reward, cfg, Rng(1)), ConfigError);
  cfg.group_size = 2;
  cfg.generation.max_new_tokens = 0;
  EXPECT_THROW(train_grpo(policy, prompts, reward, cfg, Rng(1)), ConfigError);
  cfg.generation.max_new_tokens = 1;
  cfg.loop.micro_batch = 0;
  EXPECT_THROW(train_grpo(policy, prompts, reward, cfg, Rng(1)), ConfigError);
}

}  // namespace
