#include "forge/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "forge/error.hpp"

namespace forge {

void TrainLoopConfig::validate() const {
  schedule.validate();
  if (micro_batch == 0) throw ConfigError("micro_batch must be >= 1");
  if (grad_accum == 0) throw ConfigError("grad_accum must be >= 1");
  if (!(max_grad_norm > 0)) throw ConfigError("max_grad_norm must be > 0");
}

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void add_grads(const Graph<double>& g, const VarMap<double>& vars, TensorMap& acc, double weight) {
  for (const auto& [name, v] : vars) {
    if (!g.has_grad(v)) continue;
    const auto& grad = g.grad(v);
    auto& slot = acc.try_emplace(name, grad.shape()).first->second;
    for (std::size_t i = 0; i < grad.numel(); ++i) slot[i] += weight * grad[i];
  }
}

StepLog apply_update(Policy& policy, TensorMap& grads, OptimizerState& st, const TrainLoopConfig& loop,
                     std::size_t step, double loss) {
  StepLog log;
  log.step = step;
  log.lr = lr_at(loop.schedule, step);
  log.loss = loss;
  if (!std::isfinite(loss)) throw NumericError("step " + std::to_string(step) + ": non-finite loss");
  log.grad_norm = clip_grad_norm(grads, loop.max_grad_norm);
  adamw_step(policy.params, grads, st, log.lr, loop.adamw);
  return log;
}

struct LmRow {
  std::vector<TokenId> inputs, targets;
  std::vector<std::uint8_t> mask;
  std::vector<std::int32_t> segments;
  std::vector<std::size_t> positions;
  std::size_t count = 0;
};

LmRow shift_row(const PackedBatch& b) {
  LmRow r;
  if (b.size() < 2) return r;
  const std::size_t n = b.size() - 1;
  r.inputs.assign(b.token_ids.begin(), b.token_ids.begin() + static_cast<std::ptrdiff_t>(n));
  r.targets.assign(b.token_ids.begin() + 1, b.token_ids.end());
  r.segments.assign(b.segment_ids.begin(), b.segment_ids.begin() + static_cast<std::ptrdiff_t>(n));
  r.positions.assign(b.positions.begin(), b.positions.begin() + static_cast<std::ptrdiff_t>(n));
  r.mask.resize(n);
  for (std::size_t t = 0; t < n; ++t) {
    r.mask[t] = b.loss_mask[t + 1] && b.segment_ids[t] == b.segment_ids[t + 1];
    r.count += r.mask[t];
  }
  return r;
}

/// Summed (not averaged) masked cross-entropy of one packed row.
Var<double> row_loss_sum(Graph<double>& g, const ModelConfig& cfg, const VarMap<double>& vars, const LmRow& r) {
  ForwardOptions opts;
  opts.segment_ids = r.segments;
  opts.positions = r.positions;
  const auto logits = forward(g, cfg, vars, r.inputs, opts);
  return scale(sft_loss(logits, r.targets, r.mask), static_cast<double>(r.count));
}

std::vector<LmRow> pack_rows(std::span<const TrainSequence> seqs, std::size_t pack_len) {
  std::vector<LmRow> rows;
  for (const auto& b : pack_samples(seqs, pack_len)) {
    auto r = shift_row(b);
    if (r.count > 0) rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace

void write_step_log(const std::filesystem::path& path, std::span<const StepLog> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write step log " + path.string());
  const bool rl = !rows.empty() && rows.front().mean_reward.has_value();
  out << "step,lr,loss,grad_norm" << (rl ? ",mean_reward,mean_kl" : "") << "\n";
  for (const auto& r : rows) {
    out << r.step << ',' << num(r.lr) << ',' << num(r.loss) << ',' << num(r.grad_norm);
    if (rl) out << ',' << num(r.mean_reward.value_or(0)) << ',' << num(r.mean_kl.value_or(0));
    out << "\n";
  }
}

ExampleStream::ExampleStream(std::size_t n, Rng rng) : n_(n), rng_(rng) {
  if (n == 0) throw DataError("training set is empty");
}

std::size_t ExampleStream::next() {
  if (pos_ == order_.size()) {
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    for (std::size_t i = n_; i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
    pos_ = 0;
  }
  return order_[pos_++];
}

std::vector<StepLog> train_lm(Policy& policy, std::span<const TrainSequence> data, const LmTrainConfig& cfg, Rng rng,
                              const StepCallback& on_step) {
  cfg.loop.validate();
  ExampleStream stream(data.size(), rng.split("data"));
  OptimizerState st;
  std::vector<StepLog> logs;
  for (std::size_t step = 0; step < cfg.loop.schedule.total_steps; ++step) {
    std::vector<LmRow> rows;
    for (std::size_t a = 0; a < cfg.loop.grad_accum; ++a) {
      std::vector<TrainSequence> micro;
      for (std::size_t i = 0; i < cfg.loop.micro_batch; ++i) micro.push_back(data[stream.next()]);
      for (auto& r : pack_rows(micro, cfg.pack_len)) rows.push_back(std::move(r));
    }
    std::size_t total = 0;
    for (const auto& r : rows) total += r.count;
    if (total == 0) throw DataError("step " + std::to_string(step) + ": batch has no masked-in target");
    TensorMap grads;
    double loss = 0;
    for (const auto& r : rows) {
      Graph<double> g;
      const auto vars = bind_params(g, policy.params, true);
      const auto l = scale(row_loss_sum(g, policy.config, vars, r), 1.0 / static_cast<double>(total));
      loss += l.value()[0];
      g.backward(l);
      add_grads(g, vars, grads, 1.0);
    }
    logs.push_back(apply_update(policy, grads, st, cfg.loop, step, loss));
    if (on_step) on_step(logs.back());
  }
  return logs;
}

double evaluate_lm_loss(const Policy& policy, std::span<const TrainSequence> data) {
  double sum = 0;
  std::size_t total = 0;
  for (const auto& seq : data) {
    const auto rows = pack_rows(std::span<const TrainSequence>(&seq, 1), seq.ids.size());
    for (const auto& r : rows) {
      Graph<double> g;
      const auto vars = bind_params(g, policy.params, false);
      sum += row_loss_sum(g, policy.config, vars, r).value()[0];
      total += r.count;
    }
  }
  if (total == 0) throw DataError("evaluation set has no masked-in target");
  return sum / static_cast<double>(total);
}

PreferenceIds encode_preference(const ChatSample& prompt, const ChatMessage& chosen, const ChatMessage& rejected,
                                const Tokenizer& tok) {
  if (chosen.role != Role::assistant || rejected.role != Role::assistant) {
    throw DataError("preference responses must be assistant messages");
  }
  const auto head = render_generation_prompt(prompt, tok);
  auto build = [&](const ChatMessage& m) {
    auto ids = head;
    for (auto id : tok.encode(assistant_text(m))) ids.push_back(id);
    ids.push_back(tok.end());
    return ids;
  };
  return PreferenceIds{build(chosen), build(rejected), head.size(), head.size()};
}

namespace {

struct PairRef {
  double chosen = 0, rejected = 0;
};

std::vector<PairRef> reference_logps(const Policy& ref, std::span<const PreferenceIds> data) {
  std::vector<PairRef> out;
  out.reserve(data.size());
  for (const auto& p : data) {
    out.push_back({continuation_logprob(ref, p.chosen, p.chosen_prefix),
                   continuation_logprob(ref, p.rejected, p.rejected_prefix)});
  }
  return out;
}

Var<double> preference_loss(Graph<double>& g, const Policy& policy, const VarMap<double>& vars,
                            std::span<const PreferenceIds> data, std::span<const std::size_t> idx,
                            std::span<const PairRef> ref, const DpoTrainConfig& cfg) {
  std::vector<Var<double>> pw, pl;
  Tensor<double> rw(Shape{idx.size()}), rl(Shape{idx.size()});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& p = data[idx[k]];
    pw.push_back(reshape(sum(continuation_logprobs(g, policy.config, vars, p.chosen, p.chosen_prefix)), Shape{1}));
    pl.push_back(reshape(sum(continuation_logprobs(g, policy.config, vars, p.rejected, p.rejected_prefix)), Shape{1}));
    rw[k] = ref[idx[k]].chosen;
    rl[k] = ref[idx[k]].rejected;
  }
  PreferenceLogps<double> lp{concat(std::span<const Var<double>>(pw), 0), concat(std::span<const Var<double>>(pl), 0),
                             g.constant(rw), g.constant(rl)};
  return dpop_loss(lp, cfg.beta, cfg.lambda);
}

}  // namespace

std::vector<StepLog> train_dpo(Policy& policy, std::span<const PreferenceIds> data, const DpoTrainConfig& cfg, Rng rng,
                               const StepCallback& on_step) {
  cfg.loop.validate();
  const auto ref = reference_logps(policy, data);
  ExampleStream stream(data.size(), rng.split("data"));
  OptimizerState st;
  std::vector<StepLog> logs;
  const double weight = 1.0 / static_cast<double>(cfg.loop.grad_accum);
  for (std::size_t step = 0; step < cfg.loop.schedule.total_steps; ++step) {
    TensorMap grads;
    double loss = 0;
    for (std::size_t a = 0; a < cfg.loop.grad_accum; ++a) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < cfg.loop.micro_batch; ++i) idx.push_back(stream.next());
      Graph<double> g;
      const auto vars = bind_params(g, policy.params, true);
      const auto l = scale(preference_loss(g, policy, vars, data, idx, ref, cfg), weight);
      loss += l.value()[0];
      g.backward(l);
      add_grads(g, vars, grads, 1.0);
    }
    logs.push_back(apply_update(policy, grads, st, cfg.loop, step, loss));
    if (on_step) on_step(logs.back());
  }
  return logs;
}

double evaluate_dpo_loss(const Policy& policy, const Policy& ref, std::span<const PreferenceIds> data,
                         const DpoTrainConfig& cfg) {
  const auto r = reference_logps(ref, data);
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Graph<double> g;
  const auto vars = bind_params(g, policy.params, false);
  return preference_loss(g, policy, vars, data, idx, r, cfg).value()[0];
}

std::vector<StepLog> train_grpo(Policy& policy, std::span<const std::vector<TokenId>> prompts, const RewardFn& reward,
                                const GrpoTrainConfig& cfg, Rng rng, const StepCallback& on_step) {
  cfg.loop.validate();
  if (cfg.group_size < 2) throw ConfigError("grpo: group_size must be >= 2");
  if (cfg.generation.max_new_tokens == 0) throw ConfigError("grpo: max_new_tokens must be >= 1");
  GrpoConfig obj = cfg.objective;
  obj.max_tokens = cfg.generation.max_new_tokens;
  const Policy ref = policy;
  ExampleStream stream(prompts.size(), rng.split("data"));
  Rng sampler = rng.split("sampling");
  OptimizerState st;
  std::vector<StepLog> logs;
  const std::size_t per_step = cfg.loop.examples_per_step();
  for (std::size_t step = 0; step < cfg.loop.schedule.total_steps; ++step) {
    TensorMap grads;
    double loss = 0, reward_sum = 0, kl_sum = 0;
    std::size_t responses = 0, tokens = 0;
    for (std::size_t k = 0; k < per_step; ++k) {
      const std::size_t pi = stream.next();
      const auto& prompt = prompts[pi];
      std::vector<std::vector<TokenId>> full(cfg.group_size);
      std::vector<double> rewards(cfg.group_size);
      for (std::size_t i = 0; i < cfg.group_size; ++i) {
        const auto resp = generate(policy, prompt, cfg.generation, sampler);
        rewards[i] = reward(pi, resp);
        full[i] = prompt;
        full[i].insert(full[i].end(), resp.begin(), resp.end());
      }
      const auto adv = grpo_advantages(rewards, obj.variant);

      Graph<double> g;
      const auto vars = bind_params(g, policy.params, true);
      std::vector<Var<double>> lp;
      std::vector<Tensor<double>> old, refs;
      for (std::size_t i = 0; i < cfg.group_size; ++i) {
        lp.push_back(continuation_logprobs(g, policy.config, vars, full[i], prompt.size()));
        old.push_back(lp.back().value());
        Graph<double> rg;
        const auto rvars = bind_params(rg, ref.params, false);
        refs.push_back(continuation_logprobs(rg, ref.config, rvars, full[i], prompt.size()).value());
        for (std::size_t t = 0; t < old.back().numel(); ++t) kl_sum += kl_k3(old.back()[t], refs.back()[t]);
        tokens += old.back().numel();
        reward_sum += rewards[i];
        ++responses;
      }
      const auto l = scale(grpo_objective(std::span<const Var<double>>(lp), std::span<const Tensor<double>>(old),
                                          std::span<const Tensor<double>>(refs), adv, obj),
                           1.0 / static_cast<double>(per_step));
      loss += l.value()[0];
      g.backward(l);
      add_grads(g, vars, grads, 1.0);
    }
    auto log = apply_update(policy, grads, st, cfg.loop, step, loss);
    log.mean_reward = reward_sum / static_cast<double>(responses);
    log.mean_kl = kl_sum / static_cast<double>(tokens);
    logs.push_back(log);
    if (on_step) on_step(logs.back());
  }
  return logs;
}

}  // namespace forge
