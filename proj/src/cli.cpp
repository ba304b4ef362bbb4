#include "forge/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "forge/checkpoint.hpp"
#include "forge/error.hpp"
#include "forge/eval.hpp"
#include "forge/scrub.hpp"
#include "forge/upscale.hpp"
#include "forge/verifiers.hpp"

namespace forge {

namespace {

namespace fs = std::filesystem;

struct Outputs {
  fs::path dir;
  std::vector<std::string> files;

  fs::path add(const std::string& name) {
    files.push_back(name);
    return dir / name;
  }
};

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  out << text;
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

struct Line {
  std::size_t number;
  json value;
};

std::vector<Line> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<Line> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object())
      throw DataError(path.filename().string() + ":" + std::to_string(n) + ": not a JSON object");
    out.push_back({n, std::move(j)});
  }
  return out;
}

std::string where(const fs::path& p, std::size_t line) { return p.filename().string() + ":" + std::to_string(line); }

std::string text_field(const Line& l, const fs::path& p) {
  if (!l.value.contains("text") || !l.value.at("text").is_string())
    throw DataError(where(p, l.number) + ": missing string 'text'");
  return l.value.at("text").get<std::string>();
}

ChatSample prompt_sample(const json& j, const std::string& at) {
  if (j.is_array()) return chat_from_json(json{{"messages", j}}, at);
  return chat_from_json(j, at);
}

Tokenizer load_tokenizer(const RunConfig& rc) { return Tokenizer::load(rc.get<std::string>("tokenizer")); }

Policy load_policy(const RunConfig& rc, const Tokenizer& tok) {
  auto ckpt = load_checkpoint(rc.get<std::string>("checkpoint"));
  if (ckpt.config.vocab_size != tok.vocab_size()) {
    throw DataError("checkpoint vocab_size " + std::to_string(ckpt.config.vocab_size) + " does not match tokenizer (" +
                    std::to_string(tok.vocab_size()) + " ids)");
  }
  return Policy::from_checkpoint(ckpt);
}

void save_policy(const Policy& p, Outputs& out) { save_checkpoint(p.to_checkpoint(), out.add("model.ckpt")); }

std::size_t total_steps(const RunConfig& rc, std::size_t examples) {
  const std::size_t per_step = rc.get<std::size_t>("micro_batch") * rc.get<std::size_t>("grad_accum");
  return steps_for_epochs(rc.get<double>("epochs"), examples, per_step);
}

json loss_summary(const std::vector<StepLog>& logs) {
  return json{{"steps", logs.size()}, {"first_loss", logs.front().loss}, {"last_loss", logs.back().loss}};
}

// ---- commands -------------------------------------------------------------------

void cmd_init(const RunConfig& rc, Outputs& out) {
  json model = rc.at("model");
  if (rc.has("tokenizer")) {
    const auto tok = Tokenizer::load(rc.get<std::string>("tokenizer"));
    if (model.contains("vocab_size") && model.at("vocab_size") != tok.vocab_size()) {
      throw ConfigError("model.vocab_size (" + model.at("vocab_size").dump() + ") does not match tokenizer (" +
                        std::to_string(tok.vocab_size()) + " ids)");
    }
    model["vocab_size"] = tok.vocab_size();
  }
  const auto cfg = model_config_from_json(model, "model");
  cfg.validate();
  Rng rng = Rng(rc.seed()).split("init");
  save_checkpoint(init_checkpoint(cfg, rng, rc.get<double>("init_std")), out.add("model.ckpt"));
}

void cmd_train_tokenizer(const RunConfig& rc, Outputs& out) {
  std::vector<std::string> corpus;
  const bool chat = rc.get<std::string>("format") == "chat";
  for (const auto& f : rc.at("corpus")) {
    const fs::path p = f.get<std::string>();
    if (chat) {
      for (const auto& s : read_chat_jsonl(p))
        for (const auto& m : s.messages) corpus.push_back(assistant_text(m));
    } else if (p.extension() == ".jsonl") {
      for (const auto& l : read_jsonl(p)) corpus.push_back(text_field(l, p));
    } else {
      std::ifstream in(p);
      for (std::string line; std::getline(in, line);)
        if (!line.empty()) corpus.push_back(line);
    }
  }
  if (corpus.empty()) throw DataError("train-tokenizer: corpus has no documents");
  const auto tok = Tokenizer::train(corpus, rc.get<std::size_t>("merges"), rc.get<std::size_t>("base_size"));
  tok.save(out.add("tokenizer.json"));
}

void cmd_upscale(const RunConfig& rc, Outputs& out) {
  const auto ckpt = load_checkpoint(rc.get<std::string>("checkpoint"));
  UpscaleSpec spec{ckpt.config.n_layers, rc.get<std::size_t>("m")};
  if (rc.has("n") && rc.get<std::size_t>("n") != spec.n) {
    throw ConfigError("n (" + rc.at("n").dump() + ") does not match the checkpoint's " + std::to_string(spec.n) +
                      " layers");
  }
  spec.validate();
  save_checkpoint(depth_upscale(ckpt, spec), out.add("model.ckpt"));
  write_json(out.add("layer_map.json"), json{{"n", spec.n}, {"m", spec.m}, {"s", spec.s()},
                                             {"source_layers", upscale_layer_map(spec)}});
}

void cmd_merge(const RunConfig& rc, Outputs& out) {
  std::vector<Checkpoint> ckpts;
  for (const auto& p : rc.at("checkpoints")) ckpts.push_back(load_checkpoint(p.get<std::string>()));
  std::vector<double> weights(ckpts.size(), 1.0);
  if (rc.has("weights")) weights = rc.at("weights").get<std::vector<double>>();
  save_checkpoint(merge_checkpoints(ckpts, weights), out.add("model.ckpt"));
}

std::vector<TrainSequence> chat_sequences(const fs::path& p, const Tokenizer& tok) {
  std::vector<TrainSequence> seqs;
  for (const auto& s : read_chat_jsonl(p)) {
    const auto r = render_chat(s, tok);
    seqs.push_back({r.ids, build_loss_mask(r)});
  }
  return seqs;
}

std::vector<TrainSequence> text_sequences(const fs::path& p, const Tokenizer& tok) {
  std::vector<TrainSequence> seqs;
  for (const auto& l : read_jsonl(p)) {
    TrainSequence s{{tok.bos()}, {}};
    for (auto id : tok.encode(text_field(l, p))) s.ids.push_back(id);
    s.ids.push_back(tok.eos());
    s.loss_mask.assign(s.ids.size(), 1);
    seqs.push_back(std::move(s));
  }
  return seqs;
}

void run_lm(const RunConfig& rc, Outputs& out, bool chat) {
  const auto tok = load_tokenizer(rc);
  auto policy = load_policy(rc, tok);
  const fs::path train_path = rc.get<std::string>("data.train");
  const auto data = chat ? chat_sequences(train_path, tok) : text_sequences(train_path, tok);
  LmTrainConfig cfg;
  cfg.loop = train_loop(rc, total_steps(rc, data.size()));
  cfg.pack_len = rc.get<std::size_t>("pack_len");

  std::vector<TaskSpec> suite;
  std::size_t every = 0;
  if (chat && rc.has("monitor.suite") && rc.get<std::size_t>("monitor.every") > 0) {
    suite = load_suite(rc.get<std::string>("monitor.suite"));
    every = rc.get<std::size_t>("monitor.every");
  }
  fs::path monitor_csv;
  if (every) {
    monitor_csv = out.add("monitoring.csv");
    fs::remove(monitor_csv);
    append_monitoring_row(monitor_csv, run_suite(policy, tok, suite, 0));
  }
  const double before = evaluate_lm_loss(policy, data);
  const auto logs = train_lm(policy, data, cfg, Rng(rc.seed()), [&](const StepLog& log) {
    if (every && (log.step + 1) % every == 0) append_monitoring_row(monitor_csv, run_suite(policy, tok, suite, log.step + 1));
  });
  save_policy(policy, out);
  write_step_log(out.add("steps.csv"), logs);
  json metrics = loss_summary(logs);
  metrics["train_loss_before"] = before;
  metrics["train_loss"] = evaluate_lm_loss(policy, data);
  if (rc.has("data.eval")) {
    const fs::path ev = rc.get<std::string>("data.eval");
    metrics["eval_loss"] = evaluate_lm_loss(policy, chat ? chat_sequences(ev, tok) : text_sequences(ev, tok));
  }
  write_json(out.add("metrics.json"), metrics);
}

void cmd_train_dpo(const RunConfig& rc, Outputs& out) {
  const auto tok = load_tokenizer(rc);
  auto policy = load_policy(rc, tok);
  const fs::path path = rc.get<std::string>("data.train");
  std::vector<PreferenceIds> pairs;
  for (const auto& l : read_jsonl(path)) {
    const auto at = where(path, l.number);
    for (const char* k : {"prompt", "chosen", "rejected"})
      if (!l.value.contains(k)) throw DataError(at + ": missing '" + std::string(k) + "'");
    pairs.push_back(encode_preference(prompt_sample(l.value.at("prompt"), at + " prompt"),
                                      message_from_json(l.value.at("chosen"), at + " chosen"),
                                      message_from_json(l.value.at("rejected"), at + " rejected"), tok));
  }
  DpoTrainConfig cfg;
  cfg.loop = train_loop(rc, total_steps(rc, pairs.size()));
  cfg.beta = rc.get<double>("beta");
  cfg.lambda = rc.get<std::string>("variant") == "dpo" ? 0.0 : rc.get<double>("lambda");
  const Policy ref = policy;
  const double before = evaluate_dpo_loss(policy, ref, pairs, cfg);
  const auto logs = train_dpo(policy, pairs, cfg, Rng(rc.seed()));
  save_policy(policy, out);
  write_step_log(out.add("steps.csv"), logs);
  json metrics = loss_summary(logs);
  metrics["train_loss_before"] = before;
  metrics["train_loss"] = evaluate_dpo_loss(policy, ref, pairs, cfg);
  write_json(out.add("metrics.json"), metrics);
}

void cmd_train_grpo(const RunConfig& rc, Outputs& out) {
  const auto tok = load_tokenizer(rc);
  auto policy = load_policy(rc, tok);
  const fs::path path = rc.get<std::string>("data.train");
  std::vector<std::vector<TokenId>> prompts;
  std::vector<VerifierKind> kinds;
  std::vector<json> truths;
  std::vector<std::string> wheres;
  for (const auto& l : read_jsonl(path)) {
    const auto at = where(path, l.number);
    for (const char* k : {"prompt", "verifier", "truth"})
      if (!l.value.contains(k)) throw DataError(at + ": missing '" + std::string(k) + "'");
    if (!l.value.at("verifier").is_string()) throw DataError(at + ": 'verifier' must be a string");
    prompts.push_back(render_generation_prompt(prompt_sample(l.value.at("prompt"), at + " prompt"), tok));
    kinds.push_back(parse_verifier_kind(l.value.at("verifier").get<std::string>()));
    truths.push_back(l.value.at("truth"));
    wheres.push_back(at + " truth");
    verify(kinds.back(), "", truths.back(), wheres.back());  // malformed truths fail before training
  }
  GrpoTrainConfig cfg;
  cfg.loop = train_loop(rc, total_steps(rc, prompts.size()));
  cfg.group_size = rc.get<std::size_t>("group_size");
  cfg.objective.clip_eps = rc.get<double>("clip_eps");
  cfg.objective.kl_coef = rc.get<double>("kl_coef");
  cfg.objective.variant = rc.get<std::string>("variant") == "dr_grpo" ? GrpoVariant::dr_grpo : GrpoVariant::grpo;
  cfg.generation.max_new_tokens = rc.get<std::size_t>("generation.max_new_tokens");
  cfg.generation.temperature = rc.get<double>("generation.temperature");
  cfg.generation.stop_ids = {tok.end(), tok.eos()};
  const RewardFn reward = [&](std::size_t i, std::span<const TokenId> response) {
    return verify(kinds[i], tok.decode(response, SpecialPolicy::skip), truths[i], wheres[i]).reward;
  };
  const auto logs = train_grpo(policy, prompts, reward, cfg, Rng(rc.seed()));
  save_policy(policy, out);
  write_step_log(out.add("steps.csv"), logs);
  json metrics = loss_summary(logs);
  json rewards = json::array();
  for (const auto& l : logs) rewards.push_back(l.mean_reward.value_or(0.0));
  metrics["mean_reward"] = rewards;
  write_json(out.add("metrics.json"), metrics);
}

void cmd_eval(const RunConfig& rc, Outputs& out) {
  const auto tok = load_tokenizer(rc);
  const auto policy = load_policy(rc, tok);
  const auto tasks = load_suite(rc.get<std::string>("suite"));
  std::optional<std::size_t> step;
  if (rc.has("step")) step = rc.get<std::size_t>("step");
  const auto report = run_suite(policy, tok, tasks, step);
  write_json(out.add("eval_report.json"), report.to_json());
  if (rc.has("monitoring_csv")) {
    fs::path csv = rc.get<std::string>("monitoring_csv");
    if (csv.is_relative()) csv = out.dir / csv;
    append_monitoring_row(csv, report);
  }
}

json stats_json(const TokenStats& s) {
  json j{{"tokens", s.tokens}, {"chars", s.chars}, {"words", s.words}};
  j["cpt"] = s.cpt ? json(*s.cpt) : json(nullptr);
  j["tpw"] = s.tpw ? json(*s.tpw) : json(nullptr);
  return j;
}

void cmd_tokstats(const RunConfig& rc, Outputs& out) {
  const auto tok = load_tokenizer(rc);
  const fs::path path = rc.get<std::string>("texts");
  json items = json::array();
  std::map<std::string, TokenStats> by_lang;
  TokenStats total;
  auto accumulate = [](TokenStats& acc, const TokenStats& s) {
    acc.tokens += s.tokens;
    acc.chars += s.chars;
    acc.words += s.words;
  };
  for (const auto& l : read_jsonl(path)) {
    const auto s = token_stats(tok, text_field(l, path));
    json j = stats_json(s);
    if (l.value.contains("lang")) {
      const auto lang = l.value.at("lang").get<std::string>();
      j["lang"] = lang;
      accumulate(by_lang[lang], s);
    }
    accumulate(total, s);
    items.push_back(j);
  }
  auto finish = [](const TokenStats& acc) {
    TokenStats s = acc;
    if (s.tokens) s.cpt = static_cast<double>(s.chars) / static_cast<double>(s.tokens);
    if (s.words) s.tpw = static_cast<double>(s.tokens) / static_cast<double>(s.words);
    return stats_json(s);
  };
  json langs = json::object();
  for (const auto& [lang, s] : by_lang) langs[lang] = finish(s);
  write_json(out.add("tokstats.json"), json{{"items", items}, {"by_lang", langs}, {"total", finish(total)}});
}

json report_json(const ScrubReport& r) {
  return json{{"pesel", r.pesel}, {"phone", r.phone}, {"email", r.email}, {"url", r.url}, {"total", r.total()}};
}

ScrubReport scrub_file(const fs::path& src, const fs::path& dst, bool dedup) {
  ScrubReport rep;
  std::ifstream in(src, std::ios::binary);
  if (!in) throw DataError("cannot open " + src.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (src.extension() == ".jsonl") {
    std::vector<std::string> texts;
    std::vector<json> records;
    for (const auto& l : read_jsonl(src)) {
      auto r = scrub(text_field(l, src));
      rep += r.report;
      json rec = l.value;
      rec["text"] = r.text;
      records.push_back(rec);
      texts.push_back(r.text);
    }
    std::string body;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (dedup && !seen.insert(texts[i]).second) continue;
      body += records[i].dump() + "\n";
    }
    write_text(dst, body);
  } else {
    auto r = scrub(ss.str());
    rep = r.report;
    write_text(dst, r.text);
  }
  return rep;
}

void cmd_scrub(const RunConfig& rc, Outputs& out) {
  const fs::path input = rc.get<std::string>("input");
  const bool dedup = rc.get<bool>("dedup");
  std::vector<fs::path> files;
  if (fs::is_directory(input)) {
    for (const auto& e : fs::recursive_directory_iterator(input))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(input);
  }
  const fs::path root = fs::is_directory(input) ? input : input.parent_path();
  json per_file = json::object();
  ScrubReport total;
  for (const auto& f : files) {
    const std::string rel = fs::relative(f, root).generic_string();
    const auto rep = scrub_file(f, out.add("scrubbed/" + rel), dedup);
    write_json(out.add("scrubbed/" + rel + ".scrub.json"), report_json(rep));
    per_file[rel] = report_json(rep);
    total += rep;
  }
  write_json(out.add("scrub_report.json"), json{{"files", per_file}, {"total", report_json(total)}});
}

void cmd_pack(const RunConfig& rc, Outputs& out) {
  const auto tok = load_tokenizer(rc);
  const auto seqs = chat_sequences(rc.get<std::string>("data"), tok);
  const auto batches = pack_samples(seqs, rc.get<std::size_t>("pack_len"));
  std::string body;
  std::size_t tokens = 0;
  for (const auto& b : batches) {
    body += json{{"token_ids", b.token_ids}, {"segment_ids", b.segment_ids}, {"loss_mask", b.loss_mask},
                 {"positions", b.positions}}
                .dump() +
            "\n";
    tokens += b.size();
  }
  write_text(out.add("packed.jsonl"), body);
  const double fill = static_cast<double>(tokens) /
                      static_cast<double>(batches.size() * rc.get<std::size_t>("pack_len"));
  write_json(out.add("pack_stats.json"),
             json{{"samples", seqs.size()}, {"rows", batches.size()}, {"tokens", tokens}, {"fill", fill}});
}

void cmd_verify(const RunConfig& rc, Outputs& out) {
  const auto cases = read_verifier_corpus(rc.get<std::string>("corpus"));
  write_json(out.add("verify_report.json"), score_corpus(cases).to_json());
}

}  // namespace

void dispatch(const RunConfig& rc, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  Outputs out{out_dir, {}};
  const std::string& c = rc.command;
  if (c == "init") cmd_init(rc, out);
  else if (c == "train-tokenizer") cmd_train_tokenizer(rc, out);
  else if (c == "upscale") cmd_upscale(rc, out);
  else if (c == "merge") cmd_merge(rc, out);
  else if (c == "train-pretrain") run_lm(rc, out, false);
  else if (c == "train-sft") run_lm(rc, out, true);
  else if (c == "train-dpo") cmd_train_dpo(rc, out);
  else if (c == "train-grpo") cmd_train_grpo(rc, out);
  else if (c == "eval") cmd_eval(rc, out);
  else if (c == "tokstats") cmd_tokstats(rc, out);
  else if (c == "scrub") cmd_scrub(rc, out);
  else if (c == "pack") cmd_pack(rc, out);
  else if (c == "verify") cmd_verify(rc, out);
  else throw ConfigError("unknown command '" + c + "'");

  std::sort(out.files.begin(), out.files.end());
  write_json(out_dir / "run_manifest.json", json{{"command", c},
                                                 {"version", std::string(kVersion)},
                                                 {"seed", rc.seed()},
                                                 {"config_hash", rc.hash()},
                                                 {"config", rc.declared},
                                                 {"outputs", out.files}});
}

namespace {

const char* category(ErrorKind k) {
  switch (k) {
    case ErrorKind::config: return "config";
    case ErrorKind::data: return "data";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::internal: return "internal";
  }
  return "internal";
}

int fail(ErrorKind k, const std::string& msg) {
  std::string line = msg;
  std::replace(line.begin(), line.end(), '\n', ' ');
  std::cerr << "forge: error[" << category(k) << "]: " << line << "\n";
  return static_cast<int>(k);
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"forge: small-scale LLM training pipeline"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  for (const auto& name : config_commands()) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON config file")->required();
    sub->add_option("--out", out_dir, "output directory (overrides the config's \"out\")");
    sub->add_option("--seed", seed, "seed (overrides the config's \"seed\")");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail(ErrorKind::config, e.what());
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    auto env = environment_overrides();
    if (seed) env["FORGE__seed"] = std::to_string(*seed);
    const auto rc = validate_config(command, config_path, env);
    fs::path out;
    if (!out_dir.empty()) {
      out = fs::absolute(out_dir);
    } else if (rc.has("out")) {
      out = rc.get<std::string>("out");
      if (out.is_relative()) out = fs::absolute(config_path).parent_path() / out;
    } else {
      throw ConfigError("out: required (config key or --out)");
    }
    dispatch(rc, out.lexically_normal());
    return 0;
  } catch (const Error& e) {
    return fail(e.kind(), e.what());
  } catch (const json::exception& e) {
    return fail(ErrorKind::data, e.what());
  } catch (const std::exception& e) {
    return fail(ErrorKind::internal, e.what());
  }
}

}  // namespace forge
