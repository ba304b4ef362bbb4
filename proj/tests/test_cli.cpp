#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "forge/checkpoint.hpp"
#include "forge/cli.hpp"
#include "forge/config.hpp"
#include "forge/error.hpp"
#include "forge/scrub.hpp"

using namespace forge;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = FORGE_FIXTURES;

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("forge_cli_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

// Any existing files satisfy the input-path checks of a config.
json sft_minimal() {
  return json{{"checkpoint", (kFixtures / "pesel.txt").string()},
              {"tokenizer", (kFixtures / "pesel.txt").string()},
              {"data", {{"train", (kFixtures / "toy/sft.jsonl").string()}}}};
}

std::string config_error(const std::string& command, const json& j, const EnvOverrides& env = {}) {
  try {
    resolve_config(command, j, kFixtures, env);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

bool contains(const std::string& s, const std::string& part) { return s.find(part) != std::string::npos; }

// ---- config -------------------------------------------------------------------

TEST(Config, SftDefaults) {
  const auto rc = resolve_config("train-sft", sft_minimal(), kFixtures);
  EXPECT_EQ(rc.get<double>("schedule.learning_rate"), 5e-6);
  EXPECT_EQ(rc.get<std::size_t>("schedule.warmup_steps"), 100u);
  EXPECT_EQ(rc.get<std::string>("schedule.shape"), "constant");
  EXPECT_EQ(rc.get<double>("adamw.beta1"), 0.9);
  EXPECT_EQ(rc.get<double>("adamw.beta2"), 0.95);
  EXPECT_EQ(rc.get<double>("adamw.weight_decay"), 0.05);
  EXPECT_EQ(rc.get<double>("max_grad_norm"), 1.0);
  EXPECT_EQ(rc.get<double>("epochs"), 3.0);
  EXPECT_EQ(rc.get<std::size_t>("micro_batch") * rc.get<std::size_t>("grad_accum"), 64u);
  EXPECT_EQ(rc.seed(), 0u);
  EXPECT_FALSE(rc.has("schedule.total_steps"));
  const auto loop = train_loop(rc, 300);
  EXPECT_EQ(loop.schedule.peak_lr, 5e-6);
  EXPECT_EQ(loop.schedule.total_steps, 300u);
  EXPECT_EQ(loop.schedule.shape, ScheduleShape::constant);
}

TEST(Config, PretrainDpoGrpoDefaults) {
  auto j = sft_minimal();
  const auto pre = resolve_config("train-pretrain", j, kFixtures);
  const auto s = schedule_spec(pre, 270000);
  EXPECT_EQ(s.peak_lr, 2.5e-5);
  EXPECT_EQ(s.min_lr, 9e-6);
  EXPECT_EQ(s.warmup_steps, 50u);
  EXPECT_EQ(s.shape, ScheduleShape::cosine);
  EXPECT_EQ(pre.get<double>("adamw.weight_decay"), 0.1);
  EXPECT_EQ(pre.get<std::size_t>("grad_accum"), 256u);

  const auto dpo = resolve_config("train-dpo", j, kFixtures);
  EXPECT_EQ(dpo.get<double>("schedule.learning_rate"), 5e-7);
  EXPECT_EQ(dpo.get<std::size_t>("schedule.warmup_steps"), 50u);
  EXPECT_EQ(dpo.get<double>("beta"), 0.1);
  EXPECT_EQ(dpo.get<double>("lambda"), 5.0);
  EXPECT_EQ(dpo.get<std::string>("variant"), "dpop");

  const auto grpo = resolve_config("train-grpo", j, kFixtures);
  EXPECT_EQ(grpo.get<double>("schedule.learning_rate"), 1e-6);
  EXPECT_EQ(grpo.get<double>("kl_coef"), 0.001);
  EXPECT_EQ(grpo.get<double>("clip_eps"), 0.2);
  EXPECT_EQ(grpo.get<std::size_t>("group_size"), 8u);
  EXPECT_EQ(grpo.get<std::size_t>("micro_batch") * grpo.get<std::size_t>("grad_accum"), 128u);
}

TEST(Config, WarmupBeyondTotalNamesBothFields) {
  auto j = sft_minimal();
  j["schedule"] = {{"warmup_steps", 200}, {"total_steps", 100}};
  const auto msg = config_error("train-sft", j);
  EXPECT_TRUE(contains(msg, "schedule.warmup_steps")) << msg;
  EXPECT_TRUE(contains(msg, "schedule.total_steps")) << msg;

  const auto rc = resolve_config("train-sft", sft_minimal(), kFixtures);
  try {
    schedule_spec(rc, 40);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_TRUE(contains(e.what(), "schedule.warmup_steps")) << e.what();
    EXPECT_TRUE(contains(e.what(), "derived from epochs")) << e.what();
  }
}

TEST(Config, UnknownKeySuggestsNearest) {
  auto j = sft_minimal();
  j["learning_rte"] = 1e-5;
  auto msg = config_error("train-sft", j);
  EXPECT_TRUE(contains(msg, "learning_rte: unknown key")) << msg;
  EXPECT_TRUE(contains(msg, "did you mean 'schedule.learning_rate'")) << msg;

  j = sft_minimal();
  j["schedule"] = {{"warmup_step", 5}};
  msg = config_error("train-sft", j);
  EXPECT_TRUE(contains(msg, "schedule.warmup_step: unknown key")) << msg;
  EXPECT_TRUE(contains(msg, "'schedule.warmup_steps'")) << msg;

  j = sft_minimal();
  j["zzzzzzzzzzzz"] = 1;
  msg = config_error("train-sft", j);
  EXPECT_TRUE(contains(msg, "unknown key")) << msg;
  EXPECT_FALSE(contains(msg, "did you mean")) << msg;
}

TEST(Config, NearestKey) {
  const std::vector<std::string> known{"schedule.learning_rate", "seed", "pack_len"};
  EXPECT_EQ(nearest_key("sed", known), "seed");
  EXPECT_EQ(nearest_key("pack_length", known), "pack_len");
  EXPECT_EQ(nearest_key("optimizer", known), "");
}

TEST(Config, FieldErrorsCarryLocators) {
  auto j = sft_minimal();
  j["data"].erase("train");
  EXPECT_TRUE(contains(config_error("train-sft", j), "data.train: required field missing"));

  j = sft_minimal();
  j["micro_batch"] = "eight";
  EXPECT_TRUE(contains(config_error("train-sft", j), "micro_batch: expected a non-negative integer"));

  j = sft_minimal();
  j["micro_batch"] = -1;
  EXPECT_TRUE(contains(config_error("train-sft", j), "micro_batch"));

  j = sft_minimal();
  j["micro_batch"] = 0;
  EXPECT_TRUE(contains(config_error("train-sft", j), "micro_batch: must be > 0"));

  j = sft_minimal();
  j["data"]["train"] = "no/such/file.jsonl";
  EXPECT_TRUE(contains(config_error("train-sft", j), "data.train: path does not exist"));

  j = sft_minimal();
  j["schedule"] = {{"shape", "linear"}};
  EXPECT_TRUE(contains(config_error("train-sft", j), "schedule.shape: 'linear' is not one of cosine, constant"));

  j = sft_minimal();
  j["schedule"] = {{"learning_rate", 1e-5}, {"min_learning_rate", 1e-4}};
  const auto msg = config_error("train-sft", j);
  EXPECT_TRUE(contains(msg, "schedule.min_learning_rate") && contains(msg, "schedule.learning_rate")) << msg;

  j = sft_minimal();
  j["data"] = 3;
  EXPECT_TRUE(contains(config_error("train-sft", j), "data: expected an object"));

  EXPECT_TRUE(contains(config_error("train-sft", json::array()), "top level"));
  EXPECT_THROW(resolve_config("fly", json::object(), kFixtures), ConfigError);
}

TEST(Config, CrossFieldChecks) {
  auto j = sft_minimal();
  j["variant"] = "dpo";
  j["lambda"] = 5.0;
  auto msg = config_error("train-dpo", j);
  EXPECT_TRUE(contains(msg, "lambda") && contains(msg, "variant")) << msg;
  j.erase("lambda");
  EXPECT_NO_THROW(resolve_config("train-dpo", j, kFixtures));

  const std::string ck = (kFixtures / "pesel.txt").string();
  msg = config_error("merge", json{{"checkpoints", {ck, ck}}, {"weights", {1.0}}});
  EXPECT_TRUE(contains(msg, "weights") && contains(msg, "checkpoints")) << msg;

  msg = config_error("upscale", json{{"checkpoint", ck}, {"n", 4}, {"m", 4}});
  EXPECT_TRUE(contains(msg, "m (4)") && contains(msg, "n (4)")) << msg;

  j = sft_minimal();
  j["monitor"] = {{"every", 10}};
  msg = config_error("train-sft", j);
  EXPECT_TRUE(contains(msg, "monitor.every") && contains(msg, "monitor.suite")) << msg;

  j = sft_minimal();
  j["group_size"] = 1;
  EXPECT_TRUE(contains(config_error("train-grpo", j), "group_size"));
}

TEST(Config, EnvironmentOverrides) {
  EnvOverrides env{{"FORGE__schedule__learning_rate", "1e-4"}, {"FORGE__seed", "17"}};
  auto rc = resolve_config("train-sft", sft_minimal(), kFixtures, env);
  EXPECT_EQ(rc.get<double>("schedule.learning_rate"), 1e-4);
  EXPECT_EQ(rc.seed(), 17u);
  EXPECT_TRUE(rc.explicit_keys.contains("schedule.learning_rate"));

  // A key that belongs to another command is ignored; one unknown everywhere fails.
  env = {{"FORGE__suite", "x"}};
  EXPECT_NO_THROW(resolve_config("train-sft", sft_minimal(), kFixtures, env));
  env = {{"FORGE__schedule__learning_rte", "1"}};
  EXPECT_TRUE(contains(config_error("train-sft", sft_minimal(), env), "FORGE__schedule__learning_rte"));
  env = {{"FORGE__micro_batch", "many"}};
  EXPECT_TRUE(contains(config_error("train-sft", sft_minimal(), env), "micro_batch"));
  env = {{"FORGE__schedule__shape", "cosine"}};
  EXPECT_EQ(resolve_config("train-sft", sft_minimal(), kFixtures, env).get<std::string>("schedule.shape"), "cosine");
}

TEST(Config, HashTracksDeclaredValues) {
  const auto a = resolve_config("train-sft", sft_minimal(), kFixtures);
  const auto b = resolve_config("train-sft", sft_minimal(), kFixtures);
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a.hash().size(), 16u);
  auto j = sft_minimal();
  j["seed"] = 1;
  EXPECT_NE(resolve_config("train-sft", j, kFixtures).hash(), a.hash());

  // Relative inputs hash the same from different working locations.
  const auto d1 = scratch("hash1"), d2 = scratch("hash2");
  for (const auto& d : {d1, d2}) write(d / "f.txt", "x");
  const json rel{{"checkpoint", "f.txt"}, {"tokenizer", "f.txt"}, {"data", {{"train", "f.txt"}}}};
  const auto r1 = resolve_config("train-sft", rel, d1), r2 = resolve_config("train-sft", rel, d2);
  EXPECT_EQ(r1.hash(), r2.hash());
  EXPECT_NE(r1.get<std::string>("checkpoint"), r2.get<std::string>("checkpoint"));
}

TEST(Config, StepsForEpochs) {
  EXPECT_EQ(steps_for_epochs(3, 8, 64), 1u);
  EXPECT_EQ(steps_for_epochs(3, 100, 64), 5u);
  EXPECT_EQ(steps_for_epochs(1, 128, 64), 2u);
  EXPECT_THROW(steps_for_epochs(0, 8, 1), ConfigError);
  EXPECT_THROW(steps_for_epochs(1, 0, 1), DataError);
}

TEST(Config, EveryCommandHasASchema) {
  for (const char* c : {"init", "train-tokenizer", "upscale", "merge", "train-pretrain", "train-sft", "train-dpo",
                        "train-grpo", "eval", "tokstats", "scrub", "pack", "verify"}) {
    EXPECT_NO_THROW(schema_for(c)) << c;
    EXPECT_NE(schema_for(c).find("seed"), nullptr) << c;
  }
}

// ---- process-level behaviour ---------------------------------------------------

struct Run {
  int status = -1;
  std::string err;
};

Run forge_exe(const std::string& args, const std::string& env = "") {
  const auto errfile = fs::temp_directory_path() / ("forge_cli_err_" + std::to_string(::getpid()));
  const std::string cmd = env + " " + std::string(FORGE_BIN) + " " + args + " 2> " + errfile.string() + " > /dev/null";
  const int raw = std::system(cmd.c_str());
  Run r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.err = slurp(errfile);
  return r;
}

bool one_line(const std::string& s) { return !s.empty() && s.find('\n') == s.size() - 1; }

fs::path write_config(const fs::path& dir, const std::string& name, const json& j) {
  write(dir / name, j.dump(2));
  return dir / name;
}

TEST(Cli, ExitCodesAndErrorLine) {
  const auto dir = scratch("exit");
  auto j = sft_minimal();
  j["learning_rte"] = 1;
  auto r = forge_exe("train-sft --config " + write_config(dir, "bad.json", j).string() + " --out " + dir.string());
  EXPECT_EQ(r.status, 2);
  EXPECT_TRUE(one_line(r.err)) << r.err;
  EXPECT_EQ(r.err.rfind("forge: error[config]: ", 0), 0u) << r.err;

  r = forge_exe("train-sft");
  EXPECT_EQ(r.status, 2);
  EXPECT_EQ(r.err.rfind("forge: error[config]: ", 0), 0u) << r.err;
  EXPECT_TRUE(one_line(r.err)) << r.err;

  r = forge_exe("bogus --config x");
  EXPECT_EQ(r.status, 2);

  // Out directory missing from both the config and the command line.
  auto v = json{{"corpus", (kFixtures / "verifier_corpus.jsonl").string()}};
  r = forge_exe("verify --config " + write_config(dir, "v.json", v).string());
  EXPECT_EQ(r.status, 2);
  EXPECT_TRUE(contains(r.err, "out: required")) << r.err;

  // Data error: malformed preference line, reported with file:line.
  write(dir / "bad.jsonl", "{\"text\": \"ok\"}\nnot json\n");
  auto t = json{{"tokenizer", (kFixtures / "pesel.txt").string()}, {"texts", (dir / "bad.jsonl").string()}};
  write(dir / "tok.json", "");
  r = forge_exe("tokstats --config " + write_config(dir, "t.json", t).string() + " --out " + dir.string());
  EXPECT_EQ(r.status, 3);
  EXPECT_EQ(r.err.rfind("forge: error[data]: ", 0), 0u) << r.err;

  r = forge_exe("--version");
  EXPECT_EQ(r.status, 0);
}

TEST(Cli, EnvOverrideReachesProcess) {
  const auto dir = scratch("env");
  auto v = json{{"corpus", (kFixtures / "verifier_corpus.jsonl").string()}, {"out", "o"}};
  const auto cfg = write_config(dir, "v.json", v).string();
  auto r = forge_exe("verify --config " + cfg, "FORGE__seed=42");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(json::parse(slurp(dir / "o/run_manifest.json")).at("seed"), 42);
  r = forge_exe("verify --config " + cfg + " --seed 7");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(json::parse(slurp(dir / "o/run_manifest.json")).at("seed"), 7);
  r = forge_exe("verify --config " + cfg, "FORGE__nonsense=1");
  EXPECT_EQ(r.status, 2);
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "forge");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

int run(const std::string& command, const fs::path& config, const fs::path& out) {
  return cli({command, "--config", config.string(), "--out", out.string()});
}

TEST(Cli, VerifyCorpusReport) {
  const auto dir = scratch("verify");
  const auto cfg = write_config(dir, "v.json", json{{"corpus", (kFixtures / "verifier_corpus.jsonl").string()}});
  ASSERT_EQ(run("verify", cfg, dir / "out"), 0);
  const auto rep = json::parse(slurp(dir / "out/verify_report.json"));
  EXPECT_EQ(rep.at("cases"), rep.at("agree"));
  const auto manifest = json::parse(slurp(dir / "out/run_manifest.json"));
  EXPECT_EQ(manifest.at("command"), "verify");
  EXPECT_EQ(manifest.at("version"), std::string(kVersion));
  EXPECT_EQ(manifest.at("config_hash").get<std::string>().size(), 16u);
  EXPECT_EQ(manifest.at("outputs"), json::array({"verify_report.json"}));
}

TEST(Cli, ScrubDirectoryCountsMatchFixture) {
  const auto dir = scratch("scrub");
  fs::create_directories(dir / "in/sub");
  fs::copy_file(kFixtures / "scrub_corpus.jsonl", dir / "in/corpus.jsonl");
  write(dir / "in/sub/note.txt", "Kontakt: jan@example.com, tel. 600 700 800, PESEL 44051401359.\n");
  ScrubReport want;
  std::ifstream in(kFixtures / "scrub_corpus.jsonl");
  std::vector<std::string> expected;
  for (std::string line; std::getline(in, line);) {
    const auto j = json::parse(line);
    want.pesel += j.at("counts").at("pesel").get<std::size_t>();
    want.phone += j.at("counts").at("phone").get<std::size_t>();
    want.email += j.at("counts").at("email").get<std::size_t>();
    want.url += j.at("counts").at("url").get<std::size_t>();
    expected.push_back(j.at("expected").get<std::string>());
  }
  const auto cfg = write_config(dir, "s.json", json{{"input", (dir / "in").string()}});
  ASSERT_EQ(run("scrub", cfg, dir / "out"), 0);
  const auto side = json::parse(slurp(dir / "out/scrubbed/corpus.jsonl.scrub.json"));
  EXPECT_EQ(side.at("pesel"), want.pesel);
  EXPECT_EQ(side.at("phone"), want.phone);
  EXPECT_EQ(side.at("email"), want.email);
  EXPECT_EQ(side.at("url"), want.url);
  const auto note = json::parse(slurp(dir / "out/scrubbed/sub/note.txt.scrub.json"));
  EXPECT_EQ(note, json({{"pesel", 1}, {"phone", 1}, {"email", 1}, {"url", 0}, {"total", 3}}));
  EXPECT_EQ(slurp(dir / "out/scrubbed/sub/note.txt"), "Kontakt: [EMAIL], tel. [PHONE], PESEL [PESEL].\n");
  std::ifstream out(dir / "out/scrubbed/corpus.jsonl");
  std::size_t k = 0;
  for (std::string line; std::getline(out, line); ++k) EXPECT_EQ(json::parse(line).at("text"), expected.at(k));
  EXPECT_EQ(k, expected.size());
  const auto total = json::parse(slurp(dir / "out/scrub_report.json")).at("total");
  EXPECT_EQ(total.at("total"), want.total() + 3);

  // Scrubbing the scrubbed output finds nothing more.
  const auto again = write_config(dir, "s2.json", json{{"input", (dir / "out/scrubbed").string()}});
  ASSERT_EQ(run("scrub", again, dir / "out2"), 0);
  EXPECT_EQ(json::parse(slurp(dir / "out2/scrub_report.json")).at("total").at("total"), 0);
}

struct Workspace {
  fs::path dir;
  fs::path tok;
};

Workspace tokenizer_workspace(const std::string& name) {
  Workspace w{scratch(name), {}};
  fs::create_directories(w.dir / "data");
  for (const char* f : {"sft.jsonl", "dpo.jsonl", "rl.jsonl"}) fs::copy_file(kFixtures / "toy" / f, w.dir / "data" / f);
  fs::copy(kFixtures / "toy/eval", w.dir / "data/eval");
  const auto cfg =
      write_config(w.dir, "tok.json", json{{"corpus", {"data/sft.jsonl"}}, {"format", "chat"}, {"merges", 20}});
  EXPECT_EQ(run("train-tokenizer", cfg, w.dir / "tokenizer"), 0);
  w.tok = w.dir / "tokenizer/tokenizer.json";
  return w;
}

TEST(Cli, TokstatsAndPack) {
  const auto w = tokenizer_workspace("tokpack");
  auto cfg = write_config(w.dir, "ts.json",
                          json{{"tokenizer", w.tok.string()}, {"texts", (kFixtures / "token_stats_texts.jsonl").string()}});
  ASSERT_EQ(run("tokstats", cfg, w.dir / "ts"), 0);
  const auto stats = json::parse(slurp(w.dir / "ts/tokstats.json"));
  std::ifstream in(kFixtures / "token_stats_texts.jsonl");
  std::size_t k = 0;
  for (std::string line; std::getline(in, line); ++k) {
    const auto want = json::parse(line);
    EXPECT_EQ(stats.at("items")[k].at("chars"), want.at("chars")) << line;
    EXPECT_EQ(stats.at("items")[k].at("words"), want.at("words")) << line;
  }

  cfg = write_config(w.dir, "pk.json",
                     json{{"tokenizer", w.tok.string()}, {"data", "data/sft.jsonl"}, {"pack_len", 256}});
  ASSERT_EQ(run("pack", cfg, w.dir / "pk"), 0);
  const auto ps = json::parse(slurp(w.dir / "pk/pack_stats.json"));
  EXPECT_EQ(ps.at("samples"), 8);
  EXPECT_GE(ps.at("rows").get<int>(), 1);
  EXPECT_LE(ps.at("fill").get<double>(), 1.0);
}

TEST(Cli, UpscaleSftMergeEvalPipeline) {
  const auto w = tokenizer_workspace("pipeline");
  const json model{{"n_layers", 4}, {"d_model", 16},    {"n_heads", 2},     {"n_kv_heads", 1},
                   {"head_size", 8}, {"d_ff", 32},      {"rope_theta", 1e4}, {"native_ctx", 256},
                   {"extended_ctx", 256}};
  auto cfg = write_config(w.dir, "init.json", json{{"model", model}, {"tokenizer", w.tok.string()}, {"seed", 5}});
  ASSERT_EQ(run("init", cfg, w.dir / "base"), 0);

  cfg = write_config(w.dir, "up.json", json{{"checkpoint", "base/model.ckpt"}, {"n", 4}, {"m", 1}});
  ASSERT_EQ(run("upscale", cfg, w.dir / "up"), 0);
  const auto up = load_checkpoint(w.dir / "up/model.ckpt");
  EXPECT_EQ(up.config.n_layers, 6u);
  EXPECT_EQ(json::parse(slurp(w.dir / "up/layer_map.json")).at("source_layers"), json({0, 1, 2, 1, 2, 3}));

  const json sft{{"checkpoint", "up/model.ckpt"},
                 {"tokenizer", w.tok.string()},
                 {"data", {{"train", "data/sft.jsonl"}}},
                 {"schedule", {{"learning_rate", 3e-3}, {"warmup_steps", 2}, {"total_steps", 12}}},
                 {"micro_batch", 4},
                 {"grad_accum", 2},
                 {"pack_len", 512},
                 {"monitor", {{"suite", "data/eval/suite.json"}, {"every", 6}}},
                 {"seed", 9}};
  cfg = write_config(w.dir, "sft.json", sft);
  ASSERT_EQ(run("train-sft", cfg, w.dir / "sft"), 0);
  const auto metrics = json::parse(slurp(w.dir / "sft/metrics.json"));
  EXPECT_EQ(metrics.at("steps"), 12);
  EXPECT_LT(metrics.at("train_loss").get<double>(), metrics.at("train_loss_before").get<double>());
  std::ifstream mon(w.dir / "sft/monitoring.csv");
  std::string header;
  std::getline(mon, header);
  EXPECT_EQ(header, "step,arith_gen,arith_mc_5shot,average");

  // A second identical run reproduces every artifact bit for bit.
  ASSERT_EQ(run("train-sft", cfg, w.dir / "sft_again"), 0);
  for (const char* f : {"model.ckpt", "steps.csv", "metrics.json", "monitoring.csv", "run_manifest.json"})
    EXPECT_EQ(slurp(w.dir / "sft" / f), slurp(w.dir / "sft_again" / f)) << f;

  cfg = write_config(w.dir, "merge.json", json{{"checkpoints", {"up/model.ckpt", "sft/model.ckpt"}}});
  ASSERT_EQ(run("merge", cfg, w.dir / "merged"), 0);

  cfg = write_config(w.dir, "eval.json",
                     json{{"checkpoint", "merged/model.ckpt"},
                          {"tokenizer", w.tok.string()},
                          {"suite", "data/eval/suite.json"},
                          {"step", 12},
                          {"monitoring_csv", "curve.csv"}});
  ASSERT_EQ(run("eval", cfg, w.dir / "eval1"), 0);
  ASSERT_EQ(run("eval", cfg, w.dir / "eval2"), 0);
  EXPECT_EQ(slurp(w.dir / "eval1/eval_report.json"), slurp(w.dir / "eval2/eval_report.json"));
  const auto report = json::parse(slurp(w.dir / "eval1/eval_report.json"));
  EXPECT_EQ(report.at("step"), 12);
  EXPECT_EQ(report.at("tasks").size(), 2u);
  EXPECT_TRUE(fs::exists(w.dir / "eval1/curve.csv"));

  const auto manifest = json::parse(slurp(w.dir / "eval1/run_manifest.json"));
  EXPECT_EQ(manifest.at("seed"), 0);
  EXPECT_EQ(manifest.at("config").at("checkpoint"), "merged/model.ckpt");
}

TEST(Cli, VocabMismatchIsDataError) {
  const auto w = tokenizer_workspace("vocab");
  const json model{{"n_layers", 1}, {"d_model", 8}, {"n_heads", 2},   {"n_kv_heads", 1},
                   {"head_size", 4}, {"d_ff", 16},  {"vocab_size", 300}, {"native_ctx", 64}, {"extended_ctx", 64}};
  auto cfg = write_config(w.dir, "init.json", json{{"model", model}});
  ASSERT_EQ(run("init", cfg, w.dir / "base"), 0);
  cfg = write_config(w.dir, "init2.json", json{{"model", model}, {"tokenizer", w.tok.string()}});
  EXPECT_EQ(run("init", cfg, w.dir / "base2"), 2);
  cfg = write_config(w.dir, "ev.json",
                     json{{"checkpoint", "base/model.ckpt"}, {"tokenizer", w.tok.string()}, {"suite", "data/eval/suite.json"}});
  EXPECT_EQ(run("eval", cfg, w.dir / "ev"), 3);
}

TEST(Cli, DivergentTrainingIsNumericFailure) {
  const auto w = tokenizer_workspace("nan");
  const json model{{"n_layers", 1}, {"d_model", 8}, {"n_heads", 2}, {"n_kv_heads", 1}, {"head_size", 4},
                   {"d_ff", 16},    {"native_ctx", 256}, {"extended_ctx", 256}};
  auto cfg = write_config(w.dir, "init.json", json{{"model", model}, {"tokenizer", w.tok.string()}});
  ASSERT_EQ(run("init", cfg, w.dir / "base"), 0);
  const json sft{{"checkpoint", "base/model.ckpt"},
                 {"tokenizer", w.tok.string()},
                 {"data", {{"train", "data/sft.jsonl"}}},
                 {"schedule", {{"learning_rate", 1e300}, {"warmup_steps", 0}, {"total_steps", 5}}},
                 {"micro_batch", 8},
                 {"grad_accum", 1},
                 {"pack_len", 512}};
  cfg = write_config(w.dir, "sft.json", sft);
  EXPECT_EQ(run("train-sft", cfg, w.dir / "sft"), 4);
}

}  // namespace
