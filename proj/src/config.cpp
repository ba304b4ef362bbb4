#include "forge/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>

#include "forge/error.hpp"
#include "forge/eval.hpp"
#include "forge/rng.hpp"

extern char** environ;

namespace forge {

namespace {

constexpr FieldType kInt = FieldType::integer;
constexpr FieldType kNum = FieldType::number;
constexpr FieldType kStr = FieldType::string;
constexpr FieldType kBool = FieldType::boolean;
constexpr FieldType kArr = FieldType::array;
constexpr FieldType kObj = FieldType::object;

Field def(std::string key, FieldType t, json fallback) { return {std::move(key), t, std::move(fallback), false, false}; }
Field opt(std::string key, FieldType t) { return {std::move(key), t, nullptr, false, false}; }
Field req(std::string key, FieldType t) { return {std::move(key), t, nullptr, true, false}; }
Field in_req(std::string key, FieldType t = kStr) { return {std::move(key), t, nullptr, true, true}; }
Field in_opt(std::string key, FieldType t = kStr) { return {std::move(key), t, nullptr, false, true}; }

struct LoopDefaults {
  double lr;
  double min_lr;
  std::size_t warmup;
  const char* shape;
  double weight_decay;
  std::size_t micro_batch;
  std::size_t grad_accum;
};

void add_loop(std::vector<Field>& f, const LoopDefaults& d) {
  f.push_back(def("schedule.learning_rate", kNum, d.lr));
  f.push_back(def("schedule.min_learning_rate", kNum, d.min_lr));
  f.push_back(def("schedule.warmup_steps", kInt, d.warmup));
  f.push_back(opt("schedule.total_steps", kInt));
  f.push_back(def("schedule.shape", kStr, d.shape));
  f.push_back(def("adamw.beta1", kNum, 0.9));
  f.push_back(def("adamw.beta2", kNum, 0.95));
  f.push_back(def("adamw.eps", kNum, 1e-8));
  f.push_back(def("adamw.weight_decay", kNum, d.weight_decay));
  f.push_back(def("max_grad_norm", kNum, 1.0));
  f.push_back(def("micro_batch", kInt, d.micro_batch));
  f.push_back(def("grad_accum", kInt, d.grad_accum));
}

void add_common(std::vector<Field>& f) {
  f.push_back(def("seed", kInt, 0));
  f.push_back(opt("out", kStr));
}

void add_policy_inputs(std::vector<Field>& f) {
  f.push_back(in_req("checkpoint"));
  f.push_back(in_req("tokenizer"));
}

std::vector<Schema> build_schemas() {
  std::vector<Schema> all;
  auto add = [&](std::string name, std::vector<Field> fields) {
    add_common(fields);
    all.push_back({std::move(name), std::move(fields)});
  };

  add("init", {def("model", kObj, to_json(ModelConfig{})), in_opt("tokenizer"), def("init_std", kNum, 0.02)});

  add("train-tokenizer", {in_req("corpus", kArr), def("format", kStr, "text"), req("merges", kInt),
                          def("base_size", kInt, 0)});

  add("upscale", {in_req("checkpoint"), opt("n", kInt), def("m", kInt, 7)});

  add("merge", {in_req("checkpoints", kArr), opt("weights", kArr)});

  {
    std::vector<Field> f;
    add_policy_inputs(f);
    f.push_back(in_req("data.train"));
    f.push_back(in_opt("data.eval"));
    f.push_back(def("pack_len", kInt, 8192));
    add_loop(f, {2.5e-5, 9e-6, 50, "cosine", 0.1, 1, 256});
    f.push_back(def("epochs", kNum, 1.0));
    add("train-pretrain", std::move(f));
  }
  {
    std::vector<Field> f;
    add_policy_inputs(f);
    f.push_back(in_req("data.train"));
    f.push_back(in_opt("data.eval"));
    f.push_back(def("pack_len", kInt, 32768));
    add_loop(f, {5e-6, 0.0, 100, "constant", 0.05, 1, 64});
    f.push_back(def("epochs", kNum, 3.0));
    f.push_back(in_opt("monitor.suite"));
    f.push_back(def("monitor.every", kInt, 0));
    add("train-sft", std::move(f));
  }
  {
    std::vector<Field> f;
    add_policy_inputs(f);
    f.push_back(in_req("data.train"));
    f.push_back(def("variant", kStr, "dpop"));
    f.push_back(def("beta", kNum, 0.1));
    f.push_back(def("lambda", kNum, 5.0));
    add_loop(f, {5e-7, 0.0, 50, "constant", 0.05, 1, 64});
    f.push_back(def("epochs", kNum, 3.0));
    add("train-dpo", std::move(f));
  }
  {
    std::vector<Field> f;
    add_policy_inputs(f);
    f.push_back(in_req("data.train"));
    f.push_back(def("variant", kStr, "grpo"));
    f.push_back(def("group_size", kInt, 8));
    f.push_back(def("clip_eps", kNum, 0.2));
    f.push_back(def("kl_coef", kNum, 0.001));
    f.push_back(def("generation.max_new_tokens", kInt, 256));
    f.push_back(def("generation.temperature", kNum, 1.0));
    add_loop(f, {1e-6, 0.0, 0, "constant", 0.0, 16, 8});
    f.push_back(def("epochs", kNum, 1.0));
    add("train-grpo", std::move(f));
  }

  {
    std::vector<Field> f;
    add_policy_inputs(f);
    f.push_back(in_req("suite"));
    f.push_back(opt("step", kInt));
    f.push_back(opt("monitoring_csv", kStr));
    add("eval", std::move(f));
  }
  add("tokstats", {in_req("tokenizer"), in_req("texts")});
  add("scrub", {in_req("input"), def("dedup", kBool, false)});
  add("pack", {in_req("tokenizer"), in_req("data"), def("pack_len", kInt, 32768)});
  add("verify", {in_req("corpus")});
  return all;
}

const std::vector<Schema>& schemas() {
  static const std::vector<Schema> all = build_schemas();
  return all;
}

json::json_pointer pointer(std::string_view key) {
  std::string p = "/";
  for (char c : key) p += c == '.' ? '/' : c;
  return json::json_pointer(p);
}

std::string type_name(FieldType t) {
  switch (t) {
    case FieldType::integer: return "a non-negative integer";
    case FieldType::number: return "a number";
    case FieldType::string: return "a string";
    case FieldType::boolean: return "a boolean";
    case FieldType::array: return "an array";
    case FieldType::object: return "an object";
  }
  return "?";
}

bool type_ok(FieldType t, const json& v) {
  switch (t) {
    case FieldType::integer: return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
    case FieldType::number: return v.is_number();
    case FieldType::string: return v.is_string();
    case FieldType::boolean: return v.is_boolean();
    case FieldType::array: return v.is_array();
    case FieldType::object: return v.is_object();
  }
  return false;
}

std::vector<std::string> keys_of(const Schema& s) {
  std::vector<std::string> out;
  for (const auto& f : s.fields) out.push_back(f.key);
  return out;
}

[[noreturn]] void unknown_key(const Schema& s, const std::string& key) {
  const auto known = keys_of(s);
  const auto near = nearest_key(key, known);
  throw ConfigError(key + ": unknown key for " + s.command + (near.empty() ? "" : " (did you mean '" + near + "'?)"));
}

void set_value(const Schema& s, RunConfig& rc, const std::string& key, json v) {
  const Field* f = s.find(key);
  if (!f) unknown_key(s, key);
  if (f->type == FieldType::number && v.is_number()) v = v.get<double>();
  if (!type_ok(f->type, v)) throw ConfigError(key + ": expected " + type_name(f->type) + ", got " + v.dump());
  rc.values[pointer(key)] = std::move(v);
  rc.explicit_keys.insert(key);
}

void walk(const Schema& s, RunConfig& rc, const json& obj, const std::string& prefix) {
  for (const auto& [k, v] : obj.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (s.find(key)) {
      set_value(s, rc, key, v);
      continue;
    }
    const bool is_section = std::any_of(s.fields.begin(), s.fields.end(),
                                        [&](const Field& f) { return f.key.rfind(key + ".", 0) == 0; });
    if (!is_section) unknown_key(s, key);
    if (!v.is_object()) throw ConfigError(key + ": expected an object");
    walk(s, rc, v, key);
  }
}

std::filesystem::path resolve_path(const std::filesystem::path& base, const std::string& key, const json& v) {
  if (!v.is_string()) throw ConfigError(key + ": expected a path string");
  std::filesystem::path p(v.get<std::string>());
  if (p.is_relative()) p = base / p;
  p = p.lexically_normal();
  if (!std::filesystem::exists(p)) throw ConfigError(key + ": path does not exist: " + p.string());
  return p;
}

void one_of(const RunConfig& rc, const std::string& key, std::initializer_list<const char*> allowed) {
  if (!rc.has(key)) return;
  const auto v = rc.get<std::string>(key);
  std::string list;
  for (const char* a : allowed) {
    if (v == a) return;
    list += list.empty() ? a : std::string(", ") + a;
  }
  throw ConfigError(key + ": '" + v + "' is not one of " + list);
}

void positive(const RunConfig& rc, const std::string& key) {
  if (rc.has(key) && !(rc.get<double>(key) > 0)) throw ConfigError(key + ": must be > 0");
}

void cross_checks(const RunConfig& rc) {
  one_of(rc, "schedule.shape", {"cosine", "constant"});
  one_of(rc, "format", {"text", "chat"});
  if (rc.command == "train-dpo") one_of(rc, "variant", {"dpo", "dpop"});
  if (rc.command == "train-grpo") one_of(rc, "variant", {"grpo", "dr_grpo"});
  for (const char* k : {"micro_batch", "grad_accum", "pack_len", "epochs", "schedule.learning_rate", "max_grad_norm",
                        "beta", "group_size", "generation.max_new_tokens", "merges", "init_std"})
    positive(rc, k);

  if (rc.has("schedule.learning_rate")) {
    const double peak = rc.get<double>("schedule.learning_rate"), lo = rc.get<double>("schedule.min_learning_rate");
    if (lo < 0 || lo > peak) {
      throw ConfigError("schedule.min_learning_rate (" + rc.at("schedule.min_learning_rate").dump() +
                        ") must lie in [0, schedule.learning_rate (" + rc.at("schedule.learning_rate").dump() + ")]");
    }
  }
  if (rc.has("schedule.total_steps")) {
    const auto w = rc.get<std::size_t>("schedule.warmup_steps"), t = rc.get<std::size_t>("schedule.total_steps");
    if (t == 0) throw ConfigError("schedule.total_steps: must be > 0");
    if (w > t) {
      throw ConfigError("schedule.warmup_steps (" + std::to_string(w) + ") exceeds schedule.total_steps (" +
                        std::to_string(t) + ")");
    }
  }
  if (rc.command == "train-dpo" && rc.get<std::string>("variant") == "dpo" && rc.explicit_keys.contains("lambda") &&
      rc.get<double>("lambda") != 0) {
    throw ConfigError("lambda (" + rc.at("lambda").dump() + ") is set but variant is 'dpo'; use variant 'dpop'");
  }
  if (rc.has("lambda") && rc.get<double>("lambda") < 0) throw ConfigError("lambda: must be >= 0");
  if (rc.command == "train-grpo") {
    if (rc.get<std::size_t>("group_size") < 2) throw ConfigError("group_size: must be >= 2");
    if (rc.get<double>("generation.temperature") < 0) throw ConfigError("generation.temperature: must be >= 0");
    if (rc.get<double>("clip_eps") < 0) throw ConfigError("clip_eps: must be >= 0");
    if (rc.get<double>("kl_coef") < 0) throw ConfigError("kl_coef: must be >= 0");
  }
  if (rc.command == "train-sft" && rc.get<std::size_t>("monitor.every") > 0 && !rc.has("monitor.suite")) {
    throw ConfigError("monitor.every (" + rc.at("monitor.every").dump() + ") needs monitor.suite");
  }
  if (rc.command == "upscale" && rc.has("n") && rc.get<std::size_t>("m") >= rc.get<std::size_t>("n")) {
    throw ConfigError("m (" + rc.at("m").dump() + ") must be smaller than n (" + rc.at("n").dump() + ")");
  }
  if (rc.command == "merge") {
    const auto& ck = rc.at("checkpoints");
    if (ck.empty()) throw ConfigError("checkpoints: need at least one checkpoint");
    if (rc.has("weights")) {
      const auto& w = rc.at("weights");
      if (w.size() != ck.size()) {
        throw ConfigError("weights has " + std::to_string(w.size()) + " entries but checkpoints has " +
                          std::to_string(ck.size()));
      }
      for (std::size_t i = 0; i < w.size(); ++i)
        if (!w[i].is_number() || w[i].get<double>() < 0)
          throw ConfigError("weights[" + std::to_string(i) + "]: expected a non-negative number");
    }
  }
  if (rc.command == "train-tokenizer" && rc.at("corpus").empty()) throw ConfigError("corpus: need at least one file");
  if (rc.command == "init") model_config_from_json(rc.at("model"), "model").validate();
}

}  // namespace

const Field* Schema::find(std::string_view key) const {
  for (const auto& f : fields)
    if (f.key == key) return &f;
  return nullptr;
}

std::vector<std::string> config_commands() {
  std::vector<std::string> out;
  for (const auto& s : schemas()) out.push_back(s.command);
  return out;
}

const Schema& schema_for(std::string_view command) {
  for (const auto& s : schemas())
    if (s.command == command) return s;
  throw ConfigError("unknown command '" + std::string(command) + "'");
}

EnvOverrides environment_overrides() {
  EnvOverrides out;
  for (char** e = environ; e && *e; ++e) {
    const std::string_view kv(*e);
    if (kv.rfind("FORGE__", 0) != 0) continue;
    const auto eq = kv.find('=');
    if (eq == std::string_view::npos) continue;
    out.emplace(std::string(kv.substr(0, eq)), std::string(kv.substr(eq + 1)));
  }
  return out;
}

bool RunConfig::has(std::string_view key) const {
  const auto p = pointer(key);
  return values.contains(p) && !values.at(p).is_null();
}

const json& RunConfig::at(std::string_view key) const {
  if (!has(key)) throw ConfigError(std::string(key) + ": not set");
  return values.at(pointer(key));
}

std::string RunConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(command + "\n" + declared.dump())));
  return buf;
}

std::string nearest_key(std::string_view key, std::span<const std::string> known) {
  const std::string_view leaf = key.substr(key.rfind('.') == std::string_view::npos ? 0 : key.rfind('.') + 1);
  std::string best;
  std::size_t best_d = std::max<std::size_t>(1, leaf.size() / 3) + 1;
  for (const auto& k : known) {
    const std::string_view kl = std::string_view(k).substr(k.rfind('.') == std::string::npos ? 0 : k.rfind('.') + 1);
    const std::size_t d = std::min(levenshtein(key, k), levenshtein(leaf, kl));
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

RunConfig resolve_config(std::string_view command, const json& user, const std::filesystem::path& base_dir,
                         const EnvOverrides& env) {
  const Schema& s = schema_for(command);
  if (!user.is_object()) throw ConfigError("config: expected a JSON object at top level");
  RunConfig rc;
  rc.command = s.command;
  rc.values = json::object();
  walk(s, rc, user, "");

  for (const auto& [name, raw] : env) {
    std::string key = name.substr(7);
    for (std::size_t p; (p = key.find("__")) != std::string::npos;) key.replace(p, 2, ".");
    if (!s.find(key)) {
      const bool elsewhere = std::any_of(schemas().begin(), schemas().end(), [&](const Schema& o) { return o.find(key); });
      if (elsewhere) continue;
      throw ConfigError(name + ": no config key '" + key + "' for any command");
    }
    json v = json::parse(raw, nullptr, false);
    if (v.is_discarded()) v = raw;
    if (s.find(key)->type == FieldType::string && !v.is_string()) v = raw;
    set_value(s, rc, key, std::move(v));
  }

  for (const auto& f : s.fields) {
    const bool present = rc.values.contains(pointer(f.key));
    if (!present && !f.fallback.is_null()) rc.values[pointer(f.key)] = f.fallback;
    if (!present && f.fallback.is_null() && f.required) throw ConfigError(f.key + ": required field missing");
  }
  rc.declared = rc.values;
  for (const auto& f : s.fields) {
    if (f.input && rc.has(f.key)) {
      auto& v = rc.values[pointer(f.key)];
      if (f.type == FieldType::array) {
        for (std::size_t i = 0; i < v.size(); ++i)
          v[i] = resolve_path(base_dir, f.key + "[" + std::to_string(i) + "]", v[i]).string();
      } else {
        v = resolve_path(base_dir, f.key, v).string();
      }
    }
  }
  cross_checks(rc);
  return rc;
}

RunConfig validate_config(std::string_view command, const std::filesystem::path& path, const EnvOverrides& env) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  const json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError(path.string() + ": not valid JSON");
  return resolve_config(command, j, std::filesystem::absolute(path).parent_path(), env);
}

ScheduleSpec schedule_spec(const RunConfig& rc, std::optional<std::size_t> derived_total) {
  ScheduleSpec s;
  s.peak_lr = rc.get<double>("schedule.learning_rate");
  s.min_lr = rc.get<double>("schedule.min_learning_rate");
  s.warmup_steps = rc.get<std::size_t>("schedule.warmup_steps");
  s.shape = rc.get<std::string>("schedule.shape") == "cosine" ? ScheduleShape::cosine : ScheduleShape::constant;
  if (rc.has("schedule.total_steps")) {
    s.total_steps = rc.get<std::size_t>("schedule.total_steps");
  } else if (derived_total) {
    s.total_steps = *derived_total;
    if (s.warmup_steps > s.total_steps) {
      throw ConfigError("schedule.warmup_steps (" + std::to_string(s.warmup_steps) +
                        ") exceeds the total derived from epochs (" + std::to_string(s.total_steps) +
                        "); set schedule.total_steps or lower the warm-up");
    }
  } else {
    throw ConfigError("schedule.total_steps: required field missing");
  }
  s.validate();
  return s;
}

TrainLoopConfig train_loop(const RunConfig& rc, std::optional<std::size_t> derived_total) {
  TrainLoopConfig c;
  c.schedule = schedule_spec(rc, derived_total);
  c.adamw.beta1 = rc.get<double>("adamw.beta1");
  c.adamw.beta2 = rc.get<double>("adamw.beta2");
  c.adamw.eps = rc.get<double>("adamw.eps");
  c.adamw.weight_decay = rc.get<double>("adamw.weight_decay");
  c.max_grad_norm = rc.get<double>("max_grad_norm");
  c.micro_batch = rc.get<std::size_t>("micro_batch");
  c.grad_accum = rc.get<std::size_t>("grad_accum");
  c.validate();
  return c;
}

std::size_t steps_for_epochs(double epochs, std::size_t examples, std::size_t examples_per_step) {
  if (!(epochs > 0)) throw ConfigError("epochs: must be > 0");
  if (examples == 0) throw DataError("training data is empty");
  if (examples_per_step == 0) throw ConfigError("micro_batch × grad_accum must be > 0");
  const double steps = std::ceil(epochs * static_cast<double>(examples) / static_cast<double>(examples_per_step));
  return std::max<std::size_t>(1, static_cast<std::size_t>(steps));
}

}  // namespace forge
