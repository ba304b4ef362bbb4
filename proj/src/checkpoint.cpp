#include "forge/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "forge/error.hpp"
#include "forge/serialization.hpp"

namespace forge {

namespace {

constexpr std::string_view kMagic = "FORGE-CKPT";

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  else return __builtin_bswap32(v);
}

template <typename U>
U read_field(const json& j, const char* key, const std::string& where) {
  try {
    return j.at(key).get<U>();
  } catch (const json::exception&) {
    throw DataError(where + ": missing or invalid field '" + key + "'");
  }
}

}  // namespace

json to_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers},       {"d_model", c.d_model},         {"n_heads", c.n_heads},
              {"n_kv_heads", c.n_kv_heads},   {"head_size", c.head_size},     {"d_ff", c.d_ff},
              {"vocab_size", c.vocab_size},   {"rope_theta", c.rope_theta},   {"native_ctx", c.native_ctx},
              {"extended_ctx", c.extended_ctx}, {"use_yarn", c.use_yarn},     {"rmsnorm_eps", c.rmsnorm_eps}};
}

ModelConfig model_config_from_json(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  ModelConfig c;
  static const std::set<std::string> known{"n_layers",   "d_model",    "n_heads",      "n_kv_heads",
                                           "head_size",  "d_ff",       "vocab_size",   "rope_theta",
                                           "native_ctx", "extended_ctx", "use_yarn",   "rmsnorm_eps"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.contains(it.key())) throw ConfigError(where + "." + it.key() + ": unknown key");
  }
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    } catch (const json::exception&) {
      throw ConfigError(where + "." + key + ": wrong type");
    }
  };
  get("n_layers", c.n_layers);
  get("d_model", c.d_model);
  get("n_heads", c.n_heads);
  get("n_kv_heads", c.n_kv_heads);
  get("head_size", c.head_size);
  get("d_ff", c.d_ff);
  get("vocab_size", c.vocab_size);
  get("rope_theta", c.rope_theta);
  get("native_ctx", c.native_ctx);
  get("extended_ctx", c.extended_ctx);
  get("use_yarn", c.use_yarn);
  get("rmsnorm_eps", c.rmsnorm_eps);
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  ckpt.validate();
  json dir = json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : ckpt.params) {
    dir.push_back(json{{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"length", t.numel()}});
    offset += t.numel() * sizeof(std::uint32_t);
  }
  const json manifest{{"format_version", kCheckpointFormatVersion}, {"config", to_json(ckpt.config)}, {"tensors", dir}};
  const std::string text = manifest.dump(1);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("checkpoint: cannot open '" + path.string() + "' for writing");
  out << kMagic << '\n' << text.size() << '\n' << text;
  std::vector<std::uint32_t> words;
  for (const auto& [_, t] : ckpt.params) {
    words.resize(t.numel());
    for (std::size_t i = 0; i < t.numel(); ++i) words[i] = to_le(std::bit_cast<std::uint32_t>(t[i]));
    out.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
  }
  if (!out) throw DataError("checkpoint: write failed for '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string where = "checkpoint '" + path.string() + "'";
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(where + ": cannot open");
  std::string magic, len_line;
  std::getline(in, magic);
  std::getline(in, len_line);
  if (magic != kMagic) throw DataError(where + ": bad magic");
  std::size_t len = 0;
  try {
    len = std::stoull(len_line);
  } catch (const std::exception&) {
    throw DataError(where + ": bad manifest length");
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (static_cast<std::size_t>(in.gcount()) != len) throw DataError(where + ": truncated manifest");
  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(where + ": manifest is not valid JSON (" + e.what() + ")");
  }
  if (read_field<int>(manifest, "format_version", where) != kCheckpointFormatVersion) {
    throw DataError(where + ": unsupported format version");
  }
  Checkpoint ckpt;
  try {
    ckpt.config = model_config_from_json(manifest.at("config"), where + " config");
    ckpt.config.validate();
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  } catch (const json::exception&) {
    throw DataError(where + ": missing config");
  }
  const auto payload_start = in.tellg();
  std::string prev;
  std::size_t expected_offset = 0;
  for (const auto& entry : manifest.at("tensors")) {
    const auto name = read_field<std::string>(entry, "name", where);
    const auto shape = read_field<Shape>(entry, "shape", where);
    const auto offset = read_field<std::size_t>(entry, "offset", where);
    const auto length = read_field<std::size_t>(entry, "length", where);
    if (!prev.empty() && !(prev < name)) throw DataError(where + ": tensor directory not sorted at '" + name + "'");
    if (offset != expected_offset || length != shape_numel(shape)) {
      throw DataError(where + ": inconsistent directory entry for '" + name + "'");
    }
    std::vector<std::uint32_t> words(length);
    in.seekg(payload_start + static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(length * 4));
    if (static_cast<std::size_t>(in.gcount()) != length * 4) throw DataError(where + ": truncated payload for '" + name + "'");
    std::vector<float> values(length);
    for (std::size_t i = 0; i < length; ++i) values[i] = std::bit_cast<float>(to_le(words[i]));
    ckpt.params.emplace(name, Tensor<float>(shape, std::move(values)));
    prev = name;
    expected_offset += length * 4;
  }
  ckpt.validate();
  return ckpt;
}

Checkpoint init_checkpoint(const ModelConfig& cfg, Rng& rng, double init_std) {
  cfg.validate();
  Checkpoint ckpt;
  ckpt.config = cfg;
  for (const auto& [name, shape] : param_shapes(cfg)) {
    Tensor<float> t(shape);
    const bool gain = name.ends_with(".g");
    for (auto& v : t.data()) v = gain ? 1.0f : static_cast<float>(rng.normal() * init_std);
    ckpt.params.emplace(name, std::move(t));
  }
  return ckpt;
}

}  // namespace forge
