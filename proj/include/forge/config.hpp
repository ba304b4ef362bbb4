#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "forge/optim.hpp"
#include "forge/serialization.hpp"
#include "forge/trainer.hpp"

namespace forge {

inline constexpr std::string_view kVersion = "0.1.0";

enum class FieldType { integer, number, string, boolean, array, object };

/// One leaf of a command's config. Keys are dotted paths ("schedule.peak_lr").
/// A field without a fallback is optional unless `required` is set; paths marked
/// `input` are resolved against the config file's directory and must exist.
struct Field {
  std::string key;
  FieldType type = FieldType::string;
  json fallback;  // null: no default
  bool required = false;
  bool input = false;
};

struct Schema {
  std::string command;
  std::vector<Field> fields;
  const Field* find(std::string_view key) const;
};

std::vector<std::string> config_commands();
/// Throws ConfigError for an unknown command.
const Schema& schema_for(std::string_view command);

/// FORGE__section__key=value pairs; values parse as JSON, falling back to a string.
using EnvOverrides = std::map<std::string, std::string>;
EnvOverrides environment_overrides();

struct RunConfig {
  std::string command;
  json values;    // nested, defaults filled in, input paths absolute
  json declared;  // the same with paths as written, so hashes do not depend on location
  std::set<std::string> explicit_keys;  // set by the file or the environment

  bool has(std::string_view key) const;
  const json& at(std::string_view key) const;
  template <typename T>
  T get(std::string_view key) const {
    return at(key).get<T>();
  }
  std::uint64_t seed() const { return get<std::uint64_t>("seed"); }
  /// fnv1a64 of the declared config, 16 hex digits.
  std::string hash() const;
};

/// Closest known key by edit distance, or empty when nothing is close.
std::string nearest_key(std::string_view key, std::span<const std::string> known);

/// Applies defaults and overrides to a parsed config and runs the command's checks.
/// Errors are ConfigError with a dotted field locator.
RunConfig resolve_config(std::string_view command, const json& user, const std::filesystem::path& base_dir,
                         const EnvOverrides& env = {});
RunConfig validate_config(std::string_view command, const std::filesystem::path& path,
                          const EnvOverrides& env = {});

/// Typed views over a resolved config. total_steps is taken from
/// schedule.total_steps when given, else from derived_total; warm-up beyond the total
/// is reported naming both values.
ScheduleSpec schedule_spec(const RunConfig& rc, std::optional<std::size_t> derived_total = std::nullopt);
TrainLoopConfig train_loop(const RunConfig& rc, std::optional<std::size_t> derived_total = std::nullopt);

/// ceil(epochs · examples / examples_per_step), at least 1.
std::size_t steps_for_epochs(double epochs, std::size_t examples, std::size_t examples_per_step);

}  // namespace forge
