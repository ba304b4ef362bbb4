#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "forge/config.hpp"

namespace forge {

/// Runs one subcommand on a validated config, writing its artifacts and a
/// run_manifest.json into out. Throws forge::Error subclasses.
void dispatch(const RunConfig& rc, const std::filesystem::path& out);

/// `forge <subcommand> --config <path> [--out <dir>] [--seed <u64>]`. Returns the
/// process exit status: 0 ok, 1 internal, 2 config, 3 data, 4 numeric. Failures
/// print one line "forge: error[<category>]: <message>" to stderr.
int run_cli(int argc, const char* const* argv);

}  // namespace forge
