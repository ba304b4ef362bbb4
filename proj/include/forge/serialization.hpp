#pragma once

#include <json.hpp>

#include "forge/model.hpp"

namespace forge {

using json = nlohmann::json;

json to_json(const ModelConfig& cfg);
/// Reads known fields, keeping defaults for absent ones. Unknown keys are rejected.
ModelConfig model_config_from_json(const json& j, const std::string& where = "model");

}  // namespace forge
