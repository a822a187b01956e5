#pragma once

#include <json.hpp>

#include "bamrl/policy.hpp"

namespace bamrl {

void to_json(nlohmann::json& j, const ConvSpec& s);
void from_json(const nlohmann::json& j, ConvSpec& s);
void to_json(nlohmann::json& j, const ArchitectureConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
void from_json(const nlohmann::json& j, ArchitectureConfig& c);

namespace json_detail {
/// Throws ConfigError naming the first key of `j` not in `allowed`.
void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                         const char* where);
}  // namespace json_detail

}  // namespace bamrl
