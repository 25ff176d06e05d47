#pragma once

#include <json.hpp>

#include "shiftipw/haldensify.hpp"

namespace shiftipw::serialize {

using nlohmann::json;

json to_json(const hal::LassoPath& path, const hal::BasisSet& bases);
void from_json(const json& j, hal::LassoPath& path, hal::BasisSet& bases);

// {schema_version, bins{cutpoints, type}, lambda_grid, cv_index, hazard}
json to_json(const haldensify::CondDensityFamily& family);
haldensify::CondDensityFamily family_from_json(const json& j);

}  // namespace shiftipw::serialize
