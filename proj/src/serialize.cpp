#include "shiftipw/serialize.hpp"

namespace shiftipw::serialize {

json to_json(const hal::LassoPath& path, const hal::BasisSet& bases) {
  json coefs = json::array();
  for (std::size_t k = 0; k < path.size(); ++k)
    for (const auto& [j, v] : path.coefficients[k]) coefs.push_back({k, j, v});
  json basis = json::array();
  for (const auto& b : bases.bases()) basis.push_back({{"subset", b.subset}, {"knots", b.knots}});
  return {{"version", kVersion},
          {"loss", hal::to_string(path.loss)},
          {"n_features", path.n_features},
          {"dim", bases.dim()},
          {"lambdas", path.lambdas},
          {"intercepts", path.intercepts},
          {"coefficients", coefs},
          {"bases", basis}};
}

void from_json(const json& j, hal::LassoPath& path, hal::BasisSet& bases) {
  try {
    path = {};
    path.loss = hal::loss_from_string(j.at("loss").get<std::string>());
    path.n_features = j.at("n_features").get<std::size_t>();
    path.lambdas = j.at("lambdas").get<std::vector<double>>();
    path.intercepts = j.at("intercepts").get<std::vector<double>>();
    if (path.intercepts.size() != path.lambdas.size())
      throw Error(ErrorKind::parse, "intercepts and lambdas differ in length");
    path.coefficients.resize(path.lambdas.size());
    for (const auto& t : j.at("coefficients")) {
      const auto k = t.at(0).get<std::size_t>();
      const auto col = t.at(1).get<std::uint32_t>();
      if (k >= path.size() || col >= path.n_features)
        throw Error(ErrorKind::parse, "coefficient triplet out of range");
      path.coefficients[k].emplace_back(col, t.at(2).get<double>());
    }
    std::vector<hal::BasisFunction> list;
    for (const auto& b : j.at("bases"))
      list.push_back({b.at("subset").get<std::vector<int>>(), b.at("knots").get<std::vector<double>>()});
    bases = hal::BasisSet(std::move(list), j.at("dim").get<int>());
  } catch (const json::exception& e) {
    throw Error(ErrorKind::parse, std::string("malformed HAL model: ") + e.what());
  }
}

json to_json(const haldensify::CondDensityFamily& family) {
  return {{"schema_version", kSchemaVersion},
          {"version", kVersion},
          {"bins", {{"cutpoints", family.bins.cutpoints}, {"type", haldensify::to_string(family.bins.type)}}},
          {"lambda_grid", family.lambda_grid()},
          {"cv_index", family.cv_index},
          {"full_grid", family.full_grid},
          {"cv_risk", family.cv_risk},
          {"warnings", family.warnings},
          {"hazard", to_json(family.hazard.path, family.hazard.bases)}};
}

haldensify::CondDensityFamily family_from_json(const json& j) {
  haldensify::CondDensityFamily f;
  try {
    f.bins.cutpoints = j.at("bins").at("cutpoints").get<std::vector<double>>();
    f.bins.type = haldensify::bin_type_from_string(j.at("bins").at("type").get<std::string>());
    f.cv_index = j.at("cv_index").get<std::size_t>();
    f.full_grid = j.value("full_grid", std::vector<double>{});
    f.cv_risk = j.value("cv_risk", std::vector<double>{});
    f.warnings = j.value("warnings", std::vector<std::string>{});
    from_json(j.at("hazard"), f.hazard.path, f.hazard.bases);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::parse, std::string("malformed density family: ") + e.what());
  }
  return f;
}

}  // namespace shiftipw::serialize
