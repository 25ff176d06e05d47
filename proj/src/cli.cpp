#include "shiftipw/cli.hpp"

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "shiftipw/estimators.hpp"
#include "shiftipw/selectors.hpp"
#include "shiftipw/serialize.hpp"
#include "shiftipw/simlab.hpp"

namespace shiftipw::cli {

namespace {

using serialize::json;

struct DataOpts {
  std::string path, treatment = "A", outcome = "Y";
  std::vector<std::string> covariates;
};

struct DensityOpts {
  int bins = 0;
  std::string bin_type = "equal_range";
  int folds = 5;
  std::size_t n_lambda = 3000;
  double lambda_min_ratio = 1e-4;
  std::size_t undersmooth = 0;
  int knots = 200;
  int max_degree = 2;
};

struct RegimeOpts {
  std::string type = "additive";
  double shift = 0.0;
  std::string upper = "max";
};

struct OutcomeOpts {
  std::string method = "hal";
  std::size_t n_lambda = 100;
  int knots = 200;
};

struct Common {
  std::uint64_t seed = 1;
  int threads = default_thread_count();
  std::string out;
};

void add_data(CLI::App* app, DataOpts& d, bool need_outcome) {
  app->add_option("--data", d.path, "input CSV")->required()->check(CLI::ExistingFile);
  app->add_option("--treatment", d.treatment, "treatment column")->capture_default_str();
  if (need_outcome) app->add_option("--outcome", d.outcome, "outcome column")->capture_default_str();
  app->add_option("--covariates", d.covariates, "covariate columns (default: all others)")->delimiter(',');
}

void add_density(CLI::App* app, DensityOpts& o) {
  app->add_option("--bins", o.bins, "number of treatment bins (0: max(5, n^(1/3)))")->capture_default_str();
  app->add_option("--bin-type", o.bin_type, "equal_range or equal_mass")
      ->check(CLI::IsMember({"equal_range", "equal_mass"}))
      ->capture_default_str();
  app->add_option("--folds", o.folds, "cross-validation folds")->check(CLI::Range(2, 1000))->capture_default_str();
  app->add_option("--n-lambda", o.n_lambda, "density lambda grid size")->check(CLI::PositiveNumber)->capture_default_str();
  app->add_option("--lambda-min-ratio", o.lambda_min_ratio, "smallest lambda over lambda_max")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  app->add_option("--undersmooth", o.undersmooth, "family size after lambda_CV (0: all)")->capture_default_str();
  app->add_option("--knots", o.knots, "knots per covariate (<= 0: every value)")->capture_default_str();
  app->add_option("--max-degree", o.max_degree, "largest basis interaction")->check(CLI::Range(1, 10))->capture_default_str();
}

void add_regime(CLI::App* app, RegimeOpts& r) {
  app->add_option("--shift-type", r.type, "additive or multiplicative")
      ->check(CLI::IsMember({"additive", "multiplicative"}))
      ->capture_default_str();
  app->add_option("--shift", r.shift, "shift delta")->required();
  app->add_option("--upper-bound", r.upper, "support bound u: max, none or a number")->capture_default_str();
}

void add_outcome(CLI::App* app, OutcomeOpts& o) {
  app->add_option("--outcome-method", o.method, "hal or glm")->check(CLI::IsMember({"hal", "glm"}))->capture_default_str();
  app->add_option("--outcome-n-lambda", o.n_lambda, "outcome HAL lambda grid size")->capture_default_str();
  app->add_option("--outcome-knots", o.knots, "outcome HAL knots per covariate")->capture_default_str();
}

void add_common(CLI::App* app, Common& c, const std::string& out_help) {
  app->add_option("--seed", c.seed, "random seed")->capture_default_str();
  app->add_option("--threads", c.threads, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  app->add_option("--out", c.out, out_help);
}

haldensify::FamilyConfig family_config(const DensityOpts& o, const Common& c) {
  haldensify::FamilyConfig f;
  f.bins = o.bins;
  f.bin_type = haldensify::bin_type_from_string(o.bin_type);
  f.folds = o.folds;
  f.n_lambda = o.n_lambda;
  f.lambda_min_ratio = o.lambda_min_ratio;
  f.undersmooth = o.undersmooth;
  f.basis.knots_per_covariate = o.knots;
  f.basis.max_degree = o.max_degree;
  f.seed = c.seed;
  f.threads = c.threads;
  return f;
}

mtp::MtpRegime regime_of(const RegimeOpts& r) {
  mtp::MtpRegime m;
  m.kind = mtp::shift_kind_from_string(r.type);
  m.delta = r.shift;
  if (r.upper == "max") {
    m.rule = mtp::BoundRule::empirical_max;
  } else if (r.upper == "none") {
    m.rule = mtp::BoundRule::none;
  } else {
    m.rule = mtp::BoundRule::fixed;
    try {
      std::size_t used = 0;
      m.bound = std::stod(r.upper, &used);
      if (used != r.upper.size()) throw std::invalid_argument(r.upper);
    } catch (const std::exception&) {
      throw Error(ErrorKind::invalid_config, "--upper-bound must be max, none or a number");
    }
  }
  return m;
}

datacore::Dataset load(const DataOpts& d, bool need_outcome) {
  return datacore::load_csv(d.path, d.treatment, need_outcome ? std::optional<std::string>(d.outcome) : std::nullopt,
                            d.covariates);
}

// The parsed subcommand's settings, minus output paths and thread count,
// which do not affect results.
std::string echo_config(const CLI::App& root) {
  const std::string prefix = root.get_subcommands().front()->get_name() + ".";
  std::istringstream in(root.config_to_str(true, false));
  std::string line, out;
  while (std::getline(in, line))
    if (line.rfind(prefix, 0) == 0 && line.rfind(prefix + "out=", 0) != 0 &&
        line.rfind(prefix + "threads=", 0) != 0)
      out += line + '\n';
  return out;
}

json metadata(const CLI::App& root, std::uint64_t seed) {
  const std::string cfg = echo_config(root);
  return {{"schema_version", kSchemaVersion},
          {"version", kVersion},
          {"seed", seed},
          {"config_hash", hex64(fnv1a64(cfg))},
          {"config", cfg}};
}

void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::parse, "cannot write '" + path + "'");
  f << text;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// --- subcommands -----------------------------------------------------------

struct DensityFit {
  DataOpts data;
  DensityOpts density;
  Common common;
};

void run_density_fit(const CLI::App& root, const DensityFit& o) {
  const auto data = load(o.data, false);
  const auto family = haldensify::build_family(data, family_config(o.density, o.common));
  for (const auto& w : family.warnings) std::cerr << "warning: " << w << '\n';
  json j = metadata(root, o.common.seed);
  j.update(serialize::to_json(family));
  j["treatment"] = o.data.treatment;
  j["covariates"] = data.covariate_names();
  emit(o.common.out, j.dump(1) + "\n");
}

struct Estimate {
  DataOpts data;
  DensityOpts density;
  RegimeOpts regime;
  OutcomeOpts outcome;
  std::vector<std::string> selectors;
  selectors::PlateauParams plateau;
  Common common;
};

struct Fitted {
  datacore::Dataset data;
  mtp::ResolvedRegime regime;
  haldensify::CondDensityFamily family;
  estimators::OutcomeFit q;
  estimators::OutcomeValues ov;
  selectors::SelectorTrace trace;
};

Fitted fit_all(const Estimate& o) {
  const auto raw = load(o.data, true);
  auto data = raw.with_bounded_outcome();
  const auto regime = mtp::resolve(regime_of(o.regime), data.treatment());
  auto family = haldensify::build_family(data, family_config(o.density, o.common));
  for (const auto& w : family.warnings) std::cerr << "warning: " << w << '\n';
  hal::HalConfig hcfg;
  hcfg.n_lambda = o.outcome.n_lambda;
  hcfg.basis.knots_per_covariate = o.outcome.knots;
  hcfg.seed = o.common.seed;
  hcfg.threads = o.common.threads;
  auto q = estimators::fit_outcome_regression(data, estimators::outcome_method_from_string(o.outcome.method), hcfg);
  auto ov = estimators::outcome_values(data, q, regime);
  auto trace = selectors::build_trace(data, family, regime, ov, o.common.threads);
  return {std::move(data), regime, std::move(family), std::move(q), std::move(ov), std::move(trace)};
}

std::vector<selectors::SelectorKind> selector_list(const std::vector<std::string>& names) {
  if (names.empty()) return selectors::all_selectors();
  std::vector<selectors::SelectorKind> out;
  for (const auto& s : names) out.push_back(selectors::selector_from_string(s));
  return out;
}

json report_json(const estimators::EstimateReport& r, const datacore::OutcomeBounds& b) {
  return {{"psi", b.to_original(r.psi)},
          {"se", r.se * b.scale()},
          {"se_eif", r.se_eif * b.scale()},
          {"pn_eif", r.pn_eif * b.scale()},
          {"pn_dcar", r.pn_dcar * b.scale()}};
}

void run_estimate(const CLI::App& root, const Estimate& o) {
  const auto f = fit_all(o);
  const auto bounds = f.data.outcome_bounds().value_or(datacore::OutcomeBounds{});
  const haldensify::FamilyTable table(f.family, f.data.covariates());
  double mean_y = 0.0;
  for (double y : f.data.outcome()) mean_y += bounds.to_original(y);
  mean_y /= static_cast<double>(f.data.size());

  json j = metadata(root, o.common.seed);
  j["n"] = f.data.size();
  j["regime"] = {{"shift_type", mtp::to_string(f.regime.kind)},
                 {"shift", f.regime.delta},
                 {"upper_bound", std::isfinite(f.regime.u) ? json(f.regime.u) : json("none")}};
  j["mean_y"] = mean_y;
  j["outcome_method"] = o.outcome.method;
  j["density"] = {{"bins", f.family.bins.bins()},
                  {"cv_index", f.family.cv_index},
                  {"family_size", f.family.size()},
                  {"warnings", f.family.warnings}};
  j["estimates"] = json::array();
  for (auto kind : selector_list(o.selectors)) {
    const auto c = selectors::select(kind, f.trace, o.plateau);
    const auto g = table.density(c.index);
    const auto nv = estimators::combine(f.data, f.ov, estimators::density_values(f.data, g, f.regime));
    json e = {{"selector", selectors::to_string(kind)},
              {"lambda_index", c.index},
              {"lambda", f.trace.records[c.index].lambda},
              {"l1_norm", f.trace.records[c.index].l1_norm},
              {"fallback", c.fallback},
              {"diagnostics", c.diagnostics}};
    json est = {{"ipw_stab", report_json(estimators::ipw_report(nv, true), bounds)},
                {"ipw", report_json(estimators::ipw_report(nv, false), bounds)},
                {"onestep", report_json(estimators::onestep(nv), bounds)}};
    try {
      const auto t = estimators::tmle(nv);
      est["tmle"] = report_json(t.report, bounds);
      est["tmle"]["epsilon"] = t.epsilon;
    } catch (const Error& err) {
      if (err.kind() != ErrorKind::tilt_failure) throw;
      est["tmle"] = {{"error", err.what()}};
    }
    for (auto& [name, r] : est.items())
      if (r.contains("psi")) r["pie"] = r["psi"].get<double>() - mean_y;
    e["estimators"] = est;
    j["estimates"].push_back(e);
  }
  j["substitution"] = report_json(estimators::substitution_report(estimators::combine(
                                      f.data, f.ov, estimators::density_values(f.data, table.density(0), f.regime))),
                                  bounds);
  emit(o.common.out, j.dump(1) + "\n");
}

void run_path(const CLI::App& root, const Estimate& o) {
  const auto f = fit_all(o);
  const auto bounds = f.data.outcome_bounds().value_or(datacore::OutcomeBounds{});
  std::vector<std::string> chosen(f.trace.size());
  for (auto kind : selector_list(o.selectors)) {
    auto& s = chosen[selectors::select(kind, f.trace, o.plateau).index];
    s += (s.empty() ? "" : ";") + std::string(selectors::to_string(kind));
  }
  const json meta = metadata(root, o.common.seed);
  std::ostringstream out;
  out << "# shiftipw " << kVersion << " config=" << meta["config_hash"].get<std::string>()
      << " seed=" << o.common.seed << " sigma_cv=" << num(f.trace.sigma_cv * bounds.scale()) << '\n';
  out << "index,lambda,psi,se,se_eif,pn_eif,abs_pn_dcar,l1_norm,selected_by\n";
  for (std::size_t k = 0; k < f.trace.size(); ++k) {
    const auto& r = f.trace.records[k];
    out << k << ',' << num(r.lambda) << ',' << num(bounds.to_original(r.psi)) << ',' << num(r.se * bounds.scale())
        << ',' << num(r.se_eif * bounds.scale()) << ',' << num(r.pn_eif * bounds.scale()) << ','
        << num(r.abs_pn_dcar * bounds.scale()) << ',' << num(r.l1_norm) << ',' << chosen[k] << '\n';
  }
  emit(o.common.out, out.str());
}

struct Simulate {
  std::string dgp = "poisson";
  std::string profile = "desk";
  std::vector<std::size_t> n;
  std::size_t reps = 0;
  double delta = 1.0;
  std::size_t truth_size = simlab::kTruthSize;
  int knots = 0;
  std::size_t n_lambda = 0;
  std::uint64_t seed = 1;
  int threads = default_thread_count();
  std::string records = "sim_records.csv", metrics = "sim_metrics.csv";
};

void run_simulate(const Simulate& o) {
  const auto kind = simlab::dgp_from_string(o.dgp);
  auto cfg = o.profile == "full" ? simlab::ExperimentConfig::full(kind) : simlab::ExperimentConfig::desk(kind);
  if (!o.n.empty()) cfg.n_list = o.n;
  if (o.reps > 0) cfg.reps = o.reps;
  if (o.knots != 0) cfg.density.basis.knots_per_covariate = cfg.outcome.basis.knots_per_covariate = o.knots;
  if (o.n_lambda > 0) cfg.density.n_lambda = o.n_lambda;
  cfg.dgp.delta = o.delta;
  cfg.truth_size = o.truth_size;
  cfg.seed = o.seed;
  cfg.threads = o.threads;
  const auto res = simlab::run_experiment(cfg);
  for (const auto& f : res.failures)
    std::cerr << "replicate " << f.rep_id << " (n=" << f.n << ") failed: " << f.message << '\n';
  simlab::write_records_csv(res, o.records);
  simlab::write_metrics_csv(res, simlab::metric_table(res), o.metrics);
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Nonparametric IPW estimation of modified treatment policy effects"};
  app.set_config("--config", "", "read options from a TOML file (flags take precedence)");
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  DensityFit df;
  auto* c_df = app.add_subcommand("density-fit", "fit the conditional density family and write it as JSON");
  add_data(c_df, df.data, false);
  add_density(c_df, df.density);
  add_common(c_df, df.common, "output JSON (default stdout)");

  Estimate est;
  auto setup_estimate = [](CLI::App* c, Estimate& o) {
    add_data(c, o.data, true);
    add_density(c, o.density);
    add_regime(c, o.regime);
    add_outcome(c, o.outcome);
    c->add_option("--selector", o.selectors,
                  "global-cv, dcar-min, dcar-tol, lepski, plateau, hybrid (repeatable; default all)")
        ->check(CLI::IsMember({"global-cv", "dcar-min", "dcar-tol", "lepski", "plateau", "hybrid"}))
        ->delimiter(',');
    c->add_option("--k-max", o.plateau.k_max, "plateau L1-norm multiple")->capture_default_str();
    c->add_option("--alpha", o.plateau.alpha, "selector level")->check(CLI::Range(0.0, 1.0))->capture_default_str();
    c->add_option("--span", o.plateau.span, "LOESS span")->check(CLI::PositiveNumber)->capture_default_str();
  };
  auto* c_est = app.add_subcommand("estimate", "estimate the shifted-treatment mean for each selector");
  setup_estimate(c_est, est);
  add_common(c_est, est.common, "output JSON (default stdout)");

  Estimate pth;
  auto* c_path = app.add_subcommand("path", "write the selector trace along the lambda path as CSV");
  setup_estimate(c_path, pth);
  add_common(c_path, pth.common, "output CSV (default stdout)");

  Simulate sim;
  auto* c_sim = app.add_subcommand("simulate", "run the simulation experiments");
  c_sim->add_option("--dgp", sim.dgp, "poisson or negbinom")
      ->check(CLI::IsMember({"poisson", "negbinom", "dgp1", "dgp2"}))
      ->capture_default_str();
  c_sim->add_option("--profile", sim.profile, "desk or full")->check(CLI::IsMember({"desk", "full"}))->capture_default_str();
  c_sim->add_option("--n", sim.n, "sample sizes (profile default)")->delimiter(',')->check(CLI::PositiveNumber);
  c_sim->add_option("--reps", sim.reps, "replicates per sample size (profile default)");
  c_sim->add_option("--delta", sim.delta, "additive shift")->capture_default_str();
  c_sim->add_option("--truth-size", sim.truth_size, "draws for the true parameter")->check(CLI::PositiveNumber)->capture_default_str();
  c_sim->add_option("--knots", sim.knots, "knots per covariate (profile default)");
  c_sim->add_option("--n-lambda", sim.n_lambda, "density lambda grid size (profile default)");
  c_sim->add_option("--seed", sim.seed, "random seed")->capture_default_str();
  c_sim->add_option("--threads", sim.threads, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  c_sim->add_option("--records", sim.records, "per-replicate CSV")->capture_default_str();
  c_sim->add_option("--metrics", sim.metrics, "aggregated metrics CSV")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (c_df->parsed()) run_density_fit(app, df);
    else if (c_est->parsed()) run_estimate(app, est);
    else if (c_path->parsed()) run_path(app, pth);
    else run_simulate(sim);
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << '\n';
    return e.kind() == ErrorKind::named_column || e.kind() == ErrorKind::invalid_config ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace shiftipw::cli
