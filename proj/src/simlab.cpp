#include "shiftipw/simlab.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <tuple>

namespace shiftipw::simlab {

const char* to_string(DgpKind kind) { return kind == DgpKind::poisson ? "poisson" : "negbinom"; }

DgpKind dgp_from_string(const std::string& name) {
  if (name == "poisson" || name == "dgp1") return DgpKind::poisson;
  if (name == "negbinom" || name == "dgp2") return DgpKind::negbinom;
  throw Error(ErrorKind::invalid_config, "unknown dgp '" + name + "'");
}

double DgpSpec::treatment_mean(std::span<const double> w) const {
  return (1 - w[0]) + 0.25 * w[1] * w[1] * w[1] + 2 * w[0] * w[1] + 4;
}

double DgpSpec::dispersion(std::span<const double> w) const { return 5 * w[1] + 7; }

double DgpSpec::pmf(double a, std::span<const double> w) const {
  if (a < 0 || a != std::floor(a)) return 0.0;
  const double mu = treatment_mean(w);
  if (kind == DgpKind::poisson) return std::exp(a * std::log(mu) - mu - std::lgamma(a + 1));
  const double nu = dispersion(w);
  return std::exp(std::lgamma(a + nu) - std::lgamma(nu) - std::lgamma(a + 1) +
                  nu * std::log(nu / (nu + mu)) + a * std::log(mu / (nu + mu)));
}

double DgpSpec::outcome_mean(double a, std::span<const double> w) const {
  if (kind == DgpKind::poisson)
    return expit(a + 2 * (1 - w[0]) + 0.5 * w[1] + 0.5 * w[2] + 2 * w[0] * w[1] - 7);
  return expit(a + 2 * (1 - w[0]) + w[1] - w[2] + 1.5 * w[0] * w[1] - 5);
}

Dataset draw(const DgpSpec& spec, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw Error(ErrorKind::empty_input, "cannot draw an empty sample");
  auto rng = make_rng(seed);
  std::bernoulli_distribution w1(0.6);
  std::uniform_real_distribution<double> w2(0.5, 1.5);
  std::poisson_distribution<int> w3(2.0);
  RowMatrix w(static_cast<Eigen::Index>(n), 3);
  std::vector<double> a(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    w(r, 0) = w1(rng) ? 1.0 : 0.0;
    w(r, 1) = w2(rng);
    w(r, 2) = w3(rng);
    const std::span<const double> wi(w.data() + i * 3, 3);
    double rate = spec.treatment_mean(wi);
    if (spec.kind == DgpKind::negbinom) {
      const double nu = spec.dispersion(wi);
      rate = std::gamma_distribution<double>(nu, rate / nu)(rng);
    }
    a[i] = rate > 0 ? std::poisson_distribution<long>(rate)(rng) : 0.0;
    y[i] = std::bernoulli_distribution(spec.outcome_mean(a[i], wi))(rng) ? 1.0 : 0.0;
  }
  return Dataset(std::move(w), std::move(a), std::move(y), {"W1", "W2", "W3"});
}

double TrueDensity::operator()(std::size_t i, double a) const {
  return spec_.pmf(a, {w_.data() + i * static_cast<std::size_t>(w_.cols()),
                       static_cast<std::size_t>(w_.cols())});
}

std::vector<double> TrueOutcome::predict(std::span<const double> a, const RowMatrix& w) const {
  if (a.size() != static_cast<std::size_t>(w.rows()))
    throw Error(ErrorKind::shape, "treatment and covariate rows differ in length");
  const auto d = static_cast<std::size_t>(w.cols());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = spec_.outcome_mean(a[i], {w.data() + i * d, d});
  return out;
}

double true_psi(const DgpSpec& spec, double delta, std::size_t n, std::uint64_t seed) {
  static std::mutex mu;
  static std::map<std::tuple<int, double, std::size_t, std::uint64_t>, double> cache;
  const auto key = std::make_tuple(static_cast<int>(spec.kind), delta, n, seed);
  {
    std::lock_guard lock(mu);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
  }
  const Dataset data = draw(spec, n, seed);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += spec.outcome_mean(data.treatment()[i] + delta, data.covariate_row(i));
  const double psi = s / static_cast<double>(n);
  std::lock_guard lock(mu);
  cache.emplace(key, psi);
  return psi;
}

std::vector<double> true_eif_sample(const DgpSpec& spec, double delta, std::size_t n,
                                    std::uint64_t seed) {
  const double psi = true_psi(spec, delta);
  const Dataset data = draw(spec, n, seed);
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto w = data.covariate_row(i);
    const double a = data.treatment()[i];
    const double h = spec.pmf(a - delta, w) / spec.pmf(a, w);
    d[i] = h * (data.outcome()[i] - spec.outcome_mean(a, w)) + spec.outcome_mean(a + delta, w) - psi;
  }
  return d;
}

double efficiency_bound(const DgpSpec& spec, double delta, std::size_t n, std::uint64_t seed) {
  return sample_variance(true_eif_sample(spec, delta, n, seed));
}

double r2_tilde(const Dataset& data, const haldensify::SampleDensity& g, const UnitOutcome& q_hat,
                const DgpSpec& spec, const mtp::ResolvedRegime& regime) {
  const std::size_t n = data.size();
  if (g.size() != n) throw Error(ErrorKind::shape, "density sample does not match the data");
  const auto& a = data.treatment();
  const double top = std::floor(*std::max_element(a.begin(), a.end())) + 10;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto w = data.covariate_row(i);
    const double first = (q_hat(i, a[i]) - spec.outcome_mean(a[i], w)) * mtp::weight_at(g, i, regime, a[i]);
    double norm = 0.0, second = 0.0;
    for (double k = 0; k <= top; k += 1) {
      norm += g(i, k);
      const double diff = q_hat(i, k) - spec.outcome_mean(k, w);
      if (diff != 0.0) second += diff * mtp::post_density(g, i, regime, k);
    }
    total += first - (norm > 0 ? second / norm : 0.0);
  }
  return total / static_cast<double>(n);
}

// --- experiments -----------------------------------------------------------

ExperimentConfig ExperimentConfig::desk(DgpKind kind) {
  ExperimentConfig c;
  c.dgp.kind = kind;
  c.n_list = {500};
  c.reps = 100;
  c.density.n_lambda = 200;
  c.density.lambda_min_ratio = 1e-3;
  c.density.basis.knots_per_covariate = 25;
  c.outcome.n_lambda = 100;
  c.outcome.lambda_min_ratio = 1e-3;
  c.outcome.basis.knots_per_covariate = 25;
  return c;
}

ExperimentConfig ExperimentConfig::full(DgpKind kind) {
  ExperimentConfig c;
  c.dgp.kind = kind;
  c.n_list = {100, 200, 500};
  c.reps = 300;
  c.density.n_lambda = 3000;
  c.density.lambda_min_ratio = 1e-4;
  c.outcome.n_lambda = 100;
  return c;
}

std::string ExperimentConfig::echo() const {
  std::ostringstream s;
  s.precision(17);
  s << "dgp=" << to_string(dgp.kind) << ";delta=" << dgp.delta << ";n=";
  for (auto n : n_list) s << n << ',';
  s << ";reps=" << reps << ";seed=" << seed << ";selectors=";
  for (auto k : selectors) s << selectors::to_string(k) << ',';
  s << ";dr=" << doubly_robust << ";bins=" << density.bins
    << ";bin_type=" << haldensify::to_string(density.bin_type) << ";folds=" << density.folds
    << ";n_lambda=" << density.n_lambda << ";lambda_min_ratio=" << density.lambda_min_ratio
    << ";integer_bins=" << integer_bins << ";undersmooth=" << density.undersmooth << ";degree=" << density.basis.max_degree
    << ";knots=" << density.basis.knots_per_covariate << ";tol=" << density.solver.tolerance
    << ";q_n_lambda=" << outcome.n_lambda << ";q_ratio=" << outcome.lambda_min_ratio
    << ";q_degree=" << outcome.basis.max_degree << ";q_knots=" << outcome.basis.knots_per_covariate
    << ";q_folds=" << outcome.folds << ";k_max=" << plateau.k_max << ";alpha=" << plateau.alpha
    << ";span=" << plateau.span << ";truth=" << truth_size;
  return s.str();
}

namespace {

// Q on the integer grid 0..top for every unit, row-major (unit, a).
struct OutcomeGrid {
  std::size_t width = 0;
  std::vector<double> values;
  double operator()(std::size_t i, double a) const { return values[i * width + static_cast<std::size_t>(a)]; }
};

OutcomeGrid outcome_grid(const Dataset& data, const estimators::OutcomeModel& q, std::size_t top) {
  const std::size_t n = data.size(), width = top + 1;
  RowMatrix w(static_cast<Eigen::Index>(n * width), data.covariates().cols());
  std::vector<double> a(n * width);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < width; ++k) {
      w.row(static_cast<Eigen::Index>(i * width + k)) = data.covariates().row(static_cast<Eigen::Index>(i));
      a[i * width + k] = static_cast<double>(k);
    }
  return {width, q.predict(a, w)};
}

}  // namespace

std::vector<ReplicateRecord> run_replicate(const ExperimentConfig& cfg, const Dataset& data,
                                           std::size_t rep_id) {
  const std::uint64_t seed = cfg.seed + rep_id;
  const mtp::ResolvedRegime regime{mtp::ShiftKind::additive, cfg.dgp.delta,
                                   std::numeric_limits<double>::infinity()};
  const auto& a = data.treatment();
  const auto top = static_cast<std::size_t>(*std::max_element(a.begin(), a.end())) + 10;

  hal::HalConfig qcfg = cfg.outcome;
  qcfg.seed = seed;
  qcfg.threads = 1;
  const auto q_hal = estimators::fit_outcome_regression(data, estimators::OutcomeMethod::hal, qcfg);
  const auto ov_hal = estimators::outcome_values(data, q_hal, regime);
  const auto grid_hal = outcome_grid(data, q_hal, top);

  haldensify::FamilyConfig fcfg = cfg.density;
  fcfg.seed = seed;
  fcfg.threads = 1;
  if (cfg.integer_bins) {
    const auto [lo, hi] = std::minmax_element(a.begin(), a.end());
    fcfg.bins = std::max(2, static_cast<int>(*hi - *lo));
  }
  const auto family = haldensify::build_family(data, fcfg);
  const haldensify::FamilyTable table(family, data.covariates());
  const auto trace = selectors::build_trace(data, family, regime, ov_hal, 1);

  std::vector<ReplicateRecord> out;
  for (auto kind : cfg.selectors) {
    const auto choice = selectors::select(kind, trace, cfg.plateau);
    const auto& tr = trace.records[choice.index];
    const auto g = table.density(choice.index);
    ReplicateRecord r;
    r.n = data.size();
    r.rep_id = rep_id;
    r.estimator = "ipw";
    r.selector = selectors::to_string(kind);
    r.psi_hat = tr.psi;
    r.se_hat = tr.se;
    r.se_eif = tr.se_eif;
    r.pn_eif = tr.pn_eif;
    r.r2_tilde = r2_tilde(data, g, grid_hal, cfg.dgp, regime);
    r.lambda_index = choice.index;
    r.fallback = choice.fallback;
    out.push_back(std::move(r));
  }
  if (!cfg.doubly_robust) return out;

  const auto q_glm = estimators::fit_outcome_regression(data, estimators::OutcomeMethod::glm, qcfg);
  const auto ov_glm = estimators::outcome_values(data, q_glm, regime);
  const auto grid_glm = outcome_grid(data, q_glm, top);
  for (auto kind : {selectors::SelectorKind::global_cv, selectors::SelectorKind::dcar_min}) {
    const auto choice = selectors::select(kind, trace, cfg.plateau);
    const auto g = table.density(choice.index);
    const auto dv = estimators::density_values(data, g, regime);
    for (int m = 0; m < 2; ++m) {
      const auto& ov = m == 0 ? ov_hal : ov_glm;
      const auto& grid = m == 0 ? grid_hal : grid_glm;
      const auto fit = estimators::tmle(estimators::combine(data, ov, dv));
      const double eps = fit.epsilon;
      const UnitOutcome q_star = [&](std::size_t i, double av) {
        return estimators::tilt(grid(i, av), eps, mtp::weight_at(g, i, regime, av));
      };
      ReplicateRecord r;
      r.n = data.size();
      r.rep_id = rep_id;
      r.estimator = m == 0 ? "tmle-hal" : "tmle-glm";
      r.selector = selectors::to_string(kind);
      r.psi_hat = fit.report.psi;
      r.se_hat = fit.report.se;
      r.se_eif = fit.report.se_eif;
      r.pn_eif = fit.report.pn_eif;
      r.r2_tilde = r2_tilde(data, g, q_star, cfg.dgp, regime);
      r.lambda_index = choice.index;
      r.fallback = choice.fallback;
      out.push_back(std::move(r));
    }
  }
  return out;
}

SimResult run_experiment(const ExperimentConfig& cfg) {
  if (cfg.n_list.empty() || cfg.reps == 0) throw Error(ErrorKind::invalid_config, "no replicates requested");
  SimResult res;
  res.dgp = to_string(cfg.dgp.kind);
  res.delta = cfg.dgp.delta;
  res.seed = cfg.seed;
  res.config_hash = hex64(fnv1a64(cfg.echo()));
  res.psi0 = true_psi(cfg.dgp, cfg.dgp.delta, cfg.truth_size);
  res.bound = efficiency_bound(cfg.dgp, cfg.dgp.delta, cfg.truth_size);

  const std::size_t tasks = cfg.n_list.size() * cfg.reps;
  std::vector<std::vector<ReplicateRecord>> records(tasks);
  std::vector<std::optional<std::string>> errors(tasks);
  parallel_for(tasks, cfg.threads, [&](std::size_t t) {
    const std::size_t n = cfg.n_list[t / cfg.reps], rep = t % cfg.reps;
    try {
      records[t] = run_replicate(cfg, draw(cfg.dgp, n, cfg.seed + rep), rep);
    } catch (const std::exception& e) {
      errors[t] = e.what();
    }
  });

  for (std::size_t t = 0; t < tasks; ++t) {
    if (errors[t]) {
      res.failures.push_back({cfg.n_list[t / cfg.reps], t % cfg.reps, *errors[t]});
      continue;
    }
    for (auto& r : records[t]) res.records.push_back(std::move(r));
  }
  for (std::size_t n : cfg.n_list) {
    std::size_t failed = 0;
    std::string first;
    for (const auto& f : res.failures)
      if (f.n == n && failed++ == 0) first = f.message;
    if (10 * failed > cfg.reps)
      throw Error(ErrorKind::replicate_failures,
                  std::to_string(failed) + " of " + std::to_string(cfg.reps) + " replicates failed at n=" +
                      std::to_string(n) + "; first failure: " + first);
  }
  return res;
}

double trimmed_mean(std::vector<double> values, double frac) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const auto drop = static_cast<std::size_t>(std::floor(frac * static_cast<double>(values.size())));
  if (2 * drop >= values.size()) return mean(values);
  return mean(std::span<const double>(values).subspan(drop, values.size() - 2 * drop));
}

std::vector<MetricRow> metric_table(const SimResult& result) {
  std::vector<std::tuple<std::size_t, std::string, std::string>> keys;
  std::map<std::tuple<std::size_t, std::string, std::string>, std::vector<const ReplicateRecord*>> groups;
  for (const auto& r : result.records) {
    auto key = std::make_tuple(r.n, r.estimator, r.selector);
    auto& g = groups[key];
    if (g.empty()) keys.push_back(key);
    g.push_back(&r);
  }
  const double z = normal_quantile(0.975);
  std::vector<MetricRow> rows;
  for (const auto& key : keys) {
    const auto& g = groups[key];
    const double n = static_cast<double>(std::get<0>(key));
    const double m = static_cast<double>(g.size());
    std::vector<double> psi, r2;
    double bias = 0, var = 0, pn = 0, wald = 0;
    for (const auto* r : g) {
      psi.push_back(r->psi_hat);
      r2.push_back(r->r2_tilde);
      bias += std::sqrt(n) * (result.psi0 - r->psi_hat);
      var += r->se_hat * r->se_hat;
      pn += std::abs(r->pn_eif);
      wald += std::abs(r->psi_hat - result.psi0) <= z * r->se_eif;
    }
    const double mc_sd = std::sqrt(sample_variance(psi));
    double oracle = 0;
    for (double p : psi) oracle += std::abs(p - result.psi0) <= z * mc_sd;
    const double mean_bias = result.psi0 - mean(psi);
    MetricRow row;
    row.dgp = result.dgp;
    row.n = std::get<0>(key);
    row.estimator = std::get<1>(key);
    row.selector = std::get<2>(key);
    row.scaled_bias = bias / m;
    row.rel_scaled_mse = n * (mean_bias * mean_bias + var / m) / result.bound;
    row.abs_pn_eif = pn / m;
    row.oracle_cov = oracle / m;
    row.wald_cov = wald / m;
    row.r2_trimmed = trimmed_mean(r2);
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::parse, "cannot write '" + path + "'");
  return f;
}

void header_comment(std::ostream& f, const SimResult& r) {
  f << "# shiftipw " << kVersion << " config=" << r.config_hash << " seed=" << r.seed
    << " psi0=" << num(r.psi0) << " bound=" << num(r.bound) << '\n';
}

}  // namespace

void write_records_csv(const SimResult& result, const std::string& path) {
  auto f = open_out(path);
  header_comment(f, result);
  f << "dgp,n,rep_id,estimator,selector,psi_hat,se_hat,se_eif,pn_eif,r2_tilde,lambda_index,fallback,status\n";
  for (const auto& r : result.records)
    f << result.dgp << ',' << r.n << ',' << r.rep_id << ',' << r.estimator << ',' << r.selector << ','
      << num(r.psi_hat) << ',' << num(r.se_hat) << ',' << num(r.se_eif) << ',' << num(r.pn_eif) << ','
      << num(r.r2_tilde) << ',' << r.lambda_index << ',' << r.fallback << ",ok\n";
  for (const auto& e : result.failures) {
    std::string msg = e.message;
    std::replace(msg.begin(), msg.end(), ',', ';');
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    f << result.dgp << ',' << e.n << ',' << e.rep_id << ",,,,,,,,,,failed: " << msg << '\n';
  }
}

void write_metrics_csv(const SimResult& result, const std::vector<MetricRow>& rows,
                       const std::string& path) {
  auto f = open_out(path);
  header_comment(f, result);
  f << "dgp,n,estimator,selector,scaled_bias,rel_scaled_mse,abs_pn_eif,oracle_cov,wald_cov,r2_trimmed\n";
  for (const auto& r : rows)
    f << r.dgp << ',' << r.n << ',' << r.estimator << ',' << r.selector << ',' << num(r.scaled_bias) << ','
      << num(r.rel_scaled_mse) << ',' << num(r.abs_pn_eif) << ',' << num(r.oracle_cov) << ','
      << num(r.wald_cov) << ',' << num(r.r2_trimmed) << '\n';
}

}  // namespace shiftipw::simlab
