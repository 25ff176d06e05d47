// Acceptance run: one PASS/FAIL line per criterion, exit 0 only if all pass.
//   acceptance --workdir DIR [--only 1,4,7]

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "shiftipw/estimators.hpp"
#include "shiftipw/hal.hpp"
#include "shiftipw/haldensify.hpp"
#include "shiftipw/mtp.hpp"
#include "shiftipw/selectors.hpp"
#include "shiftipw/simlab.hpp"
#include "support.hpp"

using namespace shiftipw;
using datacore::Dataset;
using datacore::RowMatrix;

namespace {

// Pinned tolerances and sizes.
constexpr double kIdentityTol = 1e-12;
constexpr double kKktTol = 1e-5;
constexpr double kOracleTol = 2e-3;
constexpr double kNormTol = 1e-8;
constexpr double kScoreTol = 1e-4;
constexpr double kRateLo = 2.0, kRateHi = 5.0;
constexpr double kMseCap = 2.0;
constexpr double kEifFactor = 2.0;
constexpr double kOracleCovMin = 0.90;
constexpr double kWaldCovMin = 0.88;

constexpr std::size_t kSolverProblems = 20;
constexpr std::size_t kSolverN = 50;
constexpr std::size_t kNormN = 500;
constexpr int kMiseBins = 25;
constexpr std::size_t kMiseReps = 20;
constexpr std::size_t kMiseEvalN = 1000;
constexpr std::size_t kRateReps = 50;

struct Verdict {
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string workdir;

void progress(const std::string& s) {
  std::fprintf(stderr, "[acceptance] %s\n", s.c_str());
  std::fflush(stderr);
}

// Continuous-treatment data outside the simulation designs.
Dataset gaussian_data(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<double> z(0, 1);
  RowMatrix w(static_cast<Eigen::Index>(n), 2);
  std::vector<double> a(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    w(r, 0) = u(rng);
    w(r, 1) = u(rng) < 0.4 ? 1.0 : 0.0;
    a[i] = 2.0 + w(r, 0) - 0.5 * w(r, 1) + z(rng);
    y[i] = u(rng) < testsupport::expit(-1.0 + 0.3 * a[i] + w(r, 1)) ? 1.0 : 0.0;
  }
  return Dataset(std::move(w), std::move(a), std::move(y), {"W1", "W2"});
}

// 1. Identity shift.
Verdict identity_shift() {
  double worst = 0.0, worst_dcar = 0.0;
  std::size_t checks = 0;
  std::vector<Dataset> sets{simlab::draw({simlab::DgpKind::poisson}, 200, 101),
                            simlab::draw({simlab::DgpKind::negbinom}, 200, 102), gaussian_data(200, 103)};
  const std::vector<mtp::MtpRegime> regimes{{mtp::ShiftKind::additive, 0.0},
                                            {mtp::ShiftKind::multiplicative, 1.0}};
  haldensify::FamilyConfig fc;
  fc.n_lambda = 25;
  fc.lambda_min_ratio = 1e-2;
  fc.folds = 3;
  fc.basis.knots_per_covariate = 8;
  hal::HalConfig qc;
  qc.n_lambda = 20;
  qc.lambda_min_ratio = 1e-2;
  qc.folds = 3;
  qc.basis.knots_per_covariate = 8;
  for (const auto& d : sets) {
    const double ybar = mean(d.outcome());
    const auto fam = haldensify::build_family(d, fc);
    const haldensify::FamilyTable table(fam, d.covariates());
    for (auto method : {estimators::OutcomeMethod::hal, estimators::OutcomeMethod::glm}) {
      const auto q = estimators::fit_outcome_regression(d, method, qc);
      for (const auto& reg : regimes) {
        const auto r = mtp::resolve(reg, d.treatment());
        const auto ov = estimators::outcome_values(d, q, r);
        for (std::size_t k = 0; k < fam.size(); ++k) {
          const auto nv = estimators::combine(d, ov, estimators::density_values(d, table.density(k), r));
          const auto stab = estimators::ipw_report(nv, true);
          for (double psi : {estimators::ipw_report(nv, false).psi, stab.psi, estimators::onestep(nv).psi,
                             estimators::tmle(nv).report.psi}) {
            worst = std::max(worst, std::abs(psi - ybar));
            ++checks;
          }
          worst_dcar = std::max(worst_dcar, std::abs(stab.pn_dcar));
        }
        const auto trace = selectors::build_trace(d, fam, r, ov);
        for (auto kind : selectors::all_selectors()) {
          const auto c = selectors::select(kind, trace);
          worst = std::max(worst, std::abs(c.psi - ybar));
          worst_dcar = std::max(worst_dcar, trace.records[c.index].abs_pn_dcar);
          ++checks;
        }
      }
    }
  }
  Verdict v;
  v.pass = worst <= kIdentityTol && worst_dcar == 0.0;
  v.detail = "max |psi - mean(Y)| = " + fmt("%.3g", worst) + " over " + std::to_string(checks) +
             " estimates; max |P_n Dcar| = " + fmt("%.3g", worst_dcar);
  return v;
}

// 2. Lasso solver against KKT and the sign-pattern oracle.
Verdict solver() {
  double worst_kkt = 0.0, worst_gap = 0.0;
  for (std::size_t s = 0; s < kSolverProblems; ++s) {
    std::mt19937_64 rng(500 + s);
    std::uniform_real_distribution<double> u(0, 1);
    const int p = 1 + static_cast<int>(s % 3);
    const bool logistic = s % 2 == 1;
    const bool weighted = (s / 2) % 2 == 1;
    Eigen::MatrixXd x(kSolverN, p);
    Eigen::VectorXd y(kSolverN), w = Eigen::VectorXd::Ones(kSolverN);
    std::vector<double> cut(p);
    for (auto& c : cut) c = 0.2 + 0.6 * u(rng);
    for (std::size_t i = 0; i < kSolverN; ++i) {
      double f = -0.3;
      for (int j = 0; j < p; ++j) {
        x(i, j) = u(rng) >= cut[j] ? 1.0 : 0.0;
        f += (j % 2 ? -0.7 : 0.9) * x(i, j);
      }
      y[i] = logistic ? (u(rng) < testsupport::expit(f) ? 1.0 : 0.0) : f + 0.4 * (u(rng) - 0.5);
      if (weighted) w[i] = 0.5 + u(rng);
    }
    const std::vector<double> yy(y.data(), y.data() + kSolverN), ww(w.data(), w.data() + kSolverN);
    const auto design = hal::BinaryDesign::from_dense(x);
    const auto loss = logistic ? hal::Loss::logistic : hal::Loss::squared_error;
    const double lmax = hal::lambda_max(design, yy, ww, loss);
    const std::vector<double> grid{0.5 * lmax, 0.2 * lmax, 0.05 * lmax, 0.01 * lmax};
    const auto path = hal::fit_lasso_path(design, yy, ww, loss, hal::LambdaGrid::explicit_values(grid));
    for (std::size_t k = 0; k < path.size(); ++k) {
      Eigen::VectorXd b = Eigen::VectorXd::Zero(p);
      for (const auto& [j, c] : path.coefficients[k]) b[j] = c;
      worst_kkt = std::max(worst_kkt, testsupport::kkt_violation(x, y, w, logistic, path.lambdas[k],
                                                                 path.intercepts[k], b));
      const auto ref = testsupport::lasso_oracle(x, y, w, logistic, path.lambdas[k]);
      worst_gap = std::max({worst_gap, std::abs(ref.intercept - path.intercepts[k]),
                            (ref.beta - b).cwiseAbs().maxCoeff()});
    }
  }
  Verdict v;
  v.pass = worst_kkt <= kKktTol && worst_gap <= kOracleTol;
  v.detail = std::to_string(kSolverProblems) + " problems: max KKT violation " + fmt("%.3g", worst_kkt) +
             ", max oracle gap " + fmt("%.3g", worst_gap);
  return v;
}

// Family as fit inside a desk replicate.
haldensify::FamilyConfig desk_density(const Dataset& d, simlab::DgpKind kind, std::uint64_t seed) {
  auto cfg = simlab::ExperimentConfig::desk(kind).density;
  cfg.seed = seed;
  const auto [lo, hi] = std::minmax_element(d.treatment().begin(), d.treatment().end());
  cfg.bins = std::max(2, static_cast<int>(*hi - *lo));
  return cfg;
}

// 3. Every family member integrates to one at every training row.
Verdict normalization() {
  double worst = 0.0;
  std::size_t members = 0;
  for (auto kind : {simlab::DgpKind::poisson, simlab::DgpKind::negbinom}) {
    const auto d = simlab::draw({kind}, kNormN, 301);
    auto unit = desk_density(d, kind, 1);
    auto coarse = unit;
    coarse.bins = 0;
    for (const auto& cfg : {unit, coarse}) {
      const auto fam = haldensify::build_family(d, cfg);
      const haldensify::FamilyTable table(fam, d.covariates());
      for (std::size_t k = 0; k < fam.size(); ++k) {
        const auto g = table.density(k);
        for (std::size_t i = 0; i < d.size(); ++i) {
          double s = 0.0;
          for (int t = 0; t < fam.bins.bins(); ++t) s += g(i, fam.bins.midpoint(t)) * fam.bins.width(t);
          worst = std::max(worst, std::abs(s - 1.0));
        }
      }
      members += fam.size();
    }
  }
  Verdict v;
  v.pass = worst <= kNormTol;
  v.detail = std::to_string(members) + " family members: max |integral - 1| = " + fmt("%.3g", worst);
  return v;
}

// 4. Binned density error against the true pmf, measured as squared error of
// the bin masses averaged over a fixed covariate sample.  True mass below the
// first cut or above the last is charged to the edge bins.
Verdict density_consistency() {
  const simlab::DgpSpec spec{simlab::DgpKind::poisson};
  const auto eval = simlab::draw(spec, kMiseEvalN, 999);
  std::vector<double> mise;
  std::string detail;
  for (std::size_t n : {250, 1000, 4000}) {
    double total = 0.0;
    for (std::size_t rep = 0; rep < kMiseReps; ++rep) {
      const auto d = simlab::draw(spec, n, 4000 + 97 * n + rep);
      auto cfg = simlab::ExperimentConfig::desk(spec.kind).density;
      cfg.bins = kMiseBins;
      cfg.bin_type = haldensify::BinType::equal_range;
      cfg.n_lambda = 50;
      cfg.seed = rep + 1;
      cfg.undersmooth = 1;
      const auto fam = haldensify::build_family(d, cfg);
      const auto probs = fam.density(0, eval.covariates()).probabilities();
      const int t_count = fam.bins.bins();
      double err = 0.0;
      for (std::size_t i = 0; i < kMiseEvalN; ++i) {
        const auto w = eval.covariate_row(i);
        std::vector<double> truth(t_count, 0.0);
        for (int a = 0; a < 200; ++a) {
          const double m = spec.pmf(a, w);
          int t = fam.bins.bin_of(a);
          if (t < 0) t = a < fam.bins.cutpoints.front() ? 0 : t_count - 1;
          truth[t] += m;
        }
        for (int t = 0; t < t_count; ++t) {
          const double e = probs(static_cast<Eigen::Index>(i), t) - truth[t];
          err += e * e;
        }
      }
      total += err / kMiseEvalN;
    }
    mise.push_back(total / kMiseReps);
    detail += "n=" + std::to_string(n) + ": " + fmt("%.4g", mise.back()) + "  ";
    progress("criterion 4 n=" + std::to_string(n) + " MISE " + fmt("%.4g", mise.back()));
  }
  Verdict v;
  v.pass = mise[0] > mise[1] && mise[1] > mise[2];
  v.detail = "MISE " + detail;
  return v;
}

// 6. |P_n Dcar| at the true nuisances shrinks at the root-n rate.
Verdict dcar_rate() {
  const simlab::DgpSpec spec{simlab::DgpKind::poisson};
  const mtp::ResolvedRegime r{mtp::ShiftKind::additive, spec.delta, std::numeric_limits<double>::infinity()};
  const simlab::TrueOutcome q(spec);
  std::vector<double> m;
  for (std::size_t n : {1000, 10000}) {
    double s = 0.0;
    for (std::size_t rep = 0; rep < kRateReps; ++rep) {
      const auto d = simlab::draw(spec, n, 7000 + n + rep);
      const simlab::TrueDensity g(spec, d.covariates());
      const auto nv = estimators::combine(d, estimators::outcome_values(d, q, r), estimators::density_values(d, g, r));
      s += std::abs(estimators::ipw_report(nv, true).pn_dcar);
    }
    m.push_back(s / kRateReps);
  }
  const double ratio = m[0] / m[1];
  Verdict v;
  v.pass = ratio >= kRateLo && ratio <= kRateHi;
  v.detail = "mean |P_n Dcar| " + fmt("%.4g", m[0]) + " -> " + fmt("%.4g", m[1]) + ", ratio " + fmt("%.3f", ratio);
  return v;
}

// Desk experiments, run at most once each.
struct DeskRun {
  simlab::SimResult result;
  std::vector<simlab::MetricRow> rows;
};

std::map<simlab::DgpKind, DeskRun> desk_runs;

const DeskRun& desk(simlab::DgpKind kind) {
  auto it = desk_runs.find(kind);
  if (it != desk_runs.end()) return it->second;
  progress(std::string("desk experiment on ") + simlab::to_string(kind) + " (100 reps, n = 500)");
  const auto t0 = std::chrono::steady_clock::now();
  const auto cfg = simlab::ExperimentConfig::desk(kind);
  DeskRun run;
  run.result = simlab::run_experiment(cfg);
  run.rows = simlab::metric_table(run.result);
  const std::string stem = workdir + "/desk_" + simlab::to_string(kind);
  simlab::write_records_csv(run.result, stem + "_records.csv");
  simlab::write_metrics_csv(run.result, run.rows, stem + "_metrics.csv");
  progress("desk experiment finished in " +
           fmt("%.0f s", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()));
  return desk_runs.emplace(kind, std::move(run)).first->second;
}

const simlab::MetricRow& row(const DeskRun& run, const std::string& est, const std::string& sel) {
  for (const auto& r : run.rows)
    if (r.estimator == est && r.selector == sel) return r;
  throw std::runtime_error("no metric row for " + est + "/" + sel);
}

// 5. TMLE score on every simulated dataset.
Verdict tmle_score() {
  double worst = 0.0;
  std::size_t count = 0, failures = 0;
  for (auto kind : {simlab::DgpKind::poisson, simlab::DgpKind::negbinom}) {
    const auto& run = desk(kind);
    failures += run.result.failures.size();
    for (const auto& r : run.result.records)
      if (r.estimator.rfind("tmle", 0) == 0) {
        worst = std::max(worst, std::abs(r.pn_eif));
        ++count;
      }
  }
  Verdict v;
  v.pass = worst <= kScoreTol && failures == 0 && count > 0;
  v.detail = std::to_string(count) + " TMLE fits: max |P_n D*| = " + fmt("%.3g", worst) + ", " +
             std::to_string(failures) + " failed replicates";
  return v;
}

// 7. Desk-scale ordering on DGP1.
Verdict desk_ordering() {
  const auto& run = desk(simlab::DgpKind::poisson);
  const auto& dcar = row(run, "ipw", "dcar-min");
  const auto& cv = row(run, "ipw", "global-cv");
  const bool a = std::abs(dcar.scaled_bias) < std::abs(cv.scaled_bias);
  const bool b = dcar.rel_scaled_mse <= kMseCap;
  bool c = true;
  std::string cdet;
  for (const char* est : {"tmle-hal", "tmle-glm"}) {
    const auto& t = row(run, est, "dcar-min");
    c = c && dcar.abs_pn_eif <= kEifFactor * t.abs_pn_eif;
    cdet += std::string(" ") + est + " " + fmt("%.3g", t.abs_pn_eif);
  }
  // The per-replicate reading of the MSE formula, reported only.
  double literal = 0.0, reps = 0.0;
  for (const auto& r : run.result.records)
    if (r.estimator == "ipw" && r.selector == "dcar-min") {
      const double e = run.result.psi0 - r.psi_hat;
      literal += static_cast<double>(r.n) * (e * e + r.se_hat * r.se_hat) / run.result.bound;
      reps += 1.0;
    }
  Verdict v;
  v.pass = a && b && c;
  v.detail = std::string("(a) ") + (a ? "ok" : "FAIL") + " |bias| dcar-min " + fmt("%.3f", std::abs(dcar.scaled_bias)) +
             " vs global-cv " + fmt("%.3f", std::abs(cv.scaled_bias)) + "; (b) " + (b ? "ok" : "FAIL") +
             " rel MSE " + fmt("%.3f", dcar.rel_scaled_mse) + " (per-replicate reading " + fmt("%.3f", literal / reps) + ")" + "; (c) " + (c ? "ok" : "FAIL") +
             " |P_n EIF| ipw " + fmt("%.3g", dcar.abs_pn_eif) + " vs" + cdet;
  return v;
}

// 8. Coverage on DGP2.
Verdict coverage() {
  const auto& run = desk(simlab::DgpKind::negbinom);
  bool ok = true;
  std::string detail;
  for (auto kind : selectors::all_selectors()) {
    if (kind == selectors::SelectorKind::global_cv) continue;
    const auto& r = row(run, "ipw", selectors::to_string(kind));
    ok = ok && r.oracle_cov >= kOracleCovMin;
    detail += std::string(selectors::to_string(kind)) + " oracle " + fmt("%.2f", r.oracle_cov) + "; ";
  }
  for (auto kind : {selectors::SelectorKind::dcar_min, selectors::SelectorKind::dcar_tol}) {
    const auto& r = row(run, "ipw", selectors::to_string(kind));
    ok = ok && r.wald_cov >= kWaldCovMin;
    detail += std::string(selectors::to_string(kind)) + " wald " + fmt("%.2f", r.wald_cov) + "; ";
  }
  Verdict v;
  v.pass = ok;
  v.detail = detail;
  return v;
}

// 9. Remainder: exact zero at the true regression, and the agnostic IPW
// remainder no larger than the dcar-min DR remainder.
Verdict second_order() {
  const simlab::DgpSpec spec{simlab::DgpKind::poisson};
  const auto d = simlab::draw(spec, 500, 909);
  const auto fam = haldensify::build_family(d, desk_density(d, spec.kind, 1));
  const haldensify::FamilyTable table(fam, d.covariates());
  const mtp::ResolvedRegime reg{mtp::ShiftKind::additive, spec.delta, std::numeric_limits<double>::infinity()};
  const simlab::UnitOutcome truth = [&](std::size_t i, double a) { return spec.outcome_mean(a, d.covariate_row(i)); };
  double worst_zero = 0.0;
  for (std::size_t k : {std::size_t{0}, fam.size() / 2, fam.size() - 1})
    worst_zero = std::max(worst_zero, std::abs(simlab::r2_tilde(d, table.density(k), truth, spec, reg)));

  const auto& run = desk(spec.kind);
  double dr = std::numeric_limits<double>::infinity();
  std::string detail = "R2 at true Q " + fmt("%.3g", worst_zero) + "; trimmed R2:";
  for (const char* est : {"tmle-hal", "tmle-glm"}) {
    const double v = std::abs(row(run, est, "dcar-min").r2_trimmed);
    dr = std::min(dr, v);
    detail += std::string(" ") + est + "/dcar-min " + fmt("%.3g", v);
  }
  bool ok = worst_zero == 0.0;
  for (const char* sel : {"lepski", "plateau"}) {
    const double v = std::abs(row(run, "ipw", sel).r2_trimmed);
    ok = ok && v <= dr;
    detail += std::string(" ipw/") + sel + " " + fmt("%.3g", v);
  }
  Verdict out;
  out.pass = ok;
  out.detail = detail;
  return out;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

// 10. simulate twice with one seed, compare bytes.
Verdict reproducibility() {
  bool ok = true;
  std::string detail;
  for (const char* dgp : {"poisson", "negbinom"}) {
    std::vector<std::string> files;
    for (int run = 0; run < 2; ++run) {
      const std::string stem = workdir + "/repro_" + dgp + "_" + std::to_string(run);
      const std::string cmd = std::string("\"") + SHIFTIPW_CLI_PATH + "\" simulate --dgp " + dgp +
                              " --n 120 --reps 3 --knots 8 --n-lambda 20 --truth-size 50000 --seed 11 --threads 1"
                              " --records \"" + stem + "_records.csv\" --metrics \"" + stem + "_metrics.csv\"";
      if (std::system(cmd.c_str()) != 0) {
        ok = false;
        detail += std::string(dgp) + " run failed; ";
      }
      files.push_back(slurp(stem + "_records.csv"));
      files.push_back(slurp(stem + "_metrics.csv"));
    }
    const bool same = !files[0].empty() && files[0] == files[2] && files[1] == files[3];
    ok = ok && same;
    detail += std::string(dgp) + (same ? " identical (" : " differ (") + std::to_string(files[0].size()) + " + " +
              std::to_string(files[1].size()) + " bytes); ";
  }
  Verdict v;
  v.pass = ok;
  v.detail = detail;
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  workdir = (std::filesystem::temp_directory_path() / "shiftipw_acceptance").string();
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--workdir" && i + 1 < argc) {
      workdir = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream s(argv[++i]);
      for (std::string tok; std::getline(s, tok, ',');) only.insert(std::stoi(tok));
    } else {
      std::fprintf(stderr, "usage: acceptance [--workdir DIR] [--only 1,2,...]\n");
      return 2;
    }
  }
  std::filesystem::create_directories(workdir);

  const std::vector<std::pair<int, std::function<Verdict()>>> criteria{
      {1, identity_shift}, {2, solver},    {3, normalization}, {4, density_consistency}, {6, dcar_rate},
      {10, reproducibility}, {7, desk_ordering}, {8, coverage},      {5, tmle_score},          {9, second_order}};
  const std::map<int, std::string> names{{1, "identity shift"},         {2, "solver correctness"},
                                         {3, "density normalization"},  {4, "density consistency"},
                                         {5, "tmle score"},             {6, "dcar root-n rate"},
                                         {7, "desk ordering (dgp1)"},   {8, "desk coverage (dgp2)"},
                                         {9, "remainder"},              {10, "reproducibility"}};
  std::map<int, Verdict> results;
  for (const auto& [id, fn] : criteria) {
    if (!only.empty() && !only.count(id)) continue;
    progress("criterion " + std::to_string(id) + ": " + names.at(id));
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("error: ") + e.what();
    }
    v.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    progress("criterion " + std::to_string(id) + (v.pass ? " PASS " : " FAIL ") + v.detail);
    results[id] = v;
  }

  bool all = true;
  for (const auto& [id, v] : results) {
    std::printf("criterion %2d %-24s %s  %s [%.1f s]\n", id, names.at(id).c_str(), v.pass ? "PASS" : "FAIL",
                v.detail.c_str(), v.seconds);
    all = all && v.pass;
  }
  std::fflush(stdout);
  return all ? 0 : 1;
}
