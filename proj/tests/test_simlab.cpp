#include <doctest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "shiftipw/simlab.hpp"
#include "support.hpp"

using namespace shiftipw;
using namespace shiftipw::simlab;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.n_list = {80};
  c.reps = 3;
  c.seed = 5;
  c.density.n_lambda = 12;
  c.density.lambda_min_ratio = 1e-2;
  c.density.folds = 3;
  c.density.basis.knots_per_covariate = 5;
  c.outcome.n_lambda = 10;
  c.outcome.lambda_min_ratio = 1e-2;
  c.outcome.folds = 3;
  c.outcome.basis.knots_per_covariate = 5;
  c.truth_size = 20000;
  return c;
}

}  // namespace

TEST_SUITE("simlab") {

TEST_CASE("dgp names") {
  CHECK(dgp_from_string("poisson") == DgpKind::poisson);
  CHECK(dgp_from_string("dgp2") == DgpKind::negbinom);
  CHECK(std::string(to_string(DgpKind::negbinom)) == "negbinom");
  CHECK_THROWS_AS(dgp_from_string("gamma"), Error);
}

TEST_CASE("treatment mean matches its closed form") {
  // E[(1-W1) + W2^3/4 + 2 W1 W2] + 4 with E[W2^3] = (1.5^4 - 0.5^4) / 4
  const double expect = 0.4 + 0.25 * (std::pow(1.5, 4) - std::pow(0.5, 4)) / 4 + 2 * 0.6 * 1.0 + 4;
  const auto d = draw({}, 1000000, 99);
  const auto& a = d.treatment();
  CHECK(std::abs(mean(a) - expect) <= 3 * std::sqrt(sample_variance(a) / a.size()));
  CHECK(std::abs(d.covariates().col(0).mean() - 0.6) < 0.005);
}

TEST_CASE("negative binomial treatment is overdispersed") {
  const auto d = draw({DgpKind::negbinom, 1.0}, 100000, 3);
  CHECK(sample_variance(d.treatment()) > mean(d.treatment()));
}

TEST_CASE("draws are deterministic in the seed") {
  const auto a = draw({}, 50, 11), b = draw({}, 50, 11), c = draw({}, 50, 12);
  CHECK(a.treatment() == b.treatment());
  CHECK(a.outcome() == b.outcome());
  CHECK(a.covariates() == b.covariates());
  CHECK(a.treatment() != c.treatment());
}

TEST_CASE("pmf sums to one and vanishes off the integers") {
  for (auto kind : {DgpKind::poisson, DgpKind::negbinom}) {
    const DgpSpec s{kind, 1.0};
    const std::vector<double> w{1.0, 1.2, 3.0};
    double total = 0.0;
    for (int a = 0; a < 200; ++a) total += s.pmf(a, w);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s.pmf(2.5, w) == 0.0);
    CHECK(s.pmf(-1.0, w) == 0.0);
  }
}

TEST_CASE("truth is repeatable and increases with the shift") {
  const DgpSpec s;
  const double p1 = true_psi(s, 1.0, kTruthSize, 1), p2 = true_psi(s, 1.0, kTruthSize, 2);
  CHECK(std::abs(p1 - p2) <= 0.001);
  const double lo = true_psi(s, 0.0, 100000, 5), mid = true_psi(s, 1.0, 100000, 5), hi = true_psi(s, 2.0, 100000, 5);
  CHECK(lo < mid);
  CHECK(mid < hi);
  // delta = 0 estimates E[Y]
  const auto d = draw(s, 200000, 8);
  CHECK(std::abs(lo - mean(d.outcome())) < 0.005);
}

TEST_CASE("efficiency bound") {
  const DgpSpec s;
  const auto d = true_eif_sample(s, 1.0, 200000, 44);
  const double sd = std::sqrt(sample_variance(d));
  CHECK(std::abs(mean(d)) <= 3 * sd / std::sqrt(static_cast<double>(d.size())));
  CHECK(efficiency_bound(s, 1.0, 200000, 45) > 0.0);
  // D* = Y - psi at delta = 0
  const double p = true_psi(s, 0.0, 200000, 46);
  CHECK(std::abs(efficiency_bound(s, 0.0, 200000, 46) - p * (1 - p)) < 0.005);
}

TEST_CASE("remainder is exactly zero at the true outcome regression") {
  for (auto kind : {DgpKind::poisson, DgpKind::negbinom}) {
    const DgpSpec s{kind, 1.0};
    const auto d = draw(s, 150, 4);
    const mtp::ResolvedRegime r{mtp::ShiftKind::additive, 1.0, std::numeric_limits<double>::infinity()};
    // any density estimate will do; perturb the truth
    class Tilted final : public haldensify::SampleDensity {
     public:
      Tilted(const DgpSpec& s, const RowMatrix& w) : t_(s, w) {}
      std::size_t size() const override { return t_.size(); }
      double operator()(std::size_t i, double a) const override { return t_(i, a) * (1 + 0.3 * std::sin(a)); }

     private:
      TrueDensity t_;
    } g(s, d.covariates());
    const UnitOutcome q0 = [&](std::size_t i, double a) { return s.outcome_mean(a, d.covariate_row(i)); };
    CHECK(r2_tilde(d, g, q0, s, r) == 0.0);
    // perturbed regression with the true density gives a small value
    const UnitOutcome q1 = [&](std::size_t i, double a) { return std::min(0.999, s.outcome_mean(a, d.covariate_row(i)) + 0.05); };
    const TrueDensity g0(s, d.covariates());
    CHECK(std::abs(r2_tilde(d, g0, q1, s, r)) < 0.05);
  }
}

TEST_CASE("remainder on an enumerated discrete toy") {
  // Two covariate values, treatment in {0, 1, 2}, unbounded shift by one.  The
  // sample holds every (w, a) cell in exact proportion to g0, so the empirical
  // mean is the population double sum.
  const DgpSpec s;
  const double g0[2][3] = {{0.5, 0.3, 0.2}, {0.2, 0.3, 0.5}};
  const double gh[2][3] = {{0.4, 0.35, 0.25}, {0.25, 0.3, 0.45}};
  const int copies = 100;
  std::vector<double> a;
  RowMatrix w(0, 3);
  std::vector<std::pair<int, int>> cell;
  for (int wi = 0; wi < 2; ++wi)
    for (int av = 0; av < 3; ++av)
      for (int c = 0; c < static_cast<int>(std::lround(copies * g0[wi][av])); ++c) cell.push_back({wi, av});
  w.resize(static_cast<Eigen::Index>(cell.size()), 3);
  for (std::size_t i = 0; i < cell.size(); ++i) {
    w.row(static_cast<Eigen::Index>(i)) << cell[i].first, 1.0, 2.0;
    a.push_back(cell[i].second);
  }
  const datacore::Dataset d(w, a, std::vector<double>(a.size(), 0.0), {"W1", "W2", "W3"});
  class Table final : public haldensify::SampleDensity {
   public:
    Table(const RowMatrix& w, const double (&g)[2][3]) : w_(w), g_(g) {}
    std::size_t size() const override { return static_cast<std::size_t>(w_.rows()); }
    double operator()(std::size_t i, double av) const override {
      if (av < 0 || av > 2) return 0.0;
      return g_[static_cast<int>(w_(static_cast<Eigen::Index>(i), 0))][static_cast<int>(av)];
    }

   private:
    const RowMatrix& w_;
    const double (&g_)[2][3];
  } ghat(w, gh);
  const mtp::ResolvedRegime r{mtp::ShiftKind::additive, 1.0, std::numeric_limits<double>::infinity()};
  // Qhat = Q0 + 0.1 everywhere
  const UnitOutcome qh = [&](std::size_t i, double av) { return s.outcome_mean(av, d.covariate_row(i)) + 0.1; };
  const double got = r2_tilde(d, ghat, qh, s, r);
  // brute force: E_w [ sum_a 0.1 ghat~(a|w) / ghat(a|w) g0(a|w) - sum_a 0.1 ghat~(a|w) ]
  double brute = 0.0;
  for (int wi = 0; wi < 2; ++wi) {
    double first = 0.0, second = 0.0;
    for (int av = 0; av <= 12; ++av) {
      const double gt = (av >= 1 && av - 1 <= 2) ? gh[wi][av - 1] : 0.0;
      const double gv = av <= 2 ? gh[wi][av] : 0.0;
      if (av <= 2) first += 0.1 * gt / gv * g0[wi][av];
      second += 0.1 * gt;
    }
    brute += 0.5 * (first - second);
  }
  CHECK(got == doctest::Approx(brute).epsilon(1e-12));
  CHECK((got > 0) == (brute > 0));
}

TEST_CASE("trimmed mean") {
  std::vector<double> v;
  for (int k = 1; k <= 20; ++k) v.push_back(k);
  v[0] = -1000;
  v[19] = 1000;
  // floor(0.05 * 20) = 1 from each end
  CHECK(trimmed_mean(v) == doctest::Approx(10.5));
  CHECK(trimmed_mean({1.0, 2.0, 3.0}) == doctest::Approx(2.0));
}

TEST_CASE("metric arithmetic on hand-built records") {
  SimResult res;
  res.dgp = "poisson";
  res.psi0 = 0.5;
  res.bound = 0.2;
  const std::size_t n = 100;
  ReplicateRecord r;
  r.n = n;
  r.estimator = "ipw";
  r.selector = "global-cv";
  r.psi_hat = 0.5 + 1.0 / std::sqrt(100.0);
  r.se_hat = std::sqrt(res.bound / n);
  r.se_eif = r.se_hat;
  r.pn_eif = -0.25;
  r.r2_tilde = 0.125;
  res.records = {r};
  const auto rows = metric_table(res);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].scaled_bias == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(rows[0].rel_scaled_mse == doctest::Approx(1.0 + 1.0 / res.bound).epsilon(1e-12));
  CHECK(rows[0].abs_pn_eif == 0.25);
  CHECK(rows[0].r2_trimmed == 0.125);

  // each aggregate against a one-line reduction over several records
  std::mt19937_64 rng(2);
  res.records.clear();
  for (int k = 0; k < 40; ++k) {
    r.psi_hat = 0.5 + std::normal_distribution<double>(0, 0.05)(rng);
    r.se_hat = 0.04 + 0.001 * k;
    r.se_eif = 0.03 + 0.001 * k;
    r.pn_eif = std::normal_distribution<double>(0, 0.01)(rng);
    r.r2_tilde = k;
    res.records.push_back(r);
  }
  const auto m = metric_table(res)[0];
  std::vector<double> psi;
  double b = 0, se2 = 0, pn = 0, wald = 0;
  for (const auto& x : res.records) {
    psi.push_back(x.psi_hat);
    b += 10 * (0.5 - x.psi_hat) / 40;
    se2 += x.se_hat * x.se_hat / 40;
    pn += std::abs(x.pn_eif) / 40;
    wald += (std::abs(x.psi_hat - 0.5) <= 1.959963984540054 * x.se_eif) / 40.0;
  }
  double oracle = 0;
  for (double p : psi) oracle += (std::abs(p - 0.5) <= 1.959963984540054 * std::sqrt(sample_variance(psi))) / 40.0;
  const double mb = 0.5 - mean(psi);
  CHECK(m.scaled_bias == doctest::Approx(b).epsilon(1e-12));
  CHECK(m.rel_scaled_mse == doctest::Approx(100 * (mb * mb + se2) / 0.2).epsilon(1e-12));
  CHECK(m.abs_pn_eif == doctest::Approx(pn).epsilon(1e-12));
  CHECK(m.wald_cov == doctest::Approx(wald));
  CHECK(m.oracle_cov == doctest::Approx(oracle));
  CHECK(m.r2_trimmed == doctest::Approx(19.5));  // 2 dropped from each end
}

TEST_CASE("oracle coverage of a Gaussian estimator is nominal") {
  SimResult res;
  res.dgp = "poisson";
  res.psi0 = 0.3;
  res.bound = 1.0;
  std::mt19937_64 rng(123);
  for (int k = 0; k < 1000; ++k) {
    ReplicateRecord r;
    r.n = 100;
    r.rep_id = k;
    r.estimator = "ipw";
    r.selector = "global-cv";
    r.psi_hat = 0.3 + std::normal_distribution<double>(0, 0.1)(rng);
    r.se_hat = r.se_eif = 0.1;
    res.records.push_back(r);
  }
  const auto m = metric_table(res)[0];
  CHECK(std::abs(m.oracle_cov - 0.95) <= 0.03);
  CHECK(std::abs(m.wald_cov - 0.95) <= 0.03);
}

TEST_CASE("trace construction") {
  const DgpSpec s;
  const auto d = draw(s, 150, 21);
  haldensify::FamilyConfig fc;
  fc.bins = 6;
  fc.n_lambda = 10;
  fc.lambda_min_ratio = 1e-2;
  fc.folds = 3;
  fc.basis.knots_per_covariate = 5;
  const auto fam = haldensify::build_family(d, fc);
  const auto q = estimators::fit_outcome_regression(d, estimators::OutcomeMethod::glm);

  const mtp::ResolvedRegime id{mtp::ShiftKind::additive, 0.0, 1e9};
  const auto t0 = selectors::build_trace(d, fam, id, estimators::outcome_values(d, q, id));
  REQUIRE(t0.size() == fam.size());
  for (std::size_t k = 0; k < t0.size(); ++k) {
    CHECK(t0.records[k].lambda == fam.lambda_grid()[k]);
    CHECK(std::abs(t0.records[k].psi - mean(d.outcome())) <= 1e-12);
    CHECK(t0.records[k].abs_pn_dcar == 0.0);
  }
  const mtp::ResolvedRegime r{mtp::ShiftKind::additive, 1.0, 1e9};
  const auto t1 = selectors::build_trace(d, fam, r, estimators::outcome_values(d, q, r));
  CHECK(t1.sigma_cv == t1.records[0].se_eif);
  CHECK(t1.n == d.size());

  fc.undersmooth = 1;
  const auto one = haldensify::build_family(d, fc);
  CHECK(selectors::build_trace(d, one, r, estimators::outcome_values(d, q, r)).size() == 1);
}

TEST_CASE("experiments are reproducible and write tidy CSVs") {
  const auto cfg = tiny_config();
  const auto a = run_experiment(cfg);
  const auto b = run_experiment(cfg);
  CHECK(a.failures.empty());
  CHECK(a.records.size() == cfg.reps * (cfg.selectors.size() + 4));
  const auto p1 = testsupport::temp_path("rec1.csv"), p2 = testsupport::temp_path("rec2.csv");
  const auto m1 = testsupport::temp_path("met1.csv"), m2 = testsupport::temp_path("met2.csv");
  write_records_csv(a, p1);
  write_records_csv(b, p2);
  write_metrics_csv(a, metric_table(a), m1);
  write_metrics_csv(b, metric_table(b), m2);
  CHECK(slurp(p1) == slurp(p2));
  CHECK(slurp(m1) == slurp(m2));
  const auto text = slurp(m1);
  CHECK(text.rfind("# shiftipw", 0) == 0);
  CHECK(text.find("dgp,n,estimator,selector,scaled_bias,rel_scaled_mse,abs_pn_eif,oracle_cov,wald_cov,r2_trimmed") !=
        std::string::npos);
  for (const auto& r : a.records)
    if (r.estimator != "ipw") CHECK(std::abs(r.pn_eif) <= 1e-4);

  auto other = cfg;
  other.seed = 6;
  CHECK(run_experiment(other).records[0].psi_hat != a.records[0].psi_hat);
}

}
