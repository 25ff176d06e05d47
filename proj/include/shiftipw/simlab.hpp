#pragma once

#include <functional>
#include <string>
#include <vector>

#include "shiftipw/estimators.hpp"
#include "shiftipw/haldensify.hpp"
#include "shiftipw/selectors.hpp"

namespace shiftipw::simlab {

using datacore::Dataset;
using datacore::RowMatrix;

enum class DgpKind { poisson, negbinom };
const char* to_string(DgpKind kind);
DgpKind dgp_from_string(const std::string& name);

// W1 ~ Bern(0.6), W2 ~ U(0.5, 1.5), W3 ~ Pois(2); A | W is Poisson or
// negative binomial around the same mean; Y | A, W is Bernoulli.
struct DgpSpec {
  DgpKind kind = DgpKind::poisson;
  double delta = 1.0;

  double treatment_mean(std::span<const double> w) const;
  double dispersion(std::span<const double> w) const;  // negbinom only
  double pmf(double a, std::span<const double> w) const;  // 0 off the integers
  double outcome_mean(double a, std::span<const double> w) const;
};

Dataset draw(const DgpSpec& spec, std::size_t n, std::uint64_t seed);

class TrueDensity final : public haldensify::SampleDensity {
 public:
  TrueDensity(const DgpSpec& spec, const RowMatrix& w) : spec_(spec), w_(w) {}
  std::size_t size() const override { return static_cast<std::size_t>(w_.rows()); }
  double operator()(std::size_t i, double a) const override;

 private:
  DgpSpec spec_;
  const RowMatrix& w_;
};

class TrueOutcome final : public estimators::OutcomeModel {
 public:
  explicit TrueOutcome(const DgpSpec& spec) : spec_(spec) {}
  std::vector<double> predict(std::span<const double> a, const RowMatrix& w) const override;

 private:
  DgpSpec spec_;
};

inline constexpr std::size_t kTruthSize = 1000000;
inline constexpr std::uint64_t kTruthSeed = 20210601;

// Direct estimator with the known outcome mean on one large draw; cached.
double true_psi(const DgpSpec& spec, double delta, std::size_t n = kTruthSize,
                std::uint64_t seed = kTruthSeed);

// D*(O; P0) on a fresh draw of size n, with the unbounded additive shift.
std::vector<double> true_eif_sample(const DgpSpec& spec, double delta, std::size_t n,
                                    std::uint64_t seed);
double efficiency_bound(const DgpSpec& spec, double delta, std::size_t n = kTruthSize,
                        std::uint64_t seed = kTruthSeed + 1);

// Q(a, W_i) for unit i at any treatment value.
using UnitOutcome = std::function<double(std::size_t, double)>;

// Empirical remainder approximation: the integral over the treatment is a sum
// over the integers 0..max(A)+10 against g-tilde, with the fitted density
// renormalized on that grid.
double r2_tilde(const Dataset& data, const haldensify::SampleDensity& g, const UnitOutcome& q_hat,
                const DgpSpec& spec, const mtp::ResolvedRegime& regime);

struct ExperimentConfig {
  DgpSpec dgp;
  std::vector<std::size_t> n_list{100, 200, 500};
  std::size_t reps = 100;
  std::uint64_t seed = 1;
  std::vector<selectors::SelectorKind> selectors = selectors::all_selectors();
  bool doubly_robust = true;  // TMLE with {global-cv, dcar-min} x {hal, glm}
  haldensify::FamilyConfig density;
  // One unit-width bin per treatment count (density.bins is then ignored).
  bool integer_bins = true;
  hal::HalConfig outcome;
  selectors::PlateauParams plateau;
  std::size_t truth_size = kTruthSize;
  int threads = 1;

  // 100 reps, 200-point density grid.
  static ExperimentConfig desk(DgpKind kind);
  // 300 reps, 3000-point density grid.
  static ExperimentConfig full(DgpKind kind);
  std::string echo() const;  // canonical text used for the config hash
};

struct ReplicateRecord {
  std::size_t n = 0;
  std::size_t rep_id = 0;
  std::string estimator;  // ipw, tmle-hal, tmle-glm
  std::string selector;
  double psi_hat = 0.0;
  double se_hat = 0.0;   // the estimator's own se
  double se_eif = 0.0;
  double pn_eif = 0.0;
  double r2_tilde = 0.0;
  std::size_t lambda_index = 0;
  bool fallback = false;
};

struct ReplicateFailure {
  std::size_t n = 0;
  std::size_t rep_id = 0;
  std::string message;
};

struct MetricRow {
  std::string dgp;
  std::size_t n = 0;
  std::string estimator, selector;
  double scaled_bias = 0.0;
  double rel_scaled_mse = 0.0;
  double abs_pn_eif = 0.0;
  double oracle_cov = 0.0;
  double wald_cov = 0.0;
  double r2_trimmed = 0.0;
};

struct SimResult {
  std::string dgp;
  double delta = 0.0;
  double psi0 = 0.0;
  double bound = 0.0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<ReplicateRecord> records;  // sorted by (n, rep_id), then estimator order
  std::vector<ReplicateFailure> failures;
};

// One replicate: every configured estimator/selector pair on one dataset.
std::vector<ReplicateRecord> run_replicate(const ExperimentConfig& cfg, const Dataset& data,
                                           std::size_t rep_id);

SimResult run_experiment(const ExperimentConfig& cfg);

// Aggregates per (n, estimator, selector) in first-appearance order.
std::vector<MetricRow> metric_table(const SimResult& result);

// Mean after dropping floor(frac * m) values from each end.
double trimmed_mean(std::vector<double> values, double frac = 0.05);

void write_records_csv(const SimResult& result, const std::string& path);
void write_metrics_csv(const SimResult& result, const std::vector<MetricRow>& rows,
                       const std::string& path);

}  // namespace shiftipw::simlab
