#pragma once

#include <string>
#include <vector>

#include "shiftipw/datacore.hpp"
#include "shiftipw/hal.hpp"

namespace shiftipw::haldensify {

using datacore::Dataset;
using datacore::RowMatrix;

// g(a | W_i) for a fixed sample of covariate rows.  Implemented by the binned
// family, the location-scale fit and the simulation truth.
class SampleDensity {
 public:
  virtual ~SampleDensity() = default;
  virtual std::size_t size() const = 0;
  virtual double operator()(std::size_t i, double a) const = 0;
};

enum class BinType { equal_range, equal_mass };
const char* to_string(BinType type);
BinType bin_type_from_string(const std::string& name);

struct BinningScheme {
  std::vector<double> cutpoints;  // T + 1 strictly increasing edges
  BinType type = BinType::equal_range;

  int bins() const { return static_cast<int>(cutpoints.size()) - 1; }
  // 0-based bin holding a: [c_t, c_{t+1}) with the last bin closed; -1 outside.
  int bin_of(double a) const;
  double width(int t) const { return cutpoints[t + 1] - cutpoints[t]; }
  double midpoint(int t) const { return 0.5 * (cutpoints[t] + cutpoints[t + 1]); }
};

BinningScheme make_bins(std::span<const double> treatment, int bins, BinType type);

// max(5, round(n^(1/3))).
int default_bin_count(std::size_t n);

// One record per (unit, bin at risk).  Column 0 of covariates is the 1-based
// bin index, followed by W.
struct HazardExpansion {
  RowMatrix covariates;
  std::vector<double> indicator;
  std::vector<std::size_t> unit_id;
  std::vector<int> bin_index;
};

HazardExpansion expand_repeated_measures(const Dataset& data, const BinningScheme& bins);

struct HazardModel {
  hal::BasisSet bases;
  hal::LassoPath path;
};

HazardModel fit_pooled_hazard(const HazardExpansion& expansion, const hal::LambdaGrid& grid,
                              const hal::BasisConfig& basis = {},
                              const hal::SolverOptions& solver = {});

// P(bin t | w) for every row of w: rows x T.  The last bin's hazard is 1, so
// each row sums to one.
Eigen::MatrixXd bin_probabilities(const HazardModel& model, std::size_t k, const BinningScheme& bins,
                                  const RowMatrix& w);

// Piecewise-constant density from a table of bin probabilities.
class BinnedDensity final : public SampleDensity {
 public:
  BinnedDensity(BinningScheme bins, Eigen::MatrixXd probs)
      : bins_(std::move(bins)), probs_(std::move(probs)) {}
  std::size_t size() const override { return static_cast<std::size_t>(probs_.rows()); }
  double operator()(std::size_t i, double a) const override;
  const Eigen::MatrixXd& probabilities() const { return probs_; }
  const BinningScheme& bins() const { return bins_; }

 private:
  BinningScheme bins_;
  Eigen::MatrixXd probs_;
};

struct DensityCvResult {
  std::vector<double> risk;
  std::size_t selected = 0;
  std::vector<std::string> warnings;
};

inline constexpr double kLogLossFloor = 1e-10;

// Held-out mean of -log g(A_i | W_i) per lambda with folds split by unit.
DensityCvResult cv_density_risk(const Dataset& data, const BinningScheme& bins,
                                const datacore::FoldAssignment& folds,
                                const std::vector<double>& lambdas,
                                const hal::BasisConfig& basis = {},
                                const hal::SolverOptions& solver = {}, int threads = 1);

struct FamilyConfig {
  int bins = 0;  // 0 picks default_bin_count(n)
  BinType bin_type = BinType::equal_range;
  int folds = 5;
  std::size_t n_lambda = 3000;
  double lambda_min_ratio = 1e-4;
  std::vector<double> lambdas;  // explicit grid overrides n_lambda/min ratio
  std::size_t undersmooth = 0;  // family size K; 0 keeps every lambda from lambda_CV down
  hal::BasisConfig basis;
  hal::SolverOptions solver;
  std::uint64_t seed = 1;
  int threads = 1;
};

struct CondDensityFamily {
  BinningScheme bins;
  HazardModel hazard;               // path restricted to the family, entry 0 at lambda_CV
  std::vector<double> full_grid;    // grid used for cross-validation
  std::vector<double> cv_risk;      // over full_grid
  std::size_t cv_index = 0;         // position of lambda_CV in full_grid
  std::vector<std::string> warnings;

  std::size_t size() const { return hazard.path.size(); }
  const std::vector<double>& lambda_grid() const { return hazard.path.lambdas; }
  double l1_norm(std::size_t k) const { return hal::l1_norm(hazard.path, k); }
  BinnedDensity density(std::size_t k, const RowMatrix& w) const;
};

CondDensityFamily build_family(const Dataset& data, const FamilyConfig& cfg);

double density_at(const CondDensityFamily& family, std::size_t k, double a,
                  std::span<const double> w);

// Evaluates every family member on one covariate sample, sharing the design.
class FamilyTable {
 public:
  FamilyTable(const CondDensityFamily& family, const RowMatrix& w);
  std::size_t size() const { return family_.size(); }
  BinnedDensity density(std::size_t k) const;

 private:
  const CondDensityFamily& family_;
  std::size_t rows_;
  hal::BinaryDesign design_;
};

// Location-scale alternative: g(a|w) = rho((a - mu(w)) / sigma(w)) / sigma(w).
enum class MeanLearner { hal, glm };
enum class VarianceMode { homoscedastic, conditional };

struct LocScaleConfig {
  MeanLearner mean = MeanLearner::glm;
  VarianceMode variance = VarianceMode::homoscedastic;
  double bandwidth = 0.0;  // <= 0 uses Silverman's rule on standardized residuals
  hal::HalConfig hal;
};

class LocScaleDensity {
 public:
  double mean(std::span<const double> w) const;
  double sd(std::span<const double> w) const;
  double operator()(double a, std::span<const double> w) const;
  double residual_density(double z) const;
  const std::vector<std::string>& warnings() const { return warnings_; }

 private:
  friend LocScaleDensity fit_locscale(const Dataset&, const LocScaleConfig&);
  struct Learner {
    MeanLearner kind = MeanLearner::glm;
    Eigen::VectorXd coef;  // glm: intercept then slopes
    hal::HalFit hal;
    double predict(std::span<const double> w) const;
  };
  Learner mean_, var_;
  VarianceMode mode_ = VarianceMode::homoscedastic;
  double sigma2_ = 1.0;
  std::vector<double> residuals_;  // standardized, sorted
  double bandwidth_ = 1.0;
  std::vector<std::string> warnings_;
};

LocScaleDensity fit_locscale(const Dataset& data, const LocScaleConfig& cfg);

// Adapter evaluating a location-scale fit on a fixed sample.
class LocScaleSample final : public SampleDensity {
 public:
  LocScaleSample(const LocScaleDensity& fit, const RowMatrix& w) : fit_(fit), w_(w) {}
  std::size_t size() const override { return static_cast<std::size_t>(w_.rows()); }
  double operator()(std::size_t i, double a) const override {
    return fit_(a, {w_.data() + i * static_cast<std::size_t>(w_.cols()),
                    static_cast<std::size_t>(w_.cols())});
  }

 private:
  const LocScaleDensity& fit_;
  const RowMatrix& w_;
};

}  // namespace shiftipw::haldensify
