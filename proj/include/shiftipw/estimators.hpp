#pragma once

#include <optional>
#include <string>
#include <vector>

#include "shiftipw/datacore.hpp"
#include "shiftipw/hal.hpp"
#include "shiftipw/mtp.hpp"

namespace shiftipw::estimators {

using datacore::Dataset;
using datacore::RowMatrix;
using haldensify::SampleDensity;
using mtp::ResolvedRegime;

// Q(a, w) = E[Y | A = a, W = w] on the [0,1] outcome scale.
class OutcomeModel {
 public:
  virtual ~OutcomeModel() = default;
  virtual std::vector<double> predict(std::span<const double> a, const RowMatrix& w) const = 0;
};

enum class OutcomeMethod { hal, glm };
const char* to_string(OutcomeMethod method);
OutcomeMethod outcome_method_from_string(const std::string& name);

class OutcomeFit final : public OutcomeModel {
 public:
  OutcomeMethod method() const { return method_; }
  std::vector<double> predict(std::span<const double> a, const RowMatrix& w) const override;
  const std::optional<datacore::OutcomeBounds>& bounds() const { return bounds_; }
  const hal::HalFit& hal_fit() const { return hal_; }
  const Eigen::VectorXd& glm_coefficients() const { return glm_; }

 private:
  friend OutcomeFit fit_outcome_regression(const Dataset&, OutcomeMethod, const hal::HalConfig&);
  OutcomeMethod method_ = OutcomeMethod::glm;
  hal::HalFit hal_;
  Eigen::VectorXd glm_;  // intercept, A, W_1..W_d
  std::optional<datacore::OutcomeBounds> bounds_;
};

// Outcomes must already lie in [0,1] (see Dataset::with_bounded_outcome).
OutcomeFit fit_outcome_regression(const Dataset& data, OutcomeMethod method,
                                  const hal::HalConfig& cfg = {});

// Logistic regression of y in [0,1] on [1, x] by Newton's method.
Eigen::VectorXd logistic_glm(const Eigen::MatrixXd& x, std::span<const double> y);

// Outcome predictions at observed and shifted treatments.
struct OutcomeValues {
  std::vector<double> q_obs, q_shift;
};
OutcomeValues outcome_values(const Dataset& data, const OutcomeModel& q, const ResolvedRegime& r);

// Density-dependent quantities: H at the observed and at the shifted treatment.
struct DensityValues {
  mtp::ShiftWeights weights;
  std::vector<double> h_shift;
};
DensityValues density_values(const Dataset& data, const SampleDensity& g, const ResolvedRegime& r);

struct NuisanceValues {
  std::vector<double> y, q_obs, q_shift, h, h_shift;
  double mean_h = 0.0;
};
NuisanceValues combine(const Dataset& data, const OutcomeValues& q, const DensityValues& g);

enum class EstimatorKind { sub, ipw, ipw_stab, onestep, tmle };
const char* to_string(EstimatorKind kind);

struct EstimateReport {
  EstimatorKind kind = EstimatorKind::sub;
  double psi = 0.0;
  double se = 0.0;       // the estimator's own standard error
  double se_eif = 0.0;   // sqrt(var(D*) / n)
  double pn_eif = 0.0;
  double pn_dcar = 0.0;
  std::size_t lambda_index = 0;
  double l1_norm = 0.0;
};

double substitution(std::span<const double> q_shift);
double ipw(std::span<const double> h, std::span<const double> y, bool stabilized);

std::vector<double> eif(const NuisanceValues& nv, double psi);
// Sign as derived for the stabilized estimating function; selectors use |mean|.
std::vector<double> dcar_tilde(const NuisanceValues& nv, double psi);

double se_ipw(std::span<const double> h, std::span<const double> y, double psi);
double se_eif(std::span<const double> d);

EstimateReport substitution_report(const NuisanceValues& nv);
EstimateReport ipw_report(const NuisanceValues& nv, bool stabilized);
EstimateReport onestep(const NuisanceValues& nv);

struct TmleResult {
  EstimateReport report;
  double epsilon = 0.0;
  int iterations = 0;
  std::vector<double> q_obs_star, q_shift_star;
};
TmleResult tmle(const NuisanceValues& nv);

// expit(logit q + epsilon * h) with q clamped away from 0 and 1.
double tilt(double q, double epsilon, double h);

}  // namespace shiftipw::estimators
