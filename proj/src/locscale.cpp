#include <algorithm>
#include <cmath>

#include "shiftipw/haldensify.hpp"

namespace shiftipw::haldensify {

namespace {

constexpr double kVarianceFloor = 1e-6;

Eigen::VectorXd ols(const RowMatrix& w, std::span<const double> y) {
  const auto n = w.rows();
  Eigen::MatrixXd x(n, w.cols() + 1);
  x.col(0).setOnes();
  x.rightCols(w.cols()) = w;
  const Eigen::Map<const Eigen::VectorXd> yv(y.data(), n);
  return x.colPivHouseholderQr().solve(yv);
}

}  // namespace

double LocScaleDensity::Learner::predict(std::span<const double> w) const {
  if (kind == MeanLearner::hal) {
    RowMatrix row(1, static_cast<Eigen::Index>(w.size()));
    for (std::size_t j = 0; j < w.size(); ++j) row(0, static_cast<Eigen::Index>(j)) = w[j];
    return hal.predict(row, hal::Scale::response)[0];
  }
  double v = coef[0];
  for (std::size_t j = 0; j < w.size(); ++j) v += coef[static_cast<Eigen::Index>(j) + 1] * w[j];
  return v;
}

double LocScaleDensity::mean(std::span<const double> w) const { return mean_.predict(w); }

double LocScaleDensity::sd(std::span<const double> w) const {
  if (mode_ == VarianceMode::homoscedastic) return std::sqrt(sigma2_);
  return std::sqrt(std::max(var_.predict(w), kVarianceFloor));
}

double LocScaleDensity::residual_density(double z) const {
  // Gaussian kernel; residuals are sorted so only those within 8 bandwidths count.
  const double h = bandwidth_;
  const auto lo = std::lower_bound(residuals_.begin(), residuals_.end(), z - 8 * h);
  const auto hi = std::upper_bound(residuals_.begin(), residuals_.end(), z + 8 * h);
  double s = 0.0;
  for (auto it = lo; it != hi; ++it) {
    const double u = (z - *it) / h;
    s += std::exp(-0.5 * u * u);
  }
  return s / (static_cast<double>(residuals_.size()) * h * std::sqrt(2 * M_PI));
}

double LocScaleDensity::operator()(double a, std::span<const double> w) const {
  const double s = sd(w);
  return residual_density((a - mean(w)) / s) / s;
}

LocScaleDensity fit_locscale(const Dataset& data, const LocScaleConfig& cfg) {
  LocScaleDensity out;
  out.mode_ = cfg.variance;
  const std::size_t n = data.size();
  if (n < 3) throw Error(ErrorKind::empty_input, "location-scale fit needs at least 3 units");
  const auto& a = data.treatment();
  const auto& w = data.covariates();
  const bool use_hal = cfg.mean == MeanLearner::hal && data.dim() > 0;

  auto fit = [&](std::span<const double> y) {
    LocScaleDensity::Learner l;
    if (use_hal) {
      l.kind = MeanLearner::hal;
      l.hal = hal::fit_hal_cv(w, y, hal::Loss::squared_error, cfg.hal);
    } else {
      l.kind = MeanLearner::glm;
      l.coef = ols(w, y);
    }
    return l;
  };
  auto predict_all = [&](const LocScaleDensity::Learner& l) {
    if (l.kind == MeanLearner::hal) return l.hal.predict(w, hal::Scale::response);
    std::vector<double> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = l.predict(data.covariate_row(i));
    return p;
  };

  out.mean_ = fit(a);
  const auto mu = predict_all(out.mean_);
  std::vector<double> resid(n), sq(n);
  for (std::size_t i = 0; i < n; ++i) {
    resid[i] = a[i] - mu[i];
    sq[i] = resid[i] * resid[i];
  }

  std::vector<double> sd(n);
  if (cfg.variance == VarianceMode::homoscedastic) {
    out.sigma2_ = mean(sq);
    if (out.sigma2_ < kVarianceFloor) {
      out.sigma2_ = kVarianceFloor;
      out.warnings_.push_back("residual variance floored at 1e-6");
    }
    std::fill(sd.begin(), sd.end(), std::sqrt(out.sigma2_));
  } else {
    out.var_ = fit(sq);
    const auto v = predict_all(out.var_);
    std::size_t floored = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (v[i] < kVarianceFloor) ++floored;
      sd[i] = std::sqrt(std::max(v[i], kVarianceFloor));
    }
    if (floored > 0)
      out.warnings_.push_back("conditional variance floored at 1e-6 for " + std::to_string(floored) +
                              " units");
  }

  out.residuals_.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.residuals_[i] = resid[i] / sd[i];
  std::sort(out.residuals_.begin(), out.residuals_.end());
  if (cfg.bandwidth > 0) {
    out.bandwidth_ = cfg.bandwidth;
  } else {
    const double s = std::sqrt(sample_variance(out.residuals_));
    const double iqr = sorted_quantile(out.residuals_, 0.75) - sorted_quantile(out.residuals_, 0.25);
    double spread = std::min(s, iqr / 1.34);
    if (!(spread > 0)) spread = s > 0 ? s : 1.0;
    out.bandwidth_ = 0.9 * spread * std::pow(static_cast<double>(n), -0.2);
  }
  return out;
}

}  // namespace shiftipw::haldensify
