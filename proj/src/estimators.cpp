#include "shiftipw/estimators.hpp"

#include <cmath>

namespace shiftipw::estimators {

const char* to_string(OutcomeMethod method) { return method == OutcomeMethod::hal ? "hal" : "glm"; }

OutcomeMethod outcome_method_from_string(const std::string& name) {
  if (name == "hal") return OutcomeMethod::hal;
  if (name == "glm") return OutcomeMethod::glm;
  throw Error(ErrorKind::invalid_config, "unknown outcome method '" + name + "'");
}

const char* to_string(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::sub: return "sub";
    case EstimatorKind::ipw: return "ipw";
    case EstimatorKind::ipw_stab: return "ipw_stab";
    case EstimatorKind::onestep: return "onestep";
    case EstimatorKind::tmle: return "tmle";
  }
  return "unknown";
}

namespace {

RowMatrix outcome_inputs(std::span<const double> a, const RowMatrix& w) {
  RowMatrix x(w.rows(), w.cols() + 1);
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    x(i, 0) = a[static_cast<std::size_t>(i)];
    x.row(i).tail(w.cols()) = w.row(i);
  }
  return x;
}

constexpr double kClamp = 1e-12;

}  // namespace

double tilt(double q, double epsilon, double h) {
  const double qc = std::clamp(q, kClamp, 1.0 - kClamp);
  return expit(logit(qc) + epsilon * h);
}

Eigen::VectorXd logistic_glm(const Eigen::MatrixXd& x, std::span<const double> y) {
  const auto n = x.rows(), p = x.cols() + 1;
  Eigen::MatrixXd z(n, p);
  z.col(0).setOnes();
  z.rightCols(x.cols()) = x;
  const Eigen::Map<const Eigen::VectorXd> yv(y.data(), n);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  const double ybar = yv.mean();
  if (!(ybar > 0 && ybar < 1)) throw Error(ErrorKind::degenerate_response, "logistic response is constant");
  beta[0] = logit(ybar);
  auto nll = [&](const Eigen::VectorXd& b) {
    const Eigen::VectorXd eta = z * b;
    double f = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) f += hal::pointwise_loss(hal::Loss::logistic, yv[i], eta[i]);
    return f;
  };
  double f = nll(beta);
  for (int it = 0; it < 100; ++it) {
    const Eigen::VectorXd eta = z * beta;
    Eigen::VectorXd mu(n), v(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      mu[i] = expit(eta[i]);
      v[i] = std::max(mu[i] * (1 - mu[i]), 1e-12);
    }
    const Eigen::VectorXd grad = z.transpose() * (yv - mu);
    Eigen::MatrixXd info = z.transpose() * v.asDiagonal() * z;
    info.diagonal().array() += 1e-10;
    const Eigen::VectorXd step = info.ldlt().solve(grad);
    double t = 1.0, f_new = f;
    for (int h = 0; h < 50; ++h, t *= 0.5) {
      f_new = nll(beta + t * step);
      if (f_new <= f) break;
    }
    if (!(f_new <= f)) break;
    beta += t * step;
    const double change = f - f_new;
    f = f_new;
    if ((t * step).cwiseAbs().maxCoeff() < 1e-10 || change < 1e-14 * std::max(1.0, f)) break;
  }
  return beta;
}

OutcomeFit fit_outcome_regression(const Dataset& data, OutcomeMethod method, const hal::HalConfig& cfg) {
  const auto& y = data.outcome();
  bool all0 = true, all1 = true;
  for (double v : y) {
    if (v < 0.0 || v > 1.0)
      throw Error(ErrorKind::invalid_config, "outcome must lie in [0,1]; rescale it first");
    all0 = all0 && v == 0.0;
    all1 = all1 && v == 1.0;
  }
  if (all0 || all1) throw Error(ErrorKind::degenerate_response, "outcome is constant");
  OutcomeFit fit;
  fit.method_ = method;
  fit.bounds_ = data.outcome_bounds();
  const RowMatrix x = outcome_inputs(data.treatment(), data.covariates());
  if (method == OutcomeMethod::hal) {
    fit.hal_ = hal::fit_hal_cv(x, y, hal::Loss::logistic, cfg);
  } else {
    fit.glm_ = logistic_glm(Eigen::MatrixXd(x), y);
  }
  return fit;
}

std::vector<double> OutcomeFit::predict(std::span<const double> a, const RowMatrix& w) const {
  if (a.size() != static_cast<std::size_t>(w.rows()))
    throw Error(ErrorKind::shape, "treatment and covariate rows differ in length");
  const RowMatrix x = outcome_inputs(a, w);
  if (method_ == OutcomeMethod::hal) return hal_.predict(x, hal::Scale::response);
  if (x.cols() + 1 != glm_.size()) throw Error(ErrorKind::shape, "covariate dimension mismatch");
  std::vector<double> out(a.size());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    out[static_cast<std::size_t>(i)] = expit(glm_[0] + x.row(i).dot(glm_.tail(x.cols())));
  return out;
}

OutcomeValues outcome_values(const Dataset& data, const OutcomeModel& q, const ResolvedRegime& r) {
  const auto& a = data.treatment();
  std::vector<double> shifted(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) shifted[i] = mtp::apply_regime(a[i], r);
  OutcomeValues v;
  v.q_obs = q.predict(a, data.covariates());
  v.q_shift = shifted == a ? v.q_obs : q.predict(shifted, data.covariates());
  return v;
}

DensityValues density_values(const Dataset& data, const SampleDensity& g, const ResolvedRegime& r) {
  DensityValues v;
  const auto& a = data.treatment();
  v.weights = mtp::weights(g, r, a);
  v.h_shift.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double s = mtp::apply_regime(a[i], r);
    v.h_shift[i] = s == a[i] ? v.weights.raw[i] : mtp::weight_at(g, i, r, s);
  }
  return v;
}

NuisanceValues combine(const Dataset& data, const OutcomeValues& q, const DensityValues& g) {
  NuisanceValues nv;
  nv.y = data.outcome();
  nv.q_obs = q.q_obs;
  nv.q_shift = q.q_shift;
  nv.h = g.weights.raw;
  nv.h_shift = g.h_shift;
  nv.mean_h = g.weights.mean_h;
  const std::size_t n = nv.y.size();
  if (nv.q_obs.size() != n || nv.h.size() != n)
    throw Error(ErrorKind::shape, "nuisance values do not match the number of units");
  return nv;
}

double substitution(std::span<const double> q_shift) { return mean(q_shift); }

double ipw(std::span<const double> h, std::span<const double> y, bool stabilized) {
  if (h.size() != y.size()) throw Error(ErrorKind::shape, "weights and outcomes differ in length");
  double s = 0.0, hs = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    s += h[i] * y[i];
    hs += h[i];
  }
  if (!stabilized) return s / static_cast<double>(h.size());
  if (!(hs > 0)) throw Error(ErrorKind::positivity_violation, "inverse weights sum to zero");
  return s / hs;
}

std::vector<double> eif(const NuisanceValues& nv, double psi) {
  std::vector<double> d(nv.y.size());
  for (std::size_t i = 0; i < d.size(); ++i)
    d[i] = nv.h[i] * (nv.y[i] - nv.q_obs[i]) + nv.q_shift[i] - psi;
  return d;
}

std::vector<double> dcar_tilde(const NuisanceValues& nv, double psi) {
  std::vector<double> d(nv.y.size());
  for (std::size_t i = 0; i < d.size(); ++i)
    d[i] = nv.q_obs[i] * nv.h[i] - nv.q_shift[i] + psi * (1.0 - nv.h[i]);
  return d;
}

double se_ipw(std::span<const double> h, std::span<const double> y, double psi) {
  if (h.size() != y.size()) throw Error(ErrorKind::shape, "weights and outcomes differ in length");
  const double hbar = mean(h);
  std::vector<double> u(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) u[i] = hbar > 0 ? h[i] / hbar * (y[i] - psi) : 0.0;
  return std::sqrt(sample_variance(u) / static_cast<double>(u.size()));
}

double se_eif(std::span<const double> d) {
  if (d.empty()) throw Error(ErrorKind::empty_input, "empty influence function");
  return std::sqrt(sample_variance(d) / static_cast<double>(d.size()));
}

namespace {

void fill_diagnostics(EstimateReport& rep, const NuisanceValues& nv) {
  const auto d = eif(nv, rep.psi);
  rep.pn_eif = mean(d);
  rep.se_eif = se_eif(d);
  rep.pn_dcar = mean(dcar_tilde(nv, rep.psi));
}

}  // namespace

EstimateReport substitution_report(const NuisanceValues& nv) {
  EstimateReport rep;
  rep.kind = EstimatorKind::sub;
  rep.psi = substitution(nv.q_shift);
  fill_diagnostics(rep, nv);
  rep.se = rep.se_eif;
  return rep;
}

EstimateReport ipw_report(const NuisanceValues& nv, bool stabilized) {
  EstimateReport rep;
  rep.kind = stabilized ? EstimatorKind::ipw_stab : EstimatorKind::ipw;
  rep.psi = ipw(nv.h, nv.y, stabilized);
  if (stabilized) {
    rep.se = se_ipw(nv.h, nv.y, rep.psi);
  } else {
    std::vector<double> u(nv.y.size());
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = nv.h[i] * nv.y[i];
    rep.se = std::sqrt(sample_variance(u) / static_cast<double>(u.size()));
  }
  fill_diagnostics(rep, nv);
  return rep;
}

EstimateReport onestep(const NuisanceValues& nv) {
  const double sub = substitution(nv.q_shift);
  EstimateReport rep;
  rep.kind = EstimatorKind::onestep;
  rep.psi = sub + mean(eif(nv, sub));
  fill_diagnostics(rep, nv);
  rep.se = rep.se_eif;
  return rep;
}

TmleResult tmle(const NuisanceValues& nv) {
  const std::size_t n = nv.y.size();
  for (double y : nv.y)
    if (y < 0.0 || y > 1.0) throw Error(ErrorKind::invalid_config, "TMLE needs outcomes in [0,1]");
  std::vector<double> off(n);
  for (std::size_t i = 0; i < n; ++i) off[i] = logit(std::clamp(nv.q_obs[i], kClamp, 1.0 - kClamp));

  auto score = [&](double eps, double& info) {
    double s = 0.0;
    info = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double q = expit(off[i] + eps * nv.h[i]);
      s += nv.h[i] * (nv.y[i] - q);
      info += nv.h[i] * nv.h[i] * q * (1 - q);
    }
    return s / static_cast<double>(n);
  };
  auto nll = [&](double eps) {
    double f = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      f += hal::pointwise_loss(hal::Loss::logistic, nv.y[i], off[i] + eps * nv.h[i]);
    return f;
  };

  TmleResult res;
  double eps = 0.0, info = 0.0;
  double s = score(eps, info);
  double f = nll(eps);
  int it = 0;
  for (; it < 100; ++it) {
    if (s == 0.0 || !(info > 0)) break;
    const double step = s * static_cast<double>(n) / info;
    // Near the optimum the NLL is flat to rounding, so a smaller score also
    // counts as progress.
    double t = 1.0, f_new = f, s_new = s, info_new = info;
    int halvings = 0;
    for (; halvings < 60; ++halvings, t *= 0.5) {
      f_new = nll(eps + t * step);
      s_new = score(eps + t * step, info_new);
      if (f_new < f || std::abs(s_new) < std::abs(s)) break;
    }
    if (halvings == 60) break;
    eps += t * step;
    f = f_new;
    s = s_new;
    info = info_new;
    if (std::abs(t * step) < 1e-15 * std::max(1.0, std::abs(eps))) break;
  }
  if (!(std::abs(s) < 1e-10) || !std::isfinite(eps))
    throw Error(ErrorKind::tilt_failure, "logistic tilt did not solve its score equation (|score| = " +
                                             std::to_string(std::abs(s)) + ")");
  res.epsilon = eps;
  res.iterations = it;
  res.q_obs_star.resize(n);
  res.q_shift_star.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    res.q_obs_star[i] = expit(off[i] + eps * nv.h[i]);
    res.q_shift_star[i] = tilt(nv.q_shift[i], eps, nv.h_shift[i]);
  }
  NuisanceValues star = nv;
  star.q_obs = res.q_obs_star;
  star.q_shift = res.q_shift_star;
  res.report.kind = EstimatorKind::tmle;
  res.report.psi = mean(res.q_shift_star);
  fill_diagnostics(res.report, star);
  res.report.se = res.report.se_eif;
  return res;
}

}  // namespace shiftipw::estimators
