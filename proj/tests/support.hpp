#pragma once

// Independent reference computations for the tests.  Nothing here calls the
// library's solvers.

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <vector>

namespace testsupport {

inline double expit(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct LassoSolution {
  double intercept = 0.0;
  Eigen::VectorXd beta;
  double objective = std::numeric_limits<double>::infinity();
};

// sum_i w_i loss(y_i, b0 + x_i b) / sum w + lambda |b|_1 with the smooth part
// evaluated in closed form.  logistic selects the Bernoulli deviance / 2n form.
inline double lasso_objective(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                              bool logistic, double lambda, double b0, const Eigen::VectorXd& b) {
  const Eigen::VectorXd eta = (x * b).array() + b0;
  double f = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double e = eta[i];
    const double l = logistic ? std::log1p(std::exp(-std::abs(e))) + std::max(e, 0.0) - y[i] * e
                              : 0.5 * (y[i] - e) * (y[i] - e);
    f += w[i] * l;
  }
  return f / w.sum() + lambda * b.cwiseAbs().sum();
}

// Exact minimizer for a handful of features: every sign pattern gives a smooth
// convex problem solved by damped Newton; the best pattern whose solution
// keeps its signs is the global optimum.
inline LassoSolution lasso_oracle(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                                  bool logistic, double lambda) {
  const int p = static_cast<int>(x.cols());
  const double wsum = w.sum();
  LassoSolution best;
  best.beta = Eigen::VectorXd::Zero(p);
  int patterns = 1;
  for (int j = 0; j < p; ++j) patterns *= 3;
  for (int code = 0; code < patterns; ++code) {
    std::vector<int> sign(p), free_cols;
    for (int j = 0, c = code; j < p; ++j, c /= 3) {
      sign[j] = c % 3 - 1;
      if (sign[j] != 0) free_cols.push_back(j);
    }
    const int q = static_cast<int>(free_cols.size()) + 1;
    Eigen::MatrixXd z(x.rows(), q);
    z.col(0).setOnes();
    Eigen::VectorXd lin = Eigen::VectorXd::Zero(q);
    for (int k = 1; k < q; ++k) {
      z.col(k) = x.col(free_cols[k - 1]);
      lin[k] = lambda * sign[free_cols[k - 1]];
    }
    auto smooth = [&](const Eigen::VectorXd& t) {
      const Eigen::VectorXd eta = z * t;
      double f = 0.0;
      for (Eigen::Index i = 0; i < y.size(); ++i) {
        const double e = eta[i];
        f += w[i] * (logistic ? std::log1p(std::exp(-std::abs(e))) + std::max(e, 0.0) - y[i] * e
                              : 0.5 * (y[i] - e) * (y[i] - e));
      }
      return f / wsum + lin.dot(t);
    };
    Eigen::VectorXd t = Eigen::VectorXd::Zero(q);
    double f = smooth(t);
    bool ok = true;
    for (int it = 0; it < 200; ++it) {
      const Eigen::VectorXd eta = z * t;
      Eigen::VectorXd r(y.size()), v(y.size());
      for (Eigen::Index i = 0; i < y.size(); ++i) {
        const double mu = logistic ? expit(eta[i]) : eta[i];
        r[i] = w[i] * (mu - y[i]) / wsum;
        v[i] = w[i] * (logistic ? mu * (1 - mu) : 1.0) / wsum;
      }
      const Eigen::VectorXd grad = z.transpose() * r + lin;
      const Eigen::MatrixXd hess = z.transpose() * v.asDiagonal() * z;
      const Eigen::VectorXd step = hess.ldlt().solve(-grad);
      if (!step.allFinite()) {
        ok = false;
        break;
      }
      double s = 1.0, fn = f;
      for (int h = 0; h < 60; ++h, s *= 0.5) {
        fn = smooth(t + s * step);
        if (fn <= f) break;
      }
      t += s * step;
      const bool done = grad.cwiseAbs().maxCoeff() < 1e-13;
      f = fn;
      if (done || t.cwiseAbs().maxCoeff() > 1e6) break;
    }
    if (!ok || t.cwiseAbs().maxCoeff() > 1e6) continue;
    bool signs_hold = true;
    for (int k = 1; k < q; ++k)
      if (t[k] * sign[free_cols[k - 1]] < 0) signs_hold = false;
    if (!signs_hold) continue;
    Eigen::VectorXd b = Eigen::VectorXd::Zero(p);
    for (int k = 1; k < q; ++k) b[free_cols[k - 1]] = t[k];
    const double obj = lasso_objective(x, y, w, logistic, lambda, t[0], b);
    if (obj < best.objective) {
      best.objective = obj;
      best.intercept = t[0];
      best.beta = b;
    }
  }
  return best;
}

// Largest violation of the lasso optimality conditions, measured on the
// gradient of the weight-normalized smooth part.
inline double kkt_violation(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                            bool logistic, double lambda, double b0, const Eigen::VectorXd& b) {
  const Eigen::VectorXd eta = (x * b).array() + b0;
  Eigen::VectorXd r(y.size());
  for (Eigen::Index i = 0; i < y.size(); ++i)
    r[i] = w[i] * (y[i] - (logistic ? expit(eta[i]) : eta[i])) / w.sum();
  double worst = std::abs(r.sum());  // intercept
  const Eigen::VectorXd g = x.transpose() * r;
  for (Eigen::Index j = 0; j < b.size(); ++j) {
    const double v = b[j] == 0 ? std::max(0.0, std::abs(g[j]) - lambda)
                               : std::abs(g[j] - lambda * (b[j] > 0 ? 1 : -1));
    worst = std::max(worst, v);
  }
  return worst;
}

inline std::string temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "shiftipw_tests";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

}  // namespace testsupport
