#include "shiftipw/haldensify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace shiftipw::haldensify {

const char* to_string(BinType type) {
  return type == BinType::equal_range ? "equal_range" : "equal_mass";
}

BinType bin_type_from_string(const std::string& name) {
  if (name == "equal_range") return BinType::equal_range;
  if (name == "equal_mass") return BinType::equal_mass;
  throw Error(ErrorKind::invalid_config, "unknown bin type '" + name + "'");
}

int BinningScheme::bin_of(double a) const {
  if (cutpoints.size() < 2 || !(a >= cutpoints.front()) || !(a <= cutpoints.back())) return -1;
  const auto it = std::upper_bound(cutpoints.begin(), cutpoints.end(), a);
  return std::min(static_cast<int>(it - cutpoints.begin()) - 1, bins() - 1);
}

namespace {

double pad_above(double hi) {
  return hi + 16 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(hi));
}

double log_expit(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

// Converts a row-major (unit, bin) block of hazard logits to bin probabilities.
Eigen::MatrixXd probs_from_eta(std::span<const double> eta, std::size_t m, int T) {
  Eigen::MatrixXd p(static_cast<Eigen::Index>(m), T);
  for (std::size_t i = 0; i < m; ++i) {
    double log_surv = 0.0;
    for (int t = 0; t < T; ++t) {
      const double e = eta[i * static_cast<std::size_t>(T) + static_cast<std::size_t>(t)];
      if (t == T - 1) {
        p(static_cast<Eigen::Index>(i), t) = std::exp(log_surv);
      } else {
        p(static_cast<Eigen::Index>(i), t) = std::exp(log_surv + log_expit(e));
        log_surv += log_expit(-e);
      }
    }
  }
  return p;
}

RowMatrix hazard_points(const RowMatrix& w, int T) {
  const auto m = w.rows();
  RowMatrix pts(m * T, w.cols() + 1);
  for (Eigen::Index i = 0; i < m; ++i)
    for (int t = 0; t < T; ++t) {
      const Eigen::Index r = i * T + t;
      pts(r, 0) = t + 1;
      pts.row(r).tail(w.cols()) = w.row(i);
    }
  return pts;
}

void check_grid(const std::vector<double>& lambdas) {
  if (lambdas.empty()) throw Error(ErrorKind::invalid_grid, "empty lambda grid");
  for (std::size_t k = 1; k < lambdas.size(); ++k)
    if (!(lambdas[k] < lambdas[k - 1]))
      throw Error(ErrorKind::invalid_grid, "lambda grid must be strictly decreasing without duplicates");
}

struct Prepared {
  HazardExpansion expansion;
  hal::BasisSet bases;
  hal::BinaryDesign design;
};

Prepared prepare(const Dataset& data, const BinningScheme& bins, const hal::BasisConfig& basis) {
  Prepared p;
  p.expansion = expand_repeated_measures(data, bins);
  p.bases = hal::enumerate_bases(p.expansion.covariates, basis);
  p.design = hal::evaluate_design(p.bases, p.expansion.covariates);
  return p;
}

DensityCvResult cv_prepared(const Prepared& prep, const Dataset& data, const BinningScheme& bins,
                            const datacore::FoldAssignment& folds,
                            const std::vector<double>& lambdas, const hal::SolverOptions& solver,
                            int threads) {
  if (folds.folds < 2) throw Error(ErrorKind::invalid_fold, "cross-validation needs at least 2 folds");
  if (folds.fold_of_unit.size() != data.size())
    throw Error(ErrorKind::shape, "fold assignment does not match the number of units");
  check_grid(lambdas);
  const auto& ex = prep.expansion;
  const std::size_t rows = ex.indicator.size();
  const std::size_t n = data.size();
  const int T = bins.bins();

  // Held-out log densities, unit x lambda.
  std::vector<std::vector<double>> logd(n, std::vector<double>(lambdas.size(), 0.0));
  parallel_for(static_cast<std::size_t>(folds.folds), threads, [&](std::size_t v) {
    std::vector<double> w(rows, 0.0);
    bool has0 = false, has1 = false;
    for (std::size_t r = 0; r < rows; ++r)
      if (folds.fold_of_unit[ex.unit_id[r]] != static_cast<int>(v)) {
        w[r] = 1.0;
        has0 = has0 || ex.indicator[r] == 0.0;
        has1 = has1 || ex.indicator[r] == 1.0;
      }
    if (!(has0 && has1))
      throw Error(ErrorKind::degenerate_fold, "hazard indicators outside fold " +
                                                  std::to_string(v + 1) + " are constant");
    const auto path = hal::fit_lasso_path(prep.design, ex.indicator, w, hal::Loss::logistic,
                                          hal::LambdaGrid::explicit_values(lambdas), solver);
    for (std::size_t k = 0; k < path.size(); ++k) {
      const auto eta = hal::linear_predictor(path, k, prep.design);
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t i = ex.unit_id[r];
        if (folds.fold_of_unit[i] != static_cast<int>(v)) continue;
        const bool event = ex.indicator[r] == 1.0;
        if (!event)
          logd[i][k] += log_expit(-eta[r]);
        else if (ex.bin_index[r] < T)
          logd[i][k] += log_expit(eta[r]);
      }
    }
  });

  DensityCvResult out;
  out.risk.assign(lambdas.size(), 0.0);
  const double log_floor = std::log(kLogLossFloor);
  for (std::size_t k = 0; k < lambdas.size(); ++k) {
    std::size_t floored = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const int t = bins.bin_of(data.treatment()[i]);
      double ld = logd[i][k] - std::log(bins.width(t));
      if (ld < log_floor) {
        ld = log_floor;
        ++floored;
      }
      out.risk[k] -= ld;
    }
    out.risk[k] /= static_cast<double>(n);
    if (floored == n)
      out.warnings.push_back("degenerate-risk: every held-out density is at the floor for lambda index " +
                             std::to_string(k));
  }
  out.selected = argmin_first(out.risk);
  return out;
}

}  // namespace

int default_bin_count(std::size_t n) {
  return std::max(5, static_cast<int>(std::lround(std::cbrt(static_cast<double>(n)))));
}

BinningScheme make_bins(std::span<const double> treatment, int bins, BinType type) {
  if (bins < 2) throw Error(ErrorKind::invalid_config, "need at least 2 bins");
  if (treatment.empty()) throw Error(ErrorKind::empty_input, "no treatment values to bin");
  std::vector<double> sorted(treatment.begin(), treatment.end());
  std::sort(sorted.begin(), sorted.end());
  const double lo = sorted.front(), hi = sorted.back();
  if (!(hi > lo)) throw Error(ErrorKind::degenerate_bins, "treatment is constant; bins have zero width");
  BinningScheme s;
  s.type = type;
  if (type == BinType::equal_range) {
    for (int k = 0; k <= bins; ++k) s.cutpoints.push_back(lo + (hi - lo) * k / bins);
  } else {
    std::vector<double> uniq = sorted;
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    if (uniq.size() < static_cast<std::size_t>(bins))
      throw Error(ErrorKind::degenerate_bins, "fewer distinct treatment values than bins");
    for (int k = 0; k <= bins; ++k)
      s.cutpoints.push_back(sorted_quantile(sorted, static_cast<double>(k) / bins));
  }
  s.cutpoints.front() = lo;
  s.cutpoints.back() = pad_above(hi);
  for (int k = 0; k < bins; ++k)
    if (!(s.cutpoints[k + 1] > s.cutpoints[k]))
      throw Error(ErrorKind::degenerate_bins, "quantile cutpoints are tied; use fewer bins");
  return s;
}

HazardExpansion expand_repeated_measures(const Dataset& data, const BinningScheme& bins) {
  const auto& a = data.treatment();
  std::vector<int> bin_of_unit(a.size());
  std::size_t total = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    bin_of_unit[i] = bins.bin_of(a[i]);
    if (bin_of_unit[i] < 0)
      throw Error(ErrorKind::out_of_support, "treatment value " + std::to_string(a[i]) + " of unit " +
                                                 std::to_string(i) + " lies outside the bins");
    total += static_cast<std::size_t>(bin_of_unit[i]) + 1;
  }
  HazardExpansion ex;
  const auto d = static_cast<Eigen::Index>(data.dim());
  ex.covariates.resize(static_cast<Eigen::Index>(total), d + 1);
  ex.indicator.reserve(total);
  ex.unit_id.reserve(total);
  ex.bin_index.reserve(total);
  Eigen::Index r = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (int t = 0; t <= bin_of_unit[i]; ++t, ++r) {
      ex.covariates(r, 0) = t + 1;
      ex.covariates.row(r).tail(d) = data.covariates().row(static_cast<Eigen::Index>(i));
      ex.indicator.push_back(t == bin_of_unit[i] ? 1.0 : 0.0);
      ex.unit_id.push_back(i);
      ex.bin_index.push_back(t + 1);
    }
  }
  return ex;
}

HazardModel fit_pooled_hazard(const HazardExpansion& expansion, const hal::LambdaGrid& grid,
                              const hal::BasisConfig& basis, const hal::SolverOptions& solver) {
  if (expansion.indicator.empty()) throw Error(ErrorKind::empty_input, "empty hazard expansion");
  HazardModel m;
  m.bases = hal::enumerate_bases(expansion.covariates, basis);
  const auto design = hal::evaluate_design(m.bases, expansion.covariates);
  m.path = hal::fit_lasso_path(design, expansion.indicator, {}, hal::Loss::logistic, grid, solver);
  return m;
}

Eigen::MatrixXd bin_probabilities(const HazardModel& model, std::size_t k, const BinningScheme& bins,
                                  const RowMatrix& w) {
  const int T = bins.bins();
  const auto design = hal::evaluate_design(model.bases, hazard_points(w, T));
  const auto eta = hal::linear_predictor(model.path, k, design);
  return probs_from_eta(eta, static_cast<std::size_t>(w.rows()), T);
}

double BinnedDensity::operator()(std::size_t i, double a) const {
  const int t = bins_.bin_of(a);
  if (t < 0) return 0.0;
  return probs_(static_cast<Eigen::Index>(i), t) / bins_.width(t);
}

DensityCvResult cv_density_risk(const Dataset& data, const BinningScheme& bins,
                                const datacore::FoldAssignment& folds,
                                const std::vector<double>& lambdas, const hal::BasisConfig& basis,
                                const hal::SolverOptions& solver, int threads) {
  check_grid(lambdas);
  const Prepared prep = prepare(data, bins, basis);
  return cv_prepared(prep, data, bins, folds, lambdas, solver, threads);
}

CondDensityFamily build_family(const Dataset& data, const FamilyConfig& cfg) {
  CondDensityFamily fam;
  const int T = cfg.bins > 0 ? cfg.bins : default_bin_count(data.size());
  fam.bins = make_bins(data.treatment(), T, cfg.bin_type);
  const Prepared prep = prepare(data, fam.bins, cfg.basis);

  if (!cfg.lambdas.empty()) {
    fam.full_grid = cfg.lambdas;
  } else {
    if (cfg.n_lambda == 0) throw Error(ErrorKind::invalid_config, "n_lambda must be positive");
    const double lmax = hal::lambda_max(prep.design, prep.expansion.indicator, {}, hal::Loss::logistic);
    fam.full_grid = lmax > 0 ? log_spaced_desc(lmax, lmax * cfg.lambda_min_ratio, cfg.n_lambda)
                             : std::vector<double>{0.0};
  }
  check_grid(fam.full_grid);

  const auto folds = datacore::split_folds(data.size(), cfg.folds, cfg.seed);
  auto cv = cv_prepared(prep, data, fam.bins, folds, fam.full_grid, cfg.solver, cfg.threads);
  fam.cv_risk = std::move(cv.risk);
  fam.cv_index = cv.selected;
  fam.warnings = std::move(cv.warnings);

  const std::size_t last = fam.full_grid.size() - 1;
  const std::size_t end =
      cfg.undersmooth == 0 ? last : std::min(last, fam.cv_index + cfg.undersmooth - 1);
  if (fam.cv_index == last && cfg.undersmooth != 1)
    fam.warnings.push_back("lambda_CV is the smallest grid value; family truncated to one member");
  const std::vector<double> prefix(fam.full_grid.begin(),
                                   fam.full_grid.begin() + static_cast<std::ptrdiff_t>(end) + 1);
  const auto path = hal::fit_lasso_path(prep.design, prep.expansion.indicator, {}, hal::Loss::logistic,
                                        hal::LambdaGrid::explicit_values(prefix), cfg.solver);
  fam.hazard.bases = prep.bases;
  fam.hazard.path = path.slice(fam.cv_index, end - fam.cv_index + 1);
  return fam;
}

BinnedDensity CondDensityFamily::density(std::size_t k, const RowMatrix& w) const {
  return BinnedDensity(bins, bin_probabilities(hazard, k, bins, w));
}

double density_at(const CondDensityFamily& family, std::size_t k, double a,
                  std::span<const double> w) {
  if (k >= family.size()) throw Error(ErrorKind::invalid_config, "lambda index out of range");
  const int t = family.bins.bin_of(a);
  if (t < 0) return 0.0;
  RowMatrix row(1, static_cast<Eigen::Index>(w.size()));
  for (std::size_t j = 0; j < w.size(); ++j) row(0, static_cast<Eigen::Index>(j)) = w[j];
  const auto p = bin_probabilities(family.hazard, k, family.bins, row);
  return p(0, t) / family.bins.width(t);
}

FamilyTable::FamilyTable(const CondDensityFamily& family, const RowMatrix& w)
    : family_(family),
      rows_(static_cast<std::size_t>(w.rows())),
      design_(hal::evaluate_design(family.hazard.bases, hazard_points(w, family.bins.bins()))) {}

BinnedDensity FamilyTable::density(std::size_t k) const {
  const auto eta = hal::linear_predictor(family_.hazard.path, k, design_);
  return BinnedDensity(family_.bins, probs_from_eta(eta, rows_, family_.bins.bins()));
}

}  // namespace shiftipw::haldensify
