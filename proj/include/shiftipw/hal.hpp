#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "shiftipw/common.hpp"
#include "shiftipw/datacore.hpp"

namespace shiftipw::hal {

using datacore::RowMatrix;

enum class Loss { logistic, squared_error };
const char* to_string(Loss loss);
Loss loss_from_string(const std::string& name);

enum class Scale { link, response };

// phi(z) = 1 iff z_j >= knot_j for every j in subset (inclusive at the knot).
struct BasisFunction {
  std::vector<int> subset;  // 0-based covariate indices, increasing
  std::vector<double> knots;
  bool evaluate(std::span<const double> z) const;
  bool operator==(const BasisFunction&) const = default;
};

class BasisSet {
 public:
  BasisSet() = default;
  BasisSet(std::vector<BasisFunction> bases, int dim);

  const std::vector<BasisFunction>& bases() const { return bases_; }
  std::size_t size() const { return bases_.size(); }
  int dim() const { return dim_; }
  // Distinct knots in use per coordinate, ascending.
  const std::vector<std::vector<double>>& knot_grid() const { return grid_; }
  // Position of each basis knot inside knot_grid(), parallel to subset.
  const std::vector<std::vector<std::uint32_t>>& knot_index() const { return knot_index_; }

 private:
  std::vector<BasisFunction> bases_;
  int dim_ = 0;
  std::vector<std::vector<double>> grid_;
  std::vector<std::vector<std::uint32_t>> knot_index_;
};

struct BasisConfig {
  int max_degree = 2;
  int knots_per_covariate = 200;  // <= 0 keeps every distinct value
};

// Subsets larger than the data dimension are skipped, so max_degree may
// exceed d.  Knot reduction keeps evenly spaced order statistics.
BasisSet enumerate_bases(const RowMatrix& data, int max_degree, int knots_per_covariate);
inline BasisSet enumerate_bases(const RowMatrix& data, const BasisConfig& cfg) {
  return enumerate_bases(data, cfg.max_degree, cfg.knots_per_covariate);
}

// Column-compressed 0/1 matrix.  Designs built from a BasisSet also carry a
// dominance index that computes X^T r for all columns in O(rows + cells).
class BinaryDesign {
 public:
  static BinaryDesign from_dense(const Eigen::MatrixXd& x);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return col_start_.empty() ? 0 : col_start_.size() - 1; }
  std::span<const std::uint32_t> column(std::size_t j) const {
    return {row_index_.data() + col_start_[j], col_start_[j + 1] - col_start_[j]};
  }
  Eigen::MatrixXd dense() const;
  void transpose_times(std::span<const double> r, std::span<double> out) const;
  // Keeps the listed rows, in order.
  BinaryDesign select_rows(std::span<const std::uint32_t> rows) const;

 private:
  friend BinaryDesign evaluate_design(const BasisSet&, const RowMatrix&);
  struct Group {
    std::vector<std::size_t> extent;  // cells along each axis
    std::vector<std::uint32_t> row_cell;
    std::vector<std::pair<std::uint32_t, std::uint32_t>> basis_cell;
    std::size_t cells = 0;
  };
  std::size_t rows_ = 0;
  std::vector<std::size_t> col_start_;
  std::vector<std::uint32_t> row_index_;
  std::vector<Group> groups_;
  std::vector<std::uint32_t> direct_cols_;
};

BinaryDesign evaluate_design(const BasisSet& bases, const RowMatrix& points);

using SparseCoefs = std::vector<std::pair<std::uint32_t, double>>;

struct LassoPath {
  Loss loss = Loss::squared_error;
  std::vector<double> lambdas;
  std::vector<double> intercepts;
  std::vector<SparseCoefs> coefficients;
  std::size_t n_features = 0;
  std::size_t size() const { return lambdas.size(); }
  // Keeps entries [first, first + count).
  LassoPath slice(std::size_t first, std::size_t count) const;
};

struct SolverOptions {
  double tolerance = 1e-7;  // on the largest coefficient change
  int max_newton = 100;     // quadratic-approximation steps per lambda
};

struct LambdaGrid {
  std::vector<double> values;  // explicit grid; empty means auto
  std::size_t count = 100;
  double min_ratio = 1e-4;
  static LambdaGrid automatic(std::size_t count = 100, double min_ratio = 1e-4) {
    return {{}, count, min_ratio};
  }
  static LambdaGrid explicit_values(std::vector<double> v) { return {std::move(v), 0, 0}; }
};

// Objective: sum_i w_i loss(y_i, eta_i) / sum_i w_i + lambda * sum_j |beta_j|,
// intercept unpenalized.  Logistic loss accepts y in [0,1].
LassoPath fit_lasso_path(const BinaryDesign& x, std::span<const double> y,
                         std::span<const double> w, Loss loss, const LambdaGrid& grid,
                         const SolverOptions& opt = {});

double lambda_max(const BinaryDesign& x, std::span<const double> y, std::span<const double> w,
                  Loss loss);

double l1_norm(const LassoPath& path, std::size_t k);

std::vector<double> linear_predictor(const LassoPath& path, std::size_t k, const BinaryDesign& x);
std::vector<double> predict(const LassoPath& path, std::size_t k, const BinaryDesign& x,
                            Scale scale);
std::vector<double> predict(const LassoPath& path, const BasisSet& bases, std::size_t k,
                            const RowMatrix& points, Scale scale);

double pointwise_loss(Loss loss, double y, double eta);
std::vector<double> weighted_gradient(const BinaryDesign& x, std::span<const double> y,
                                      std::span<const double> w, Loss loss,
                                      std::span<const double> eta);

struct CvResult {
  std::vector<double> risk;
  std::size_t selected = 0;
};

// Per-lambda pooled held-out risk; fold_of_row gives each row's fold id.
CvResult cv_risk(const BinaryDesign& x, std::span<const double> y, std::span<const double> w,
                 Loss loss, std::span<const int> fold_of_row, int folds,
                 const std::vector<double>& lambdas, const SolverOptions& opt = {},
                 int threads = 1);

struct HalConfig {
  BasisConfig basis;
  SolverOptions solver;
  std::size_t n_lambda = 100;
  double lambda_min_ratio = 1e-4;
  int folds = 5;
  std::uint64_t seed = 1;
  int threads = 1;
};

struct HalFit {
  BasisSet bases;
  LassoPath path;  // grid truncated at the selected lambda
  std::size_t selected = 0;
  std::vector<double> cv_risk;
  std::vector<double> predict(const RowMatrix& points, Scale scale) const {
    return hal::predict(path, bases, selected, points, scale);
  }
};

// Enumerates bases on x, cross-validates the auto grid, refits on all rows.
HalFit fit_hal_cv(const RowMatrix& x, std::span<const double> y, Loss loss, const HalConfig& cfg);

}  // namespace shiftipw::hal
