#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "shiftipw/common.hpp"

namespace shiftipw::datacore {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct OutcomeBounds {
  double lo = 0.0;
  double hi = 1.0;
  double to_original(double v) const { return lo + (hi - lo) * v; }
  double scale() const { return hi - lo; }
};

// Observed data O = (W, A, Y).  Immutable once built; the outcome may be
// absent for density-only workflows.
class Dataset {
 public:
  Dataset(RowMatrix covariates, std::vector<double> treatment,
          std::optional<std::vector<double>> outcome,
          std::vector<std::string> covariate_names, std::string treatment_name = "A",
          std::string outcome_name = "Y");

  std::size_t size() const { return treatment_.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(covariates_.cols()); }
  const RowMatrix& covariates() const { return covariates_; }
  std::span<const double> covariate_row(std::size_t i) const {
    return {covariates_.data() + i * dim(), dim()};
  }
  const std::vector<double>& treatment() const { return treatment_; }
  bool has_outcome() const { return outcome_.has_value(); }
  const std::vector<double>& outcome() const;
  const std::vector<std::string>& covariate_names() const { return covariate_names_; }
  const std::string& treatment_name() const { return treatment_name_; }
  const std::string& outcome_name() const { return outcome_name_; }
  const std::optional<OutcomeBounds>& outcome_bounds() const { return bounds_; }

  // Min-max rescales an outcome that leaves [0,1]; identity otherwise.
  Dataset with_bounded_outcome() const;
  Dataset subset(std::span<const std::size_t> rows) const;

 private:
  RowMatrix covariates_;
  std::vector<double> treatment_;
  std::optional<std::vector<double>> outcome_;
  std::vector<std::string> covariate_names_;
  std::string treatment_name_;
  std::string outcome_name_;
  std::optional<OutcomeBounds> bounds_;
};

// Empty covariate_cols selects every column other than treatment/outcome.
Dataset load_csv(const std::string& path, const std::string& treatment_col,
                 const std::optional<std::string>& outcome_col,
                 const std::vector<std::string>& covariate_cols = {});

// Writes covariates, then treatment, then outcome, with round-trip precision.
void write_csv(const Dataset& data, const std::string& path);

struct FoldAssignment {
  std::vector<int> fold_of_unit;  // 0-based fold ids
  int folds = 0;
  std::vector<std::size_t> members(int fold) const;
};

FoldAssignment split_folds(std::size_t n, int folds, std::uint64_t seed);

}  // namespace shiftipw::datacore
