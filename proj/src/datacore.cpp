#include "shiftipw/datacore.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace shiftipw::datacore {

namespace {

void check_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x))
      throw Error(ErrorKind::numeric, std::string("non-finite value in ") + what);
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    std::size_t b = 0;
    while (b < cell.size() && cell[b] == ' ') ++b;
    cell = cell.substr(b);
    if (cell.size() >= 2 && cell.front() == '"' && cell.back() == '"')
      cell = cell.substr(1, cell.size() - 2);
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_cell(const std::string& cell, std::size_t row, const std::string& col) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (cell.empty() || ec != std::errc() || ptr != last || !std::isfinite(v))
    throw Error(ErrorKind::parse, "cannot parse value '" + cell + "' in column '" + col +
                                      "' at data row " + std::to_string(row));
  return v;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, ptr);
}

}  // namespace

Dataset::Dataset(RowMatrix covariates, std::vector<double> treatment,
                 std::optional<std::vector<double>> outcome,
                 std::vector<std::string> covariate_names, std::string treatment_name,
                 std::string outcome_name)
    : covariates_(std::move(covariates)),
      treatment_(std::move(treatment)),
      outcome_(std::move(outcome)),
      covariate_names_(std::move(covariate_names)),
      treatment_name_(std::move(treatment_name)),
      outcome_name_(std::move(outcome_name)) {
  const std::size_t n = treatment_.size();
  if (n == 0) throw Error(ErrorKind::empty_input, "dataset has no units");
  if (static_cast<std::size_t>(covariates_.rows()) != n && !(covariates_.cols() == 0))
    throw Error(ErrorKind::shape, "covariate rows do not match treatment length");
  if (covariates_.cols() == 0) covariates_.resize(static_cast<Eigen::Index>(n), 0);
  if (outcome_ && outcome_->size() != n)
    throw Error(ErrorKind::shape, "outcome length does not match treatment length");
  if (covariate_names_.empty())
    for (Eigen::Index j = 0; j < covariates_.cols(); ++j)
      covariate_names_.push_back("W" + std::to_string(j + 1));
  if (covariate_names_.size() != dim())
    throw Error(ErrorKind::shape, "covariate names do not match covariate columns");
  check_finite(treatment_, "treatment");
  check_finite({covariates_.data(), static_cast<std::size_t>(covariates_.size())}, "covariates");
  if (outcome_) check_finite(*outcome_, "outcome");
}

const std::vector<double>& Dataset::outcome() const {
  if (!outcome_) throw Error(ErrorKind::invalid_config, "dataset has no outcome column");
  return *outcome_;
}

Dataset Dataset::with_bounded_outcome() const {
  const auto& y = outcome();
  const auto [lo_it, hi_it] = std::minmax_element(y.begin(), y.end());
  if (*lo_it >= 0.0 && *hi_it <= 1.0) return *this;
  if (*hi_it == *lo_it) throw Error(ErrorKind::degenerate_response, "constant outcome");
  OutcomeBounds b{*lo_it, *hi_it};
  std::vector<double> scaled(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) scaled[i] = (y[i] - b.lo) / b.scale();
  Dataset out(covariates_, treatment_, std::move(scaled), covariate_names_, treatment_name_,
              outcome_name_);
  out.bounds_ = b;
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  RowMatrix w(static_cast<Eigen::Index>(rows.size()), covariates_.cols());
  std::vector<double> a(rows.size());
  std::optional<std::vector<double>> y;
  if (outcome_) y.emplace(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    w.row(static_cast<Eigen::Index>(k)) = covariates_.row(static_cast<Eigen::Index>(rows[k]));
    a[k] = treatment_[rows[k]];
    if (y) (*y)[k] = (*outcome_)[rows[k]];
  }
  Dataset out(std::move(w), std::move(a), std::move(y), covariate_names_, treatment_name_,
              outcome_name_);
  out.bounds_ = bounds_;
  return out;
}

Dataset load_csv(const std::string& path, const std::string& treatment_col,
                 const std::optional<std::string>& outcome_col,
                 const std::vector<std::string>& covariate_cols) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::empty_input, "cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line.find_first_not_of(" \r\t") == std::string::npos)
    throw Error(ErrorKind::empty_input, "'" + path + "' is empty");
  const auto header = split_line(line);

  auto find_col = [&](const std::string& name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end())
      throw Error(ErrorKind::named_column, "column '" + name + "' not found in '" + path + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t a_idx = find_col(treatment_col);
  std::optional<std::size_t> y_idx;
  if (outcome_col) y_idx = find_col(*outcome_col);
  std::vector<std::size_t> w_idx;
  std::vector<std::string> w_names;
  if (covariate_cols.empty()) {
    for (std::size_t j = 0; j < header.size(); ++j)
      if (j != a_idx && (!y_idx || j != *y_idx)) {
        w_idx.push_back(j);
        w_names.push_back(header[j]);
      }
  } else {
    for (const auto& name : covariate_cols) {
      w_idx.push_back(find_col(name));
      w_names.push_back(name);
    }
  }

  std::vector<double> a, y, w;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \r\t") == std::string::npos) continue;
    ++row;
    const auto cells = split_line(line);
    if (cells.size() != header.size())
      throw Error(ErrorKind::parse, "data row " + std::to_string(row) + " has " +
                                        std::to_string(cells.size()) + " fields, expected " +
                                        std::to_string(header.size()));
    a.push_back(parse_cell(cells[a_idx], row, header[a_idx]));
    if (y_idx) y.push_back(parse_cell(cells[*y_idx], row, header[*y_idx]));
    for (std::size_t j : w_idx) w.push_back(parse_cell(cells[j], row, header[j]));
  }
  if (a.empty()) throw Error(ErrorKind::empty_input, "'" + path + "' has no data rows");

  RowMatrix covs(static_cast<Eigen::Index>(a.size()), static_cast<Eigen::Index>(w_idx.size()));
  std::copy(w.begin(), w.end(), covs.data());
  std::optional<std::vector<double>> outcome;
  if (y_idx) outcome = std::move(y);
  return Dataset(std::move(covs), std::move(a), std::move(outcome), std::move(w_names),
                 treatment_col, outcome_col.value_or("Y"));
}

void write_csv(const Dataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::invalid_config, "cannot write '" + path + "'");
  std::string line;
  for (const auto& name : data.covariate_names()) line += name + ",";
  line += data.treatment_name();
  if (data.has_outcome()) line += "," + data.outcome_name();
  out << line << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    line.clear();
    for (double v : data.covariate_row(i)) line += format_double(v) + ",";
    line += format_double(data.treatment()[i]);
    if (data.has_outcome()) line += "," + format_double(data.outcome()[i]);
    out << line << '\n';
  }
}

std::vector<std::size_t> FoldAssignment::members(int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold_of_unit.size(); ++i)
    if (fold_of_unit[i] == fold) out.push_back(i);
  return out;
}

FoldAssignment split_folds(std::size_t n, int folds, std::uint64_t seed) {
  if (folds < 2 || static_cast<std::size_t>(folds) > n)
    throw Error(ErrorKind::invalid_fold, "need 2 <= V <= n, got V=" + std::to_string(folds) +
                                             " with n=" + std::to_string(n));
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  auto rng = make_rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  FoldAssignment fa;
  fa.folds = folds;
  fa.fold_of_unit.assign(n, 0);
  for (std::size_t k = 0; k < n; ++k)
    fa.fold_of_unit[perm[k]] = static_cast<int>(k % static_cast<std::size_t>(folds));
  return fa;
}

}  // namespace shiftipw::datacore
