#include "shiftipw/hal.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <unordered_map>

namespace shiftipw::hal {

const char* to_string(Loss loss) {
  return loss == Loss::logistic ? "logistic" : "squared_error";
}

Loss loss_from_string(const std::string& name) {
  if (name == "logistic") return Loss::logistic;
  if (name == "squared_error") return Loss::squared_error;
  throw Error(ErrorKind::invalid_config, "unknown loss '" + name + "'");
}

bool BasisFunction::evaluate(std::span<const double> z) const {
  for (std::size_t k = 0; k < subset.size(); ++k)
    if (!(z[static_cast<std::size_t>(subset[k])] >= knots[k])) return false;
  return true;
}

BasisSet::BasisSet(std::vector<BasisFunction> bases, int dim) : bases_(std::move(bases)), dim_(dim) {
  grid_.assign(static_cast<std::size_t>(dim), {});
  for (const auto& b : bases_) {
    if (b.subset.empty() || b.subset.size() != b.knots.size())
      throw Error(ErrorKind::invalid_config, "basis needs a nonempty subset with one knot each");
    for (std::size_t k = 0; k < b.subset.size(); ++k) {
      if (b.subset[k] < 0 || b.subset[k] >= dim || (k > 0 && b.subset[k] <= b.subset[k - 1]))
        throw Error(ErrorKind::invalid_config, "basis subset must be increasing indices below d");
      if (!std::isfinite(b.knots[k])) throw Error(ErrorKind::numeric, "non-finite knot");
      grid_[static_cast<std::size_t>(b.subset[k])].push_back(b.knots[k]);
    }
  }
  for (auto& g : grid_) {
    std::sort(g.begin(), g.end());
    g.erase(std::unique(g.begin(), g.end()), g.end());
  }
  knot_index_.reserve(bases_.size());
  for (const auto& b : bases_) {
    std::vector<std::uint32_t> idx(b.subset.size());
    for (std::size_t k = 0; k < b.subset.size(); ++k) {
      const auto& g = grid_[static_cast<std::size_t>(b.subset[k])];
      idx[k] = static_cast<std::uint32_t>(std::lower_bound(g.begin(), g.end(), b.knots[k]) - g.begin());
    }
    knot_index_.push_back(std::move(idx));
  }
  std::vector<std::size_t> order(bases_.size());
  std::iota(order.begin(), order.end(), 0);
  auto key_less = [&](std::size_t a, std::size_t b) {
    if (bases_[a].subset != bases_[b].subset) return bases_[a].subset < bases_[b].subset;
    return knot_index_[a] < knot_index_[b];
  };
  std::sort(order.begin(), order.end(), key_less);
  for (std::size_t k = 1; k < order.size(); ++k)
    if (!key_less(order[k - 1], order[k]))
      throw Error(ErrorKind::invalid_config, "duplicate (subset, knot) basis");
}

namespace {

void for_each_subset(int d, int size, const std::function<void(const std::vector<int>&)>& fn) {
  std::vector<int> s(static_cast<std::size_t>(size));
  std::iota(s.begin(), s.end(), 0);
  for (;;) {
    fn(s);
    int k = size - 1;
    while (k >= 0 && s[static_cast<std::size_t>(k)] == d - size + k) --k;
    if (k < 0) return;
    ++s[static_cast<std::size_t>(k)];
    for (int m = k + 1; m < size; ++m) s[static_cast<std::size_t>(m)] = s[static_cast<std::size_t>(m - 1)] + 1;
  }
}

}  // namespace

BasisSet enumerate_bases(const RowMatrix& data, int max_degree, int knots_per_covariate) {
  if (max_degree < 1) throw Error(ErrorKind::invalid_config, "max_degree must be >= 1");
  const auto n = static_cast<std::size_t>(data.rows());
  const int d = static_cast<int>(data.cols());
  if (n == 0) throw Error(ErrorKind::empty_input, "cannot enumerate bases without rows");
  for (Eigen::Index k = 0; k < data.size(); ++k)
    if (!std::isfinite(data.data()[k])) throw Error(ErrorKind::numeric, "non-finite basis data");

  std::vector<std::vector<double>> retained(static_cast<std::size_t>(d));
  std::vector<std::vector<std::uint32_t>> snapped(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j) {
    std::vector<double> col(n);
    for (std::size_t i = 0; i < n; ++i) col[i] = data(static_cast<Eigen::Index>(i), j);
    std::vector<double> sorted = col;
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> uniq = sorted;
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    auto& keep = retained[static_cast<std::size_t>(j)];
    if (knots_per_covariate > 0 && uniq.size() > static_cast<std::size_t>(knots_per_covariate)) {
      const auto K = static_cast<std::size_t>(knots_per_covariate);
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t pos =
            K == 1 ? 0
                   : static_cast<std::size_t>(std::llround(static_cast<double>(k) *
                                                           static_cast<double>(n - 1) /
                                                           static_cast<double>(K - 1)));
        keep.push_back(sorted[pos]);
      }
      keep.erase(std::unique(keep.begin(), keep.end()), keep.end());
    } else {
      keep = std::move(uniq);
    }
    auto& snap = snapped[static_cast<std::size_t>(j)];
    snap.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      snap[i] = static_cast<std::uint32_t>(std::upper_bound(keep.begin(), keep.end(), col[i]) -
                                           keep.begin() - 1);
  }

  std::vector<BasisFunction> bases;
  for (int m = 1; m <= std::min(max_degree, d); ++m) {
    for_each_subset(d, m, [&](const std::vector<int>& s) {
      std::vector<std::vector<std::uint32_t>> tuples(n, std::vector<std::uint32_t>(s.size()));
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < s.size(); ++k)
          tuples[i][k] = snapped[static_cast<std::size_t>(s[k])][i];
      std::sort(tuples.begin(), tuples.end());
      tuples.erase(std::unique(tuples.begin(), tuples.end()), tuples.end());
      for (const auto& t : tuples) {
        BasisFunction b;
        b.subset = s;
        for (std::size_t k = 0; k < s.size(); ++k)
          b.knots.push_back(retained[static_cast<std::size_t>(s[k])][t[k]]);
        bases.push_back(std::move(b));
      }
    });
  }
  return BasisSet(std::move(bases), d);
}

BinaryDesign BinaryDesign::from_dense(const Eigen::MatrixXd& x) {
  BinaryDesign out;
  out.rows_ = static_cast<std::size_t>(x.rows());
  out.col_start_.push_back(0);
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double v = x(i, j);
      if (!std::isfinite(v)) throw Error(ErrorKind::numeric, "non-finite design entry");
      if (v != 0.0 && v != 1.0) throw Error(ErrorKind::numeric, "design entries must be 0 or 1");
      if (v == 1.0) out.row_index_.push_back(static_cast<std::uint32_t>(i));
    }
    out.col_start_.push_back(out.row_index_.size());
    out.direct_cols_.push_back(static_cast<std::uint32_t>(j));
  }
  return out;
}

Eigen::MatrixXd BinaryDesign::dense() const {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows_),
                                            static_cast<Eigen::Index>(cols()));
  for (std::size_t j = 0; j < cols(); ++j)
    for (auto i : column(j)) m(i, static_cast<Eigen::Index>(j)) = 1.0;
  return m;
}

void BinaryDesign::transpose_times(std::span<const double> r, std::span<double> out) const {
  for (auto j : direct_cols_) {
    double s = 0.0;
    for (auto i : column(j)) s += r[i];
    out[j] = s;
  }
  std::vector<double> buf;
  for (const auto& g : groups_) {
    buf.assign(g.cells, 0.0);
    for (std::size_t i = 0; i < rows_; ++i) buf[g.row_cell[i]] += r[i];
    std::size_t stride = 1;
    for (std::size_t a = 0; a < g.extent.size(); ++a) {
      const std::size_t e = g.extent[a];
      for (std::size_t x = g.cells; x-- > 0;)
        if ((x / stride) % e != e - 1) buf[x] += buf[x + stride];
      stride *= e;
    }
    for (const auto& [b, c] : g.basis_cell) out[b] = buf[c];
  }
}

BinaryDesign BinaryDesign::select_rows(std::span<const std::uint32_t> rows) const {
  // A row may be listed more than once.
  std::vector<std::vector<std::uint32_t>> pos(rows_);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= rows_) throw Error(ErrorKind::shape, "row index out of range");
    pos[rows[k]].push_back(static_cast<std::uint32_t>(k));
  }
  BinaryDesign out;
  out.rows_ = rows.size();
  out.col_start_.reserve(col_start_.size());
  out.col_start_.push_back(0);
  std::vector<std::uint32_t> buf;
  for (std::size_t j = 0; j < cols(); ++j) {
    buf.clear();
    for (auto i : column(j)) buf.insert(buf.end(), pos[i].begin(), pos[i].end());
    std::sort(buf.begin(), buf.end());
    out.row_index_.insert(out.row_index_.end(), buf.begin(), buf.end());
    out.col_start_.push_back(out.row_index_.size());
  }
  out.direct_cols_ = direct_cols_;
  for (const auto& g : groups_) {
    Group h = g;
    h.row_cell.resize(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) h.row_cell[k] = g.row_cell[rows[k]];
    out.groups_.push_back(std::move(h));
  }
  return out;
}

BinaryDesign evaluate_design(const BasisSet& bases, const RowMatrix& points) {
  if (points.cols() != bases.dim())
    throw Error(ErrorKind::shape, "points have dimension " + std::to_string(points.cols()) +
                                      ", bases expect " + std::to_string(bases.dim()));
  const auto n = static_cast<std::size_t>(points.rows());
  for (Eigen::Index k = 0; k < points.size(); ++k)
    if (!std::isfinite(points.data()[k])) throw Error(ErrorKind::numeric, "non-finite point");
  const auto& grid = bases.knot_grid();
  std::vector<std::vector<std::uint32_t>> rank(grid.size());
  for (std::size_t j = 0; j < grid.size(); ++j) {
    if (grid[j].empty()) continue;
    rank[j].resize(n);
    for (std::size_t i = 0; i < n; ++i)
      rank[j][i] = static_cast<std::uint32_t>(
          std::upper_bound(grid[j].begin(), grid[j].end(), points(static_cast<Eigen::Index>(i),
                                                                  static_cast<Eigen::Index>(j))) -
          grid[j].begin());
  }

  BinaryDesign out;
  out.rows_ = n;
  out.col_start_.reserve(bases.size() + 1);
  out.col_start_.push_back(0);
  const auto& fns = bases.bases();
  const auto& kidx = bases.knot_index();
  std::map<std::vector<int>, std::vector<std::uint32_t>> by_subset;
  for (std::size_t b = 0; b < fns.size(); ++b) {
    const auto& s = fns[b].subset;
    by_subset[s].push_back(static_cast<std::uint32_t>(b));
    const auto& m = kidx[b];
    if (s.size() == 1) {
      const auto& r0 = rank[static_cast<std::size_t>(s[0])];
      for (std::size_t i = 0; i < n; ++i)
        if (r0[i] > m[0]) out.row_index_.push_back(static_cast<std::uint32_t>(i));
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        bool on = true;
        for (std::size_t k = 0; k < s.size() && on; ++k)
          on = rank[static_cast<std::size_t>(s[k])][i] > m[k];
        if (on) out.row_index_.push_back(static_cast<std::uint32_t>(i));
      }
    }
    out.col_start_.push_back(out.row_index_.size());
  }

  for (const auto& [s, members] : by_subset) {
    BinaryDesign::Group g;
    std::size_t cells = 1;
    bool fits = true;
    for (int j : s) {
      g.extent.push_back(grid[static_cast<std::size_t>(j)].size() + 1);
      cells *= g.extent.back();
      if (cells > (std::size_t{1} << 26)) fits = false;
    }
    std::size_t nnz = 0;
    for (auto b : members) nnz += out.col_start_[b + 1] - out.col_start_[b];
    if (!fits || cells * s.size() > nnz + n) {
      out.direct_cols_.insert(out.direct_cols_.end(), members.begin(), members.end());
      continue;
    }
    g.cells = cells;
    g.row_cell.assign(n, 0);
    std::size_t stride = 1;
    for (std::size_t k = 0; k < s.size(); ++k) {
      const auto& rk = rank[static_cast<std::size_t>(s[k])];
      for (std::size_t i = 0; i < n; ++i) g.row_cell[i] += static_cast<std::uint32_t>(rk[i] * stride);
      stride *= g.extent[k];
    }
    for (auto b : members) {
      std::size_t cell = 0, st = 1;
      for (std::size_t k = 0; k < s.size(); ++k) {
        cell += (kidx[b][k] + 1) * st;
        st *= g.extent[k];
      }
      g.basis_cell.emplace_back(b, static_cast<std::uint32_t>(cell));
    }
    out.groups_.push_back(std::move(g));
  }
  return out;
}

LassoPath LassoPath::slice(std::size_t first, std::size_t count) const {
  LassoPath p;
  p.loss = loss;
  p.n_features = n_features;
  for (std::size_t k = first; k < first + count && k < size(); ++k) {
    p.lambdas.push_back(lambdas[k]);
    p.intercepts.push_back(intercepts[k]);
    p.coefficients.push_back(coefficients[k]);
  }
  return p;
}

double pointwise_loss(Loss loss, double y, double eta) {
  if (loss == Loss::squared_error) return 0.5 * (y - eta) * (y - eta);
  const double softplus = eta > 0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta));
  return softplus - y * eta;
}

namespace {

struct Problem {
  const BinaryDesign& x;
  std::span<const double> y;
  std::vector<double> omega;  // weights normalized to sum 1
  Loss loss;
};

Problem make_problem(const BinaryDesign& x, std::span<const double> y, std::span<const double> w,
                     Loss loss) {
  const std::size_t n = x.rows();
  if (y.size() != n) throw Error(ErrorKind::shape, "response length does not match design rows");
  if (!w.empty() && w.size() != n) throw Error(ErrorKind::shape, "weight length does not match design rows");
  Problem p{x, y, std::vector<double>(n, 1.0), loss};
  if (!w.empty()) std::copy(w.begin(), w.end(), p.omega.begin());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(y[i])) throw Error(ErrorKind::numeric, "non-finite response");
    if (!std::isfinite(p.omega[i]) || p.omega[i] < 0)
      throw Error(ErrorKind::numeric, "weights must be finite and nonnegative");
    if (loss == Loss::logistic && (y[i] < 0.0 || y[i] > 1.0))
      throw Error(ErrorKind::invalid_config, "logistic loss needs responses in [0,1]");
    total += p.omega[i];
  }
  if (!(total > 0)) throw Error(ErrorKind::empty_input, "all observation weights are zero");
  for (double& v : p.omega) v /= total;
  return p;
}

double weighted_mean(const Problem& p) {
  double m = 0.0;
  for (std::size_t i = 0; i < p.y.size(); ++i) m += p.omega[i] * p.y[i];
  return m;
}

double null_intercept(const Problem& p) {
  const double m = weighted_mean(p);
  if (p.loss == Loss::squared_error) return m;
  bool all_zero = true, all_one = true;
  for (std::size_t i = 0; i < p.y.size(); ++i) {
    if (p.omega[i] <= 0) continue;
    all_zero = all_zero && p.y[i] == 0.0;
    all_one = all_one && p.y[i] == 1.0;
  }
  if (all_zero || all_one)
    throw Error(ErrorKind::degenerate_response, "logistic response is constant");
  return logit(m);
}

// Minimizes 0.5 b'Hb - c'b + lambda * sum_{j>=1} |b_j| (b_0 unpenalized) by
// feature-sign search: sign-fixed exact solves on the nonzero set followed
// by a discrete line search over sign changes.  Terminates finitely and
// never increases the objective.
double kkt_slack(double lambda) { return 1e-10 + 1e-8 * lambda; }

Eigen::VectorXd feature_sign(const Eigen::MatrixXd& H, const Eigen::VectorXd& c, double lambda,
                             Eigen::VectorXd b) {
  const Eigen::Index m = H.rows();
  const double tol = kkt_slack(lambda);
  auto objective = [&](const Eigen::VectorXd& x) {
    return 0.5 * x.dot(H * x) - c.dot(x) + lambda * x.tail(m - 1).lpNorm<1>();
  };
  std::vector<int> theta(static_cast<std::size_t>(m), 0);
  for (Eigen::Index j = 1; j < m; ++j) theta[j] = (b[j] > 0) - (b[j] < 0);
  double f_cur = objective(b);
  bool need_step = true;
  int stalls = 0;
  const double ridge = 1e-11 * (1.0 + H.diagonal().maxCoeff());
  for (Eigen::Index iter = 0; iter < 20 * m + 200; ++iter) {
    if (need_step) {
      std::vector<Eigen::Index> S{0};
      for (Eigen::Index j = 1; j < m; ++j)
        if (theta[j] != 0) S.push_back(j);
      const auto s = static_cast<Eigen::Index>(S.size());
      Eigen::MatrixXd Hs(s, s);
      Eigen::VectorXd rhs(s), cur(s);
      for (Eigen::Index a = 0; a < s; ++a) {
        for (Eigen::Index k = 0; k < s; ++k) Hs(a, k) = H(S[a], S[k]);
        Hs(a, a) += ridge;
        rhs[a] = c[S[a]] - lambda * theta[S[a]];
        cur[a] = b[S[a]];
      }
      Eigen::VectorXd x;
      Eigen::LLT<Eigen::MatrixXd> llt(Hs);
      if (llt.info() == Eigen::Success)
        x = llt.solve(rhs);
      else
        x = Hs.ldlt().solve(rhs);
      if (!x.allFinite()) break;
      // Along b + t*d the smooth part is an exact quadratic in t, so the
      // candidates (sign-fixed optimum and every zero crossing) are scored
      // without touching H again.
      const Eigen::VectorXd d = x - cur;
      Eigen::VectorXd g(s);
      const Eigen::VectorXd hb = H * b;
      for (Eigen::Index a = 0; a < s; ++a) g[a] = hb[S[a]] - c[S[a]];
      const double gd = g.dot(d), dhd = d.dot(Hs * d) - ridge * d.squaredNorm();
      const double l1_rest = b.tail(m - 1).lpNorm<1>() - cur.tail(s - 1).lpNorm<1>();
      auto line_value = [&](double t) {
        return f_cur - lambda * b.tail(m - 1).lpNorm<1>() + t * gd + 0.5 * t * t * dhd +
               lambda * (l1_rest + (cur.tail(s - 1) + t * d.tail(s - 1)).lpNorm<1>());
      };
      std::vector<double> ts{1.0};
      for (Eigen::Index a = 1; a < s; ++a)
        if (cur[a] != 0.0 && (x[a] > 0) != (cur[a] > 0)) ts.push_back(cur[a] / (cur[a] - x[a]));
      double t_best = 0.0, v_best = f_cur;
      for (double t : ts) {
        const double v = line_value(t);
        if (v < v_best) {
          v_best = v;
          t_best = t;
        }
      }
      Eigen::VectorXd best = b;
      double f_best = f_cur;
      if (t_best > 0.0) {
        for (Eigen::Index a = 0; a < s; ++a) {
          double v = cur[a] + t_best * d[a];
          if (a > 0 && t_best != 1.0 && cur[a] != 0.0 && cur[a] / (cur[a] - x[a]) == t_best) v = 0.0;
          best[S[a]] = v;
        }
        f_best = objective(best);
      }
      need_step = false;
      if (f_best < f_cur) {
        stalls = 0;
        b = std::move(best);
        f_cur = f_best;
      } else {
        // A rank-deficient sign-fixed system can overshoot; one exact
        // coordinate pass still makes progress whenever KKT fails.
        Eigen::VectorXd trial = b;
        Eigen::VectorXd r = H * trial - c;
        for (Eigen::Index j = 0; j < m; ++j) {
          const double hjj = H(j, j);
          if (!(hjj > 0)) continue;
          const double z = trial[j] - r[j] / hjj;
          const double v = j == 0 ? z : std::copysign(std::max(std::abs(z) - lambda / hjj, 0.0), z);
          if (v != trial[j]) {
            r += H.col(j) * (v - trial[j]);
            trial[j] = v;
          }
        }
        const double f = objective(trial);
        if (f < f_cur) {
          stalls = 0;
          b = std::move(trial);
          f_cur = f;
        } else if (++stalls >= 2) {
          break;
        }
      }
      for (Eigen::Index j = 1; j < m; ++j) theta[j] = (b[j] > 0) - (b[j] < 0);
    }
    const Eigen::VectorXd grad = H * b - c;
    bool nonzero_ok = std::abs(grad[0]) <= tol;
    for (Eigen::Index j = 1; j < m && nonzero_ok; ++j)
      if (theta[j] != 0) nonzero_ok = std::abs(grad[j] + lambda * theta[j]) <= tol;
    if (!nonzero_ok) {
      need_step = true;
      continue;
    }
    Eigen::Index worst = -1;
    double worst_g = lambda + tol;
    for (Eigen::Index j = 1; j < m; ++j)
      if (theta[j] == 0 && std::abs(grad[j]) > worst_g) {
        worst_g = std::abs(grad[j]);
        worst = j;
      }
    if (worst < 0) break;
    theta[worst] = grad[worst] > 0 ? -1 : 1;
    need_step = true;
  }
  return b;
}

class Solver {
 public:
  Solver(const Problem& p, const SolverOptions& opt)
      : p_(p), opt_(opt), n_(p.x.rows()), m_(p.x.cols()), beta_(m_, 0.0), in_work_(m_, 0),
        eta_(n_), mu_(n_), grad_(m_) {
    b0_ = null_intercept(p_);
    std::fill(eta_.begin(), eta_.end(), b0_);
    live_pos_.assign(n_, -1);
    for (std::size_t i = 0; i < n_; ++i)
      if (p_.omega[i] > 0) {
        live_pos_[i] = static_cast<Eigen::Index>(live_.size());
        live_.push_back(i);
      }
    refresh_mean();
  }

  double lambda_max() {
    full_gradient();
    double mx = 0.0;
    for (double g : grad_) mx = std::max(mx, std::abs(g));
    return mx;
  }

  void solve(double lambda) {
    prune();
    for (int round = 0; round < 1000; ++round) {
      newton(lambda);
      full_gradient();
      bool added = false;
      for (std::size_t j = 0; j < m_; ++j)
        if (!in_work_[j] && std::abs(grad_[j]) > lambda + kkt_slack(lambda)) {
          in_work_[j] = 1;
          work_.push_back(static_cast<std::uint32_t>(j));
          added = true;
        }
      if (!added) return;
    }
  }

  double intercept() const { return b0_; }
  SparseCoefs coefficients() const {
    SparseCoefs out;
    for (auto j : work_)
      if (beta_[j] != 0.0) out.emplace_back(j, beta_[j]);
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  void refresh_mean() {
    if (p_.loss == Loss::squared_error)
      mu_ = eta_;
    else
      for (std::size_t i = 0; i < n_; ++i) mu_[i] = expit(eta_[i]);
  }

  void full_gradient() {
    std::vector<double> r(n_);
    for (std::size_t i = 0; i < n_; ++i) r[i] = p_.omega[i] * (p_.y[i] - mu_[i]);
    p_.x.transpose_times(r, grad_);
  }

  double objective(std::span<const double> eta, double lambda, const Eigen::VectorXd& b) const {
    double f = 0.0;
    for (std::size_t i = 0; i < n_; ++i)
      if (p_.omega[i] > 0) f += p_.omega[i] * pointwise_loss(p_.loss, p_.y[i], eta[i]);
    return f + lambda * b.tail(b.size() - 1).lpNorm<1>();
  }

  // Newton steps on the working set; each quadratic model is minimized
  // exactly and, for logistic loss, the step is backtracked until the
  // penalized risk does not increase.
  void newton(double lambda) {
    // Zero-weight rows (held-out folds) never enter the quadratic model.
    const auto L = static_cast<Eigen::Index>(live_.size());
    const auto w = static_cast<Eigen::Index>(work_.size()) + 1;
    Eigen::MatrixXd X = Eigen::MatrixXd::Zero(L, w);
    X.col(0).setOnes();
    for (Eigen::Index a = 1; a < w; ++a)
      for (auto i : p_.x.column(work_[static_cast<std::size_t>(a - 1)]))
        if (live_pos_[i] >= 0) X(live_pos_[i], a) = 1.0;
    Eigen::VectorXd bcur(w);
    bcur[0] = b0_;
    for (Eigen::Index a = 1; a < w; ++a) bcur[a] = beta_[work_[static_cast<std::size_t>(a - 1)]];
    Eigen::VectorXd sv(L), q(L);
    std::vector<double> eta_try = eta_;
    const int iterations = p_.loss == Loss::squared_error ? 1 : opt_.max_newton;
    for (int it = 0; it < iterations; ++it) {
      for (Eigen::Index r = 0; r < L; ++r) {
        const std::size_t i = live_[static_cast<std::size_t>(r)];
        const double om = p_.omega[i];
        const double v = p_.loss == Loss::squared_error
                             ? om
                             : om * std::max(mu_[i] * (1 - mu_[i]), 1e-10);
        sv[r] = std::sqrt(v);
        q[r] = om * (p_.y[i] - mu_[i]);
      }
      const Eigen::MatrixXd Xs = sv.asDiagonal() * X;
      Eigen::MatrixXd H = Eigen::MatrixXd::Zero(w, w);
      H.selfadjointView<Eigen::Lower>().rankUpdate(Xs.transpose());
      H.triangularView<Eigen::Upper>() = H.transpose();
      const Eigen::VectorXd c = X.transpose() * q + H * bcur;
      const Eigen::VectorXd bnew = feature_sign(H, c, lambda, bcur);
      const Eigen::VectorXd step = bnew - bcur;
      const Eigen::VectorXd deta = X * step;
      double t = 1.0;
      if (p_.loss == Loss::logistic) {
        const double f0 = objective(eta_, lambda, bcur);
        bool accepted = false;
        for (int halve = 0; halve < 40; ++halve) {
          for (Eigen::Index r = 0; r < L; ++r) {
            const std::size_t i = live_[static_cast<std::size_t>(r)];
            eta_try[i] = eta_[i] + t * deta[r];
          }
          if (objective(eta_try, lambda, bcur + t * step) <= f0 + 1e-15 * std::max(1.0, std::abs(f0))) {
            accepted = true;
            break;
          }
          t *= 0.5;
        }
        if (!accepted) break;
      }
      bcur += t * step;
      for (Eigen::Index r = 0; r < L; ++r) eta_[live_[static_cast<std::size_t>(r)]] += t * deta[r];
      refresh_mean();
      if (t * step.cwiseAbs().maxCoeff() < opt_.tolerance) break;
    }
    b0_ = bcur[0];
    for (Eigen::Index a = 1; a < w; ++a) beta_[work_[static_cast<std::size_t>(a - 1)]] = bcur[a];
  }

  // Zero coefficients left over from the previous lambda leave the working set.
  void prune() {
    std::vector<std::uint32_t> keep;
    for (auto j : work_) {
      if (beta_[j] != 0.0)
        keep.push_back(j);
      else
        in_work_[j] = 0;
    }
    work_.swap(keep);
  }

  const Problem& p_;
  SolverOptions opt_;
  std::size_t n_, m_;
  std::vector<double> beta_;
  std::vector<char> in_work_;
  std::vector<std::uint32_t> work_;
  std::vector<double> eta_, mu_, grad_;
  std::vector<std::size_t> live_;
  std::vector<Eigen::Index> live_pos_;
  double b0_ = 0.0;
};

void validate_grid(const std::vector<double>& lambdas) {
  if (lambdas.empty()) throw Error(ErrorKind::invalid_grid, "empty lambda grid");
  for (std::size_t k = 0; k < lambdas.size(); ++k) {
    if (!std::isfinite(lambdas[k]) || lambdas[k] < 0)
      throw Error(ErrorKind::invalid_grid, "lambdas must be finite and nonnegative");
    if (k > 0 && !(lambdas[k] < lambdas[k - 1]))
      throw Error(ErrorKind::invalid_grid, "lambdas must be strictly decreasing");
  }
}

}  // namespace

double lambda_max(const BinaryDesign& x, std::span<const double> y, std::span<const double> w,
                  Loss loss) {
  const Problem p = make_problem(x, y, w, loss);
  Solver s(p, {});
  return s.lambda_max();
}

namespace {

// Rows with identical design patterns are merged: weights add and the
// response becomes their weighted mean, which leaves both losses' penalized
// objectives unchanged up to a constant.
struct Collapsed {
  BinaryDesign x;
  std::vector<double> y, w;
};

std::optional<Collapsed> collapse_rows(const BinaryDesign& x, std::span<const double> y,
                                       std::span<const double> w, Loss loss) {
  const std::size_t n = x.rows();
  std::vector<std::uint64_t> h1(n, 0), h2(n, 0);
  std::mt19937_64 rng(0x5eed);
  for (std::size_t j = 0; j < x.cols(); ++j) {
    const std::uint64_t a = rng(), b = rng();
    for (auto i : x.column(j)) {
      h1[i] += a;
      h2[i] ^= b;
    }
  }
  std::vector<std::uint32_t> keep;
  std::vector<double> wsum, ysum;
  std::unordered_map<std::uint64_t, std::uint32_t> seen;
  for (std::size_t i = 0; i < n; ++i) {
    const double wi = w.empty() ? 1.0 : w[i];
    if (!(wi > 0)) continue;
    const std::uint64_t key = h1[i] * 0x9e3779b97f4a7c15ull ^ h2[i];
    auto [it, fresh] = seen.emplace(key, static_cast<std::uint32_t>(keep.size()));
    if (fresh) {
      keep.push_back(static_cast<std::uint32_t>(i));
      wsum.push_back(0.0);
      ysum.push_back(0.0);
    }
    wsum[it->second] += wi;
    ysum[it->second] += wi * y[i];
  }
  if (keep.size() == n) return std::nullopt;
  Collapsed c{x.select_rows(keep), std::move(ysum), std::move(wsum)};
  for (std::size_t g = 0; g < c.y.size(); ++g) {
    c.y[g] /= c.w[g];
    if (loss == Loss::logistic) c.y[g] = std::clamp(c.y[g], 0.0, 1.0);
  }
  return c;
}

}  // namespace

LassoPath fit_lasso_path(const BinaryDesign& x, std::span<const double> y,
                         std::span<const double> w, Loss loss, const LambdaGrid& grid,
                         const SolverOptions& opt) {
  make_problem(x, y, w, loss);  // validates the uncollapsed inputs
  const auto collapsed = collapse_rows(x, y, w, loss);
  const Problem p = collapsed ? make_problem(collapsed->x, collapsed->y, collapsed->w, loss)
                              : make_problem(x, y, w, loss);
  Solver solver(p, opt);
  std::vector<double> lambdas = grid.values;
  if (lambdas.empty()) {
    const double lmax = solver.lambda_max();
    if (grid.count == 0) throw Error(ErrorKind::invalid_grid, "auto grid needs a positive count");
    lambdas = lmax > 0 ? log_spaced_desc(lmax, lmax * grid.min_ratio, grid.count)
                       : std::vector<double>{0.0};
  }
  validate_grid(lambdas);
  LassoPath path;
  path.loss = loss;
  path.n_features = x.cols();
  for (double lam : lambdas) {
    solver.solve(lam);
    path.lambdas.push_back(lam);
    path.intercepts.push_back(solver.intercept());
    path.coefficients.push_back(solver.coefficients());
  }
  return path;
}

double l1_norm(const LassoPath& path, std::size_t k) {
  double s = std::abs(path.intercepts.at(k));
  for (const auto& [j, b] : path.coefficients.at(k)) s += std::abs(b);
  return s;
}

std::vector<double> linear_predictor(const LassoPath& path, std::size_t k, const BinaryDesign& x) {
  if (x.cols() != path.n_features) throw Error(ErrorKind::shape, "design does not match path features");
  std::vector<double> eta(x.rows(), path.intercepts.at(k));
  for (const auto& [j, b] : path.coefficients.at(k))
    for (auto i : x.column(j)) eta[i] += b;
  return eta;
}

std::vector<double> predict(const LassoPath& path, std::size_t k, const BinaryDesign& x,
                            Scale scale) {
  auto eta = linear_predictor(path, k, x);
  if (scale == Scale::response && path.loss == Loss::logistic)
    for (auto& e : eta) e = expit(e);
  return eta;
}

std::vector<double> predict(const LassoPath& path, const BasisSet& bases, std::size_t k,
                            const RowMatrix& points, Scale scale) {
  return predict(path, k, evaluate_design(bases, points), scale);
}

std::vector<double> weighted_gradient(const BinaryDesign& x, std::span<const double> y,
                                      std::span<const double> w, Loss loss,
                                      std::span<const double> eta) {
  const Problem p = make_problem(x, y, w, loss);
  std::vector<double> r(x.rows()), g(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double mu = loss == Loss::logistic ? expit(eta[i]) : eta[i];
    r[i] = p.omega[i] * (y[i] - mu);
  }
  x.transpose_times(r, g);
  return g;
}

CvResult cv_risk(const BinaryDesign& x, std::span<const double> y, std::span<const double> w,
                 Loss loss, std::span<const int> fold_of_row, int folds,
                 const std::vector<double>& lambdas, const SolverOptions& opt, int threads) {
  if (folds < 2) throw Error(ErrorKind::invalid_fold, "cross-validation needs at least 2 folds");
  if (fold_of_row.size() != x.rows()) throw Error(ErrorKind::shape, "fold ids do not match rows");
  validate_grid(lambdas);
  const std::size_t n = x.rows();
  std::vector<double> base_w(n, 1.0);
  if (!w.empty()) std::copy(w.begin(), w.end(), base_w.begin());

  std::vector<std::vector<double>> loss_sum(static_cast<std::size_t>(folds),
                                            std::vector<double>(lambdas.size(), 0.0));
  std::vector<double> held_weight(static_cast<std::size_t>(folds), 0.0);
  parallel_for(static_cast<std::size_t>(folds), threads, [&](std::size_t v) {
    std::vector<double> train_w(n, 0.0);
    bool has0 = false, has1 = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (fold_of_row[i] == static_cast<int>(v)) {
        held_weight[v] += base_w[i];
        continue;
      }
      train_w[i] = base_w[i];
      if (train_w[i] > 0) {
        has0 = has0 || y[i] != 1.0;
        has1 = has1 || y[i] != 0.0;
      }
    }
    if (loss == Loss::logistic && !(has0 && has1))
      throw Error(ErrorKind::degenerate_fold,
                  "training data outside fold " + std::to_string(v + 1) + " has a single class");
    const LassoPath path = fit_lasso_path(x, y, train_w, loss, LambdaGrid::explicit_values(lambdas), opt);
    for (std::size_t k = 0; k < path.size(); ++k) {
      const auto eta = linear_predictor(path, k, x);
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        if (fold_of_row[i] == static_cast<int>(v) && base_w[i] > 0)
          s += base_w[i] * pointwise_loss(loss, y[i], eta[i]);
      loss_sum[v][k] = s;
    }
  });
  CvResult out;
  out.risk.assign(lambdas.size(), 0.0);
  double total_w = 0.0;
  for (int v = 0; v < folds; ++v) total_w += held_weight[static_cast<std::size_t>(v)];
  for (std::size_t k = 0; k < lambdas.size(); ++k) {
    for (int v = 0; v < folds; ++v) out.risk[k] += loss_sum[static_cast<std::size_t>(v)][k];
    out.risk[k] /= total_w;
  }
  out.selected = argmin_first(out.risk);
  return out;
}

HalFit fit_hal_cv(const RowMatrix& x, std::span<const double> y, Loss loss, const HalConfig& cfg) {
  HalFit fit;
  fit.bases = enumerate_bases(x, cfg.basis);
  const BinaryDesign design = evaluate_design(fit.bases, x);
  const double lmax = lambda_max(design, y, {}, loss);
  const std::vector<double> grid =
      lmax > 0 ? log_spaced_desc(lmax, lmax * cfg.lambda_min_ratio, cfg.n_lambda)
               : std::vector<double>{0.0};
  const auto folds = datacore::split_folds(static_cast<std::size_t>(x.rows()), cfg.folds, cfg.seed);
  const CvResult cv = cv_risk(design, y, {}, loss, folds.fold_of_unit, cfg.folds, grid, cfg.solver,
                              cfg.threads);
  fit.cv_risk = cv.risk;
  fit.selected = cv.selected;
  const std::vector<double> prefix(grid.begin(), grid.begin() + static_cast<std::ptrdiff_t>(cv.selected) + 1);
  fit.path = fit_lasso_path(design, y, {}, loss, LambdaGrid::explicit_values(prefix), cfg.solver);
  return fit;
}

}  // namespace shiftipw::hal
