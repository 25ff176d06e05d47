#include "shiftipw/selectors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace shiftipw::selectors {

const char* to_string(SelectorKind kind) {
  switch (kind) {
    case SelectorKind::global_cv: return "global-cv";
    case SelectorKind::dcar_min: return "dcar-min";
    case SelectorKind::dcar_tol: return "dcar-tol";
    case SelectorKind::lepski: return "lepski";
    case SelectorKind::plateau: return "plateau";
    case SelectorKind::hybrid: return "hybrid";
  }
  return "unknown";
}

SelectorKind selector_from_string(const std::string& name) {
  for (auto k : all_selectors())
    if (name == to_string(k)) return k;
  throw Error(ErrorKind::invalid_config, "unknown selector '" + name + "'");
}

const std::vector<SelectorKind>& all_selectors() {
  static const std::vector<SelectorKind> v{SelectorKind::global_cv, SelectorKind::dcar_min,
                                           SelectorKind::dcar_tol,  SelectorKind::lepski,
                                           SelectorKind::plateau,   SelectorKind::hybrid};
  return v;
}

SelectorTrace build_trace(const datacore::Dataset& data, const haldensify::CondDensityFamily& family,
                          const mtp::ResolvedRegime& regime,
                          const estimators::OutcomeValues& outcome, int threads) {
  if (family.size() == 0) throw Error(ErrorKind::invalid_config, "empty density family");
  const haldensify::FamilyTable table(family, data.covariates());
  SelectorTrace trace;
  trace.n = data.size();
  trace.records.resize(family.size());
  parallel_for(family.size(), threads, [&](std::size_t k) {
    const auto g = table.density(k);
    const auto dv = estimators::density_values(data, g, regime);
    const auto nv = estimators::combine(data, outcome, dv);
    const auto rep = estimators::ipw_report(nv, true);
    auto& r = trace.records[k];
    r.lambda = family.lambda_grid()[k];
    r.psi = rep.psi;
    r.se = rep.se;
    r.se_eif = rep.se_eif;
    r.pn_eif = rep.pn_eif;
    r.abs_pn_dcar = std::abs(rep.pn_dcar);
    r.l1_norm = family.l1_norm(k);
  });
  trace.sigma_cv = trace.records[0].se_eif;
  return trace;
}

SelectorTrace make_trace(std::vector<TraceRecord> records, std::size_t n, double sigma_cv) {
  if (records.empty()) throw Error(ErrorKind::invalid_config, "empty trace");
  SelectorTrace t;
  t.records = std::move(records);
  t.n = n;
  t.sigma_cv = sigma_cv;
  return t;
}

namespace {

SelectorChoice choose(SelectorKind kind, const SelectorTrace& trace, std::size_t index, bool fallback) {
  SelectorChoice c;
  c.kind = kind;
  c.index = index;
  c.psi = trace.records.at(index).psi;
  c.se = trace.records.at(index).se;
  c.fallback = fallback;
  return c;
}

double z_quantile(double alpha) { return normal_quantile(1.0 - alpha / 2.0); }

SelectorTrace prefix(const SelectorTrace& t, std::size_t count) {
  SelectorTrace out = t;
  out.records.resize(std::min(count, t.size()));
  return out;
}

}  // namespace

SelectorChoice select_global_cv(const SelectorTrace& trace) {
  return choose(SelectorKind::global_cv, trace, 0, false);
}

SelectorChoice select_dcar_min(const SelectorTrace& trace) {
  std::vector<double> v;
  for (const auto& r : trace.records) v.push_back(r.abs_pn_dcar);
  auto c = choose(SelectorKind::dcar_min, trace, argmin_first(v), false);
  c.diagnostics["abs_pn_dcar"] = v[c.index];
  return c;
}

SelectorChoice select_dcar_tolerance(const SelectorTrace& trace) {
  const double threshold = trace.sigma_cv / std::log(static_cast<double>(trace.n));
  for (std::size_t k = 0; k < trace.size(); ++k)
    if (trace.records[k].abs_pn_dcar < threshold) {
      auto c = choose(SelectorKind::dcar_tol, trace, k, false);
      c.diagnostics["threshold"] = threshold;
      c.diagnostics["abs_pn_dcar"] = trace.records[k].abs_pn_dcar;
      return c;
    }
  auto c = select_dcar_min(trace);
  c.kind = SelectorKind::dcar_tol;
  c.fallback = true;
  c.diagnostics["threshold"] = threshold;
  return c;
}

SelectorChoice select_lepski(const SelectorTrace& trace, double alpha) {
  const double scale = z_quantile(alpha) / std::log(static_cast<double>(trace.n));
  const auto& r = trace.records;
  for (std::size_t j = 0; j + 1 < r.size(); ++j)
    if (std::abs(r[j + 1].psi - r[j].psi) <= scale * std::abs(r[j + 1].se - r[j].se)) {
      auto c = choose(SelectorKind::lepski, trace, j, false);
      c.diagnostics["alpha"] = alpha;
      return c;
    }
  auto c = choose(SelectorKind::lepski, trace, r.size() - 1, r.size() > 1);
  c.diagnostics["alpha"] = alpha;
  return c;
}

std::vector<double> loess(std::span<const double> x, std::span<const double> y, double span) {
  const std::size_t m = x.size();
  if (y.size() != m) throw Error(ErrorKind::shape, "loess inputs differ in length");
  if (!(span > 0)) throw Error(ErrorKind::invalid_config, "loess span must be positive");
  std::vector<double> out(m);
  if (m == 0) return out;
  const std::size_t q = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(span * m)), 1, m);
  std::vector<double> dist(m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) dist[j] = std::abs(x[j] - x[i]);
    std::vector<double> sorted = dist;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(q - 1), sorted.end());
    double h = sorted[q - 1];
    if (span > 1) h *= span;
    double sw = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t j = 0; j < m; ++j) {
      double wt;
      if (h > 0) {
        const double u = dist[j] / h;
        wt = u < 1 ? std::pow(1 - u * u * u, 3) : 0.0;
      } else {
        wt = dist[j] == 0 ? 1.0 : 0.0;
      }
      if (wt == 0) continue;
      const double dx = x[j] - x[i];
      sw += wt;
      sx += wt * dx;
      sy += wt * y[j];
      sxx += wt * dx * dx;
      sxy += wt * dx * y[j];
    }
    // Intercept of the weighted line centred at x_i.
    const double det = sw * sxx - sx * sx;
    out[i] = det > 1e-12 * sw * sxx && sxx > 0 ? (sxx * sy - sx * sxy) / det : sy / sw;
  }
  return out;
}

std::optional<std::size_t> first_inflection(std::span<const double> y, std::span<const double> x) {
  if (!x.empty() && x.size() != y.size()) throw Error(ErrorKind::shape, "inflection inputs differ in length");
  // Points with a repeated abscissa carry no slope information.
  std::vector<std::size_t> keep;
  for (std::size_t j = 0; j < y.size(); ++j)
    if (x.empty() || keep.empty() || x[j] > x[keep.back()]) keep.push_back(j);
  if (keep.size() < 4) return std::nullopt;
  auto at = [&](std::size_t k) { return x.empty() ? static_cast<double>(keep[k]) : x[keep[k]]; };
  std::vector<double> slope(keep.size() - 1);
  double scale = 0.0;
  for (std::size_t k = 0; k + 1 < keep.size(); ++k) {
    slope[k] = (y[keep[k + 1]] - y[keep[k]]) / (at(k + 1) - at(k));
    scale = std::max(scale, std::abs(slope[k]));
  }
  for (double v : y) scale = std::max(scale, std::abs(v));
  const double tol = 1e-10 * std::max(scale, 1e-300);
  int last = 0;
  for (std::size_t k = 1; k < slope.size(); ++k) {
    const double d2 = slope[k] - slope[k - 1];
    const int s = d2 > tol ? 1 : (d2 < -tol ? -1 : 0);
    if (s == 0) continue;
    if (last != 0 && s != last) return keep[k];
    last = s;
  }
  return std::nullopt;
}

SelectorChoice select_smoothed_plateau(const SelectorTrace& trace, const PlateauParams& p) {
  const auto& r = trace.records;
  const double half = z_quantile(p.alpha) * r[0].se;
  const double l1_cap = p.k_max * r[0].l1_norm;
  std::size_t m = 0;
  while (m < r.size() && std::abs(r[m].psi - r[0].psi) <= half && r[m].l1_norm <= l1_cap) ++m;
  m = std::max<std::size_t>(m, 1);
  std::vector<double> x(m), y(m);
  for (std::size_t k = 0; k < m; ++k) {
    x[k] = r[k].l1_norm;
    y[k] = r[k].psi;
  }
  const auto smooth = loess(x, y, p.span);
  const auto tau = first_inflection(smooth, x);
  auto c = choose(SelectorKind::plateau, trace, tau.value_or(0), !tau.has_value());
  c.diagnostics["window"] = static_cast<double>(m);
  c.diagnostics["k_max"] = p.k_max;
  c.diagnostics["span"] = p.span;
  c.diagnostics["alpha"] = p.alpha;
  return c;
}

SelectorChoice select_hybrid(const SelectorTrace& trace, const PlateauParams& p) {
  const auto stop = select_dcar_min(trace);
  auto c = select_smoothed_plateau(prefix(trace, stop.index + 1), p);
  c.kind = SelectorKind::hybrid;
  c.diagnostics["dcar_min_index"] = static_cast<double>(stop.index);
  return c;
}

SelectorChoice select(SelectorKind kind, const SelectorTrace& trace, const PlateauParams& p) {
  if (trace.size() == 0) throw Error(ErrorKind::invalid_config, "empty trace");
  switch (kind) {
    case SelectorKind::global_cv: return select_global_cv(trace);
    case SelectorKind::dcar_min: return select_dcar_min(trace);
    case SelectorKind::dcar_tol: return select_dcar_tolerance(trace);
    case SelectorKind::lepski: return select_lepski(trace, p.alpha);
    case SelectorKind::plateau: return select_smoothed_plateau(trace, p);
    case SelectorKind::hybrid: return select_hybrid(trace, p);
  }
  throw Error(ErrorKind::invalid_config, "unknown selector");
}

}  // namespace shiftipw::selectors
