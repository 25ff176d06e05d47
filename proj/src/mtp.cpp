#include "shiftipw/mtp.hpp"

#include <cmath>

namespace shiftipw::mtp {

const char* to_string(ShiftKind kind) {
  return kind == ShiftKind::additive ? "additive" : "multiplicative";
}

ShiftKind shift_kind_from_string(const std::string& name) {
  if (name == "additive") return ShiftKind::additive;
  if (name == "multiplicative") return ShiftKind::multiplicative;
  throw Error(ErrorKind::invalid_config, "unknown shift type '" + name + "'");
}

const char* to_string(BoundRule rule) {
  switch (rule) {
    case BoundRule::empirical_max: return "empirical_max";
    case BoundRule::fixed: return "fixed";
    case BoundRule::none: return "none";
  }
  return "unknown";
}

void MtpRegime::validate() const {
  if (!std::isfinite(delta)) throw Error(ErrorKind::invalid_config, "shift must be finite");
  if (kind == ShiftKind::multiplicative && !(delta > 0))
    throw Error(ErrorKind::invalid_config, "multiplicative shift must be positive");
  if (rule == BoundRule::fixed && std::isnan(bound))
    throw Error(ErrorKind::invalid_config, "fixed upper bound is NaN");
}

double MtpRegime::upper_bound(std::span<const double> treatment) const {
  switch (rule) {
    case BoundRule::fixed: return bound;
    case BoundRule::none: return std::numeric_limits<double>::infinity();
    case BoundRule::empirical_max: break;
  }
  if (treatment.empty()) throw Error(ErrorKind::empty_input, "no treatment values for the bound");
  double mx = treatment[0];
  for (double a : treatment) mx = std::max(mx, a);
  return mx;
}

bool MtpRegime::is_identity() const {
  return kind == ShiftKind::additive ? delta == 0.0 : delta == 1.0;
}

ResolvedRegime resolve(const MtpRegime& regime, std::span<const double> treatment) {
  regime.validate();
  return {regime.kind, regime.delta, regime.upper_bound(treatment)};
}

double apply_regime(double a, const ResolvedRegime& r) {
  const double s = r.shifted(a);
  return s <= r.u ? s : a;
}

double post_density(const SampleDensity& g, std::size_t i, const ResolvedRegime& r, double a) {
  // Identity regimes short-circuit so that g-tilde equals g bit for bit.
  if ((r.kind == ShiftKind::additive && r.delta == 0.0) ||
      (r.kind == ShiftKind::multiplicative && r.delta == 1.0))
    return g(i, a);
  double v = 0.0;
  if (a <= r.u) v += r.inverse_derivative() * g(i, r.inverse(a));
  // Units at a stay put exactly when their shifted value would exceed u.
  if (r.shifted(a) > r.u) v += g(i, a);
  return v;
}

double weight_at(const SampleDensity& g, std::size_t i, const ResolvedRegime& r, double a) {
  const double den = std::max(g(i, a), kDensityFloor);
  return post_density(g, i, r, a) / den;
}

ShiftWeights weights(const SampleDensity& g, const ResolvedRegime& r,
                     std::span<const double> treatment) {
  const std::size_t n = treatment.size();
  if (g.size() != n) throw Error(ErrorKind::shape, "density sample does not match treatment length");
  ShiftWeights out;
  out.raw.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double gi = g(i, treatment[i]);
    if (gi < kDensityFloor) ++out.floored;
    out.raw[i] = post_density(g, i, r, treatment[i]) / std::max(gi, kDensityFloor);
    if (!std::isfinite(out.raw[i]) || out.raw[i] < 0)
      throw Error(ErrorKind::numeric, "non-finite inverse weight for unit " + std::to_string(i));
  }
  if (2 * out.floored > n)
    throw Error(ErrorKind::positivity_violation,
                std::to_string(out.floored) + " of " + std::to_string(n) +
                    " units have treatment density below 1e-10");
  out.mean_h = mean(out.raw);
  out.stabilized.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    out.stabilized[i] = out.mean_h > 0 ? out.raw[i] / out.mean_h : 0.0;
  return out;
}

}  // namespace shiftipw::mtp
