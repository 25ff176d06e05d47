#pragma once

#include <limits>
#include <string>
#include <vector>

#include "shiftipw/haldensify.hpp"

namespace shiftipw::mtp {

using haldensify::SampleDensity;

enum class ShiftKind { additive, multiplicative };
enum class BoundRule { empirical_max, fixed, none };

const char* to_string(ShiftKind kind);
ShiftKind shift_kind_from_string(const std::string& name);
const char* to_string(BoundRule rule);

struct MtpRegime {
  ShiftKind kind = ShiftKind::additive;
  double delta = 0.0;
  BoundRule rule = BoundRule::empirical_max;
  double bound = std::numeric_limits<double>::infinity();  // used by BoundRule::fixed

  void validate() const;
  // u resolved against the observed treatment.
  double upper_bound(std::span<const double> treatment) const;
  bool is_identity() const;
};

// A regime with its support bound fixed; every function below takes this.
struct ResolvedRegime {
  ShiftKind kind = ShiftKind::additive;
  double delta = 0.0;
  double u = std::numeric_limits<double>::infinity();

  double shifted(double a) const { return kind == ShiftKind::additive ? a + delta : a * delta; }
  // Inverse of the shifted piece and its derivative.
  double inverse(double a) const { return kind == ShiftKind::additive ? a - delta : a / delta; }
  double inverse_derivative() const { return kind == ShiftKind::additive ? 1.0 : 1.0 / delta; }
};

ResolvedRegime resolve(const MtpRegime& regime, std::span<const double> treatment);

// d(a, w; delta): shift when the shifted value stays at or below u.
double apply_regime(double a, const ResolvedRegime& regime);

// Post-intervention density of unit i at a, by the two-piece change of
// variables: shifted mass lands on a <= u, unshifted mass stays where the
// shift would have exceeded u.
double post_density(const SampleDensity& g, std::size_t i, const ResolvedRegime& regime, double a);

inline constexpr double kDensityFloor = 1e-10;

struct ShiftWeights {
  std::vector<double> raw;
  std::vector<double> stabilized;
  double mean_h = 0.0;
  std::size_t floored = 0;  // units whose density hit kDensityFloor
};

// H(a, w) = post_density / max(g, floor) for a single unit.
double weight_at(const SampleDensity& g, std::size_t i, const ResolvedRegime& regime, double a);

ShiftWeights weights(const SampleDensity& g, const ResolvedRegime& regime,
                     std::span<const double> treatment);

}  // namespace shiftipw::mtp
