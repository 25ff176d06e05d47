#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "shiftipw/estimators.hpp"
#include "shiftipw/haldensify.hpp"

namespace shiftipw::selectors {

struct TraceRecord {
  double lambda = 0.0;
  double psi = 0.0;          // stabilized IPW
  double se = 0.0;           // from the IPW estimating function
  double se_eif = 0.0;       // from the estimated EIF
  double pn_eif = 0.0;
  double abs_pn_dcar = 0.0;
  double l1_norm = 0.0;      // of the density fit
};

struct SelectorTrace {
  std::vector<TraceRecord> records;  // entry 0 is the cross-validated fit
  double sigma_cv = 0.0;             // EIF-based se at lambda_CV
  std::size_t n = 0;
  std::size_t size() const { return records.size(); }
};

SelectorTrace build_trace(const datacore::Dataset& data, const haldensify::CondDensityFamily& family,
                          const mtp::ResolvedRegime& regime,
                          const estimators::OutcomeValues& outcome, int threads = 1);

// Trace from precomputed records (tests, external traces).
SelectorTrace make_trace(std::vector<TraceRecord> records, std::size_t n, double sigma_cv);

enum class SelectorKind { global_cv, dcar_min, dcar_tol, lepski, plateau, hybrid };
const char* to_string(SelectorKind kind);
SelectorKind selector_from_string(const std::string& name);
const std::vector<SelectorKind>& all_selectors();

struct SelectorChoice {
  SelectorKind kind = SelectorKind::global_cv;
  std::size_t index = 0;  // 0-based into the trace
  double psi = 0.0;
  double se = 0.0;
  bool fallback = false;
  std::map<std::string, double> diagnostics;
};

struct PlateauParams {
  double k_max = 10.0;
  double alpha = 0.05;
  double span = 0.75;
};

SelectorChoice select_global_cv(const SelectorTrace& trace);
SelectorChoice select_dcar_min(const SelectorTrace& trace);
SelectorChoice select_dcar_tolerance(const SelectorTrace& trace);
SelectorChoice select_lepski(const SelectorTrace& trace, double alpha = 0.05);
SelectorChoice select_smoothed_plateau(const SelectorTrace& trace, const PlateauParams& p = {});
SelectorChoice select_hybrid(const SelectorTrace& trace, const PlateauParams& p = {});
SelectorChoice select(SelectorKind kind, const SelectorTrace& trace, const PlateauParams& p = {});

// Locally linear tricube LOESS evaluated at the abscissae themselves.
std::vector<double> loess(std::span<const double> x, std::span<const double> y, double span);

// First index whose second difference has a sign opposite to the last
// nonzero second difference before it.  With abscissae the differences are
// divided (slope changes), so uneven spacing does not create sign changes;
// without them the points are taken as equally spaced.
std::optional<std::size_t> first_inflection(std::span<const double> y, std::span<const double> x = {});

}  // namespace shiftipw::selectors
