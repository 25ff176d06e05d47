#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace shiftipw {

inline constexpr const char* kVersion = "0.3.0";
inline constexpr int kSchemaVersion = 1;

enum class ErrorKind {
  named_column,
  parse,
  empty_input,
  invalid_fold,
  invalid_config,
  degenerate_response,
  degenerate_fold,
  degenerate_bins,
  numeric,
  shape,
  out_of_support,
  invalid_grid,
  positivity_violation,
  tilt_failure,
  replicate_failures,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

inline double expit(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

double mean(std::span<const double> x);
// Unbiased (n-1) sample variance; 0 for fewer than two values.
double sample_variance(std::span<const double> x);
// Linear-interpolation quantile of already sorted data (type 7).
double sorted_quantile(std::span<const double> sorted, double p);
// Points from hi down to lo, log-spaced, hi first.
std::vector<double> log_spaced_desc(double hi, double lo, std::size_t count);
double normal_quantile(double p);

// Argmin with ties resolved toward the first (largest-lambda) entry.
std::size_t argmin_first(std::span<const double> values);

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t value);

// Seeds a generator from a user seed through splitmix64 so nearby seeds
// do not produce correlated streams.
std::mt19937_64 make_rng(std::uint64_t seed);

// Runs body(i) for i in [0, count) on up to `threads` workers.  Exceptions
// are rethrown on the caller thread (the lowest failing index wins).
void parallel_for(std::size_t count, int threads,
                  const std::function<void(std::size_t)>& body);

int default_thread_count();

}  // namespace shiftipw
