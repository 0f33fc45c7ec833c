#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "nmar/error.hpp"

namespace nmar {

enum class KernelFamily { epanechnikov, triweight };

inline KernelFamily kernel_family_from_string(const std::string& s) {
  if (s == "epanechnikov") return KernelFamily::epanechnikov;
  if (s == "triweight") return KernelFamily::triweight;
  throw Error(ErrorKind::ConfigError, "unknown kernel family '" + s + "'");
}

inline const char* to_string(KernelFamily f) {
  return f == KernelFamily::epanechnikov ? "epanechnikov" : "triweight";
}

/// Compactly supported kernel on [-1, 1] with bandwidth in data units.
struct KernelSpec {
  KernelFamily family = KernelFamily::epanechnikov;
  double bandwidth = 1.0;
};

/// K(u) on the unit scale.
inline double kernel_unit(KernelFamily family, double u) {
  const double a = std::abs(u);
  if (a >= 1.0) return 0.0;
  const double s = 1.0 - u * u;
  switch (family) {
    case KernelFamily::epanechnikov: return 0.75 * s;
    case KernelFamily::triweight: return (35.0 / 32.0) * s * s * s;
  }
  return 0.0;
}

/// K(d/h)/h for a raw difference d.
inline double kernel_weight(const KernelSpec& spec, double d) {
  return kernel_unit(spec.family, d / spec.bandwidth) / spec.bandwidth;
}

/// Linear-interpolation quantile (type 7) of already sorted values.
inline double quantile_type7(std::span<const double> sorted, double prob) {
  if (sorted.empty()) throw Error(ErrorKind::InvalidArgument, "quantile of an empty sample");
  const double h = static_cast<double>(sorted.size() - 1) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline double sample_sd(std::span<const double> v) {
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

/// Rule-of-thumb bandwidth 0.9 min(sd, IQR/1.34) m^{-1/5} with the spread of
/// `values` and sample count m. Falls back to sd when the IQR collapses on a
/// sample that still has spread.
inline double silverman_bandwidth(std::span<const double> values, std::size_t count) {
  if (values.size() < 2) throw Error(ErrorKind::DegenerateSample, "bandwidth needs at least 2 values");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  if (sorted.front() == sorted.back())
    throw Error(ErrorKind::DegenerateSample, "all values identical");
  const double sd = sample_sd(sorted);
  const double iqr = quantile_type7(sorted, 0.75) - quantile_type7(sorted, 0.25);
  double spread = std::min(sd, iqr / 1.34);
  if (!(spread > 0.0)) spread = sd;
  if (count < 1) throw Error(ErrorKind::DegenerateSample, "bandwidth count must be positive");
  return 0.9 * spread * std::pow(static_cast<double>(count), -0.2);
}

inline double silverman_bandwidth(std::span<const double> values) {
  return silverman_bandwidth(values, values.size());
}

/// Canonical bandwidth (R(K) / mu2(K)^2)^{1/5} of a kernel.
inline double canonical_bandwidth(KernelFamily family) {
  switch (family) {
    case KernelFamily::epanechnikov: return std::pow((3.0 / 5.0) / (1.0 / 25.0), 0.2);
    case KernelFamily::triweight: return std::pow((350.0 / 429.0) / (1.0 / 81.0), 0.2);
  }
  return 1.0;
}

/// Normal-reference rule for `family`: the rule of thumb above is calibrated
/// for the Gaussian kernel, so it is carried over at equal smoothing by the
/// ratio of canonical bandwidths.
inline double rule_of_thumb_bandwidth(std::span<const double> values, std::size_t count, KernelFamily family) {
  const double gaussian = std::pow(1.0 / (2.0 * std::sqrt(std::numbers::pi)), 0.2);
  return silverman_bandwidth(values, count) * canonical_bandwidth(family) / gaussian;
}

}  // namespace nmar
