#pragma once

#include <cmath>

namespace nmar {

inline double logistic(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// log(1 + e^t) without overflow
inline double softplus(double t) {
  return t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
}

// log pi(t) and log(1 - pi(t)) for the logistic link
inline double log_logistic(double t) { return -softplus(-t); }
inline double log1m_logistic(double t) { return -softplus(t); }

}  // namespace nmar
