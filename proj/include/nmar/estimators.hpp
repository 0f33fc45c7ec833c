#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "nmar/core_data.hpp"
#include "nmar/error.hpp"
#include "nmar/logistic.hpp"
#include "nmar/math.hpp"
#include "nmar/outcome_model.hpp"
#include "nmar/parallel.hpp"
#include "nmar/profile_em.hpp"
#include "nmar/rng.hpp"

namespace nmar {

enum class Method { full, cc, ipw_sp, fi_sp, kc_gmm, riddles_fi };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::full: return "full";
    case Method::cc: return "cc";
    case Method::ipw_sp: return "ipw_sp";
    case Method::fi_sp: return "fi_sp";
    case Method::kc_gmm: return "kc_gmm";
    case Method::riddles_fi: return "riddles_fi";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  for (Method m : {Method::full, Method::cc, Method::ipw_sp, Method::fi_sp, Method::kc_gmm, Method::riddles_fi})
    if (s == to_string(m)) return m;
  if (s == "sp_ipw" || s == "sp") return Method::ipw_sp;
  if (s == "kc") return Method::kc_gmm;
  if (s == "riddles" || s == "fi") return Method::riddles_fi;
  throw Error(ErrorKind::ConfigError, "unknown estimator '" + s + "'");
}

struct EstimateResult {
  Method method = Method::cc;
  double theta = 0.0;
  int iterations = 0;
  double residual = 0.0;
  std::optional<double> bootstrap_se;
  Eigen::VectorXd response_coef;  // fitted response model, where the method has one
};

inline constexpr double kResidualTolerance = 1e-8;

struct RootResult {
  double x = 0.0;
  int iterations = 0;
  double residual = 0.0;
};

/// Root of a scalar function given with its derivative. Newton steps are
/// kept inside a sign-change bracket grown geometrically around `start`;
/// a bisection step replaces any Newton step that leaves the bracket.
inline RootResult solve_scalar_root(const std::function<std::pair<double, double>(double)>& F, double start) {
  RootResult out;
  auto [f0, d0] = F(start);
  (void)d0;
  if (!std::isfinite(f0)) throw Error(ErrorKind::RootNotFound, "estimating function not finite at start");
  if (f0 == 0.0) {
    out.x = start;
    return out;
  }
  double a = start, fa = f0, b = start, fb = f0;
  double step = 0.1 * std::max(1.0, std::abs(start));
  bool found = false;
  for (int e = 0; e < 200 && !found; ++e, step *= 2.0) {
    for (double cand : {start - step, start + step}) {
      const double fc = F(cand).first;
      if (!std::isfinite(fc)) continue;
      if ((fc < 0.0) != (f0 < 0.0) || fc == 0.0) {
        a = std::min(start, cand);
        b = std::max(start, cand);
        fa = cand < start ? fc : f0;
        fb = cand < start ? f0 : fc;
        found = true;
        break;
      }
    }
  }
  if (!found) throw Error(ErrorKind::RootNotFound, "no sign change found around " + std::to_string(start));
  double x = (fa == 0.0) ? a : (fb == 0.0 ? b : start > a && start < b ? start : 0.5 * (a + b));
  auto [fx, dx] = F(x);
  for (int it = 1; it <= 500; ++it) {
    out.iterations = it;
    if (fx == 0.0) break;
    double nx = (dx != 0.0 && std::isfinite(dx)) ? x - fx / dx : std::numeric_limits<double>::quiet_NaN();
    if (!(nx > a && nx < b)) nx = 0.5 * (a + b);
    if ((fx < 0.0) == (fa < 0.0)) {
      a = x;
      fa = fx;
    } else {
      b = x;
      fb = fx;
    }
    if (!(nx > a && nx < b)) nx = 0.5 * (a + b);
    const double moved = std::abs(nx - x);
    x = nx;
    std::tie(fx, dx) = F(x);
    if (moved <= 4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(x))) break;
  }
  out.x = x;
  out.residual = std::abs(fx);
  if (!(out.residual <= kResidualTolerance))
    throw Error(ErrorKind::RootNotFound, "residual " + std::to_string(out.residual) + " above tolerance");
  return out;
}

namespace detail {

/// Solves (1/n) sum_k weight_k U(theta; x_k, y_k) = 0.
inline EstimateResult solve_weighted(Method method, const EstimandSpec& spec, const Eigen::MatrixXd& x,
                                     const std::vector<std::size_t>& row, const std::vector<double>& y,
                                     const std::vector<double>& weight, double n, double start) {
  auto F = [&](double theta) {
    double f = 0.0, df = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k) {
      const Eigen::RowVectorXd xr = x.row(static_cast<Eigen::Index>(row[k]));
      f += weight[k] * spec.U(theta, xr, y[k]);
      df += weight[k] * spec.dU(theta, xr, y[k]);
    }
    return std::pair{f / n, df / n};
  };
  const RootResult r = solve_scalar_root(F, start);
  EstimateResult out;
  out.method = method;
  out.theta = r.x;
  out.iterations = r.iterations;
  out.residual = r.residual;
  return out;
}

inline double responder_mean(const Dataset& d) {
  double s = 0.0;
  std::size_t r = 0;
  for (std::size_t i = 0; i < d.n(); ++i)
    if (d.delta[i] == 1) {
      s += d.y_at(i);
      ++r;
    }
  if (r == 0) throw Error(ErrorKind::NoResponders, "no responders");
  return s / static_cast<double>(r);
}

}  // namespace detail

/// Estimating equation over every unit of a complete sample.
inline EstimateResult full_estimate(const Eigen::MatrixXd& covariates, const std::vector<double>& y,
                                    const EstimandSpec& spec) {
  std::vector<std::size_t> row(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) row[i] = i;
  double start = 0.0;
  for (double v : y) start += v;
  start /= static_cast<double>(std::max<std::size_t>(1, y.size()));
  return detail::solve_weighted(Method::full, spec, covariates, row, y, std::vector<double>(y.size(), 1.0),
                                static_cast<double>(y.size()), start);
}

/// Estimating equation over responders only.
inline EstimateResult cc_estimate(const Dataset& d, const EstimandSpec& spec) {
  std::vector<std::size_t> row;
  std::vector<double> y;
  for (std::size_t i = 0; i < d.n(); ++i)
    if (d.delta[i] == 1) {
      row.push_back(i);
      y.push_back(d.y_at(i));
    }
  if (row.empty()) throw Error(ErrorKind::NoResponders, "no responders");
  return detail::solve_weighted(Method::cc, spec, d.covariates(), row, y, std::vector<double>(y.size(), 1.0),
                                static_cast<double>(y.size()), detail::responder_mean(d));
}

/// (1/n) sum delta_i U(theta; x_i, y_i) / pi_i = 0 with the fitted propensity.
inline EstimateResult ipw_estimate(const FittedResponseModel& fit, const Dataset& d, const EstimandSpec& spec) {
  std::vector<std::size_t> row;
  std::vector<double> y, w;
  for (std::size_t i = 0; i < d.n(); ++i)
    if (d.delta[i] == 1) {
      row.push_back(i);
      y.push_back(d.y_at(i));
      w.push_back(1.0 / fit.prob(d.x1.row(static_cast<Eigen::Index>(i)), d.y_at(i)));
    }
  if (row.empty()) throw Error(ErrorKind::NoResponders, "no responders");
  EstimateResult out = detail::solve_weighted(Method::ipw_sp, spec, d.covariates(), row, y, w,
                                              static_cast<double>(d.n()), detail::responder_mean(d));
  out.response_coef = fit.phi;
  return out;
}

/// Responders enter with their outcome, nonresponders with their weighted
/// imputations.
inline EstimateResult fi_estimate(const FittedResponseModel& fit, const Dataset& d, const EstimandSpec& spec) {
  std::vector<std::size_t> row;
  std::vector<double> y, w;
  for (std::size_t i = 0; i < d.n(); ++i)
    if (d.delta[i] == 1) {
      row.push_back(i);
      y.push_back(d.y_at(i));
      w.push_back(1.0);
    }
  if (fit.imputations.size() != fit.nonresponders.size() || fit.weights.size() != fit.nonresponders.size())
    throw Error(ErrorKind::InvalidArgument, "fit carries no fractional imputations");
  for (std::size_t k = 0; k < fit.nonresponders.size(); ++k)
    for (std::size_t j = 0; j < fit.imputations[k].size(); ++j) {
      row.push_back(fit.nonresponders[k]);
      y.push_back(fit.imputations[k][j]);
      w.push_back(fit.weights[k][j]);
    }
  if (row.empty()) throw Error(ErrorKind::NoResponders, "no responders");
  EstimateResult out = detail::solve_weighted(Method::fi_sp, spec, d.covariates(), row, y, w,
                                              static_cast<double>(d.n()), detail::responder_mean(d));
  out.response_coef = fit.phi;
  return out;
}

/// Calibration-type GMM with a response model logistic in (1, x1, y) and
/// moments (1, x1, x2). Exactly identified with one instrument column.
inline EstimateResult kc_gmm_estimate(const Dataset& d, const EstimandSpec& spec, int max_iter = 200) {
  const std::size_t n = d.n();
  const Eigen::Index p = d.p(), q = d.q();
  if (q < 1) throw Error(ErrorKind::InvalidArgument, "the calibration estimator needs an instrument column");
  const auto [resp, nonresp] = split_responders(d);
  if (resp.empty()) throw Error(ErrorKind::NoResponders, "no responders");
  const Eigen::Index kpar = p + 2, kmom = 1 + p + q;
  const double nn = static_cast<double>(n);

  Eigen::MatrixXd V(static_cast<Eigen::Index>(resp.size()), kpar), U(static_cast<Eigen::Index>(resp.size()), kmom);
  Eigen::VectorXd offset = Eigen::VectorXd::Zero(kmom);  // -sum over all units of u_i
  const Eigen::MatrixXd cov = d.covariates();
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::VectorXd u(kmom);
    u << 1.0, cov.row(static_cast<Eigen::Index>(i)).transpose();
    offset -= u;
  }
  for (std::size_t k = 0; k < resp.size(); ++k) {
    const auto i = static_cast<Eigen::Index>(resp[k]);
    const auto r = static_cast<Eigen::Index>(k);
    V(r, 0) = 1.0;
    V.block(r, 1, 1, p) = d.x1.row(i);
    V(r, kpar - 1) = d.y_at(resp[k]);
    U(r, 0) = 1.0;
    U.block(r, 1, 1, p + q) = cov.row(i);
  }
  auto moments = [&](const Eigen::VectorXd& phi) {
    const Eigen::VectorXd eta = V * phi;
    Eigen::VectorXd m = offset;
    for (Eigen::Index r = 0; r < eta.size(); ++r) m += (1.0 + std::exp(-eta(r))) * U.row(r).transpose();
    return Eigen::VectorXd(m / nn);
  };

  const MarFit mar = fit_mar_logistic(d);
  Eigen::VectorXd phi(kpar);
  phi << mar.c_a, mar.phi_a, 0.0;
  Eigen::VectorXd m = moments(phi);
  double obj = m.squaredNorm();
  int it = 0;
  for (; it < max_iter && m.lpNorm<Eigen::Infinity>() > 1e-14; ++it) {
    const Eigen::VectorXd eta = V * phi;
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(kmom, kpar);
    for (Eigen::Index r = 0; r < eta.size(); ++r)
      J.noalias() -= std::exp(-eta(r)) * U.row(r).transpose() * V.row(r);
    J /= nn;
    const Eigen::VectorXd step = J.colPivHouseholderQr().solve(-m);
    double s = 1.0;
    bool moved = false;
    for (int h = 0; h < 40; ++h, s *= 0.5) {
      const Eigen::VectorXd cand = phi + s * step;
      const Eigen::VectorXd mc = moments(cand);
      const double oc = mc.squaredNorm();
      if (std::isfinite(oc) && oc < obj) {
        phi = cand;
        m = mc;
        obj = oc;
        moved = true;
        break;
      }
    }
    if (!moved) break;
  }
  if (!(m.lpNorm<Eigen::Infinity>() <= kResidualTolerance))
    throw Error(ErrorKind::RootNotFound, "calibration moments not solved (residual " +
                                             std::to_string(m.lpNorm<Eigen::Infinity>()) + ")");

  std::vector<std::size_t> row;
  std::vector<double> y, w;
  for (std::size_t k = 0; k < resp.size(); ++k) {
    row.push_back(resp[k]);
    y.push_back(d.y_at(resp[k]));
    w.push_back(1.0 + std::exp(-V.row(static_cast<Eigen::Index>(k)).dot(phi)));
  }
  EstimateResult out = detail::solve_weighted(Method::kc_gmm, spec, cov, row, y, w, nn, detail::responder_mean(d));
  out.iterations += it;
  out.residual = std::max(out.residual, m.lpNorm<Eigen::Infinity>());
  out.response_coef = phi;
  return out;
}

struct RiddlesConfig {
  int M = 100;
  int max_iter = 200;
  double tol = 1e-6;
  std::uint64_t seed = 0;
};

/// Parametric fractional-imputation EM with a response model logistic in
/// (1, x1, y). Within a unit the x terms cancel, so weights are
/// proportional to exp(-phi_y y*).
inline EstimateResult riddles_fi_estimate(const Dataset& d, const BasisSpec& basis, const EstimandSpec& spec,
                                          const RiddlesConfig& cfg = {},
                                          std::optional<double> fixed_phi_y = std::nullopt) {
  const auto [resp, nonresp] = split_responders(d);
  if (resp.empty()) throw Error(ErrorKind::NoResponders, "no responders");
  const Eigen::Index p = d.p(), kpar = p + 2;
  const OutcomeModel om = fit_outcome_model(d, basis);
  const Eigen::MatrixXd cov = d.covariates();
  const auto M = static_cast<std::size_t>(cfg.M);
  std::vector<std::vector<double>> imp;
  for (std::size_t i : nonresp) {
    Rng rng = make_rng(cfg.seed, d.unit_ids[i]);
    imp.push_back(draw_imputations(om, cov.row(static_cast<Eigen::Index>(i)), cfg.M, rng));
  }

  const std::size_t rows = resp.size() + nonresp.size() * M;
  Eigen::MatrixXd X(static_cast<Eigen::Index>(rows), kpar);
  std::vector<int> label(rows, 0);
  for (std::size_t k = 0; k < resp.size(); ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    X(r, 0) = 1.0;
    X.block(r, 1, 1, p) = d.x1.row(static_cast<Eigen::Index>(resp[k]));
    X(r, kpar - 1) = d.y_at(resp[k]);
    label[k] = 1;
  }
  for (std::size_t k = 0; k < nonresp.size(); ++k)
    for (std::size_t j = 0; j < M; ++j) {
      const auto r = static_cast<Eigen::Index>(resp.size() + k * M + j);
      X(r, 0) = 1.0;
      X.block(r, 1, 1, p) = d.x1.row(static_cast<Eigen::Index>(nonresp[k]));
      X(r, kpar - 1) = imp[k][j];
    }

  auto weights_for = [&](double phi_y) {
    Eigen::VectorXd w = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(rows));
    for (std::size_t k = 0; k < nonresp.size(); ++k) {
      const std::size_t base = resp.size() + k * M;
      double top = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < M; ++j) top = std::max(top, -phi_y * imp[k][j]);
      double sum = 0.0;
      for (std::size_t j = 0; j < M; ++j) sum += (w(static_cast<Eigen::Index>(base + j)) = std::exp(-phi_y * imp[k][j] - top));
      for (std::size_t j = 0; j < M; ++j) w(static_cast<Eigen::Index>(base + j)) /= sum;
    }
    return w;
  };

  const MarFit mar = fit_mar_logistic(d);
  Eigen::VectorXd phi(kpar);
  phi << mar.c_a, mar.phi_a, fixed_phi_y.value_or(0.0);
  int it = 0;
  bool converged = fixed_phi_y.has_value();
  if (!fixed_phi_y) {
    for (it = 1; it <= cfg.max_iter; ++it) {
      const Eigen::VectorXd w = weights_for(phi(kpar - 1));
      const LogisticFit lf = fit_logistic(X, label, w, &phi);
      const double change = (lf.coef - phi).lpNorm<Eigen::Infinity>();
      phi = lf.coef;
      if (change < cfg.tol) {
        converged = true;
        break;
      }
    }
  }
  if (!converged) throw Error(ErrorKind::NotConverged, "parametric FI EM did not converge");

  const Eigen::VectorXd w = weights_for(phi(kpar - 1));
  std::vector<std::size_t> row;
  std::vector<double> y, wt;
  for (std::size_t k = 0; k < resp.size(); ++k) {
    row.push_back(resp[k]);
    y.push_back(d.y_at(resp[k]));
    wt.push_back(1.0);
  }
  for (std::size_t k = 0; k < nonresp.size(); ++k)
    for (std::size_t j = 0; j < M; ++j) {
      row.push_back(nonresp[k]);
      y.push_back(imp[k][j]);
      wt.push_back(w(static_cast<Eigen::Index>(resp.size() + k * M + j)));
    }
  EstimateResult out = detail::solve_weighted(Method::riddles_fi, spec, cov, row, y, wt,
                                              static_cast<double>(d.n()), detail::responder_mean(d));
  out.iterations += it;
  out.response_coef = phi;
  return out;
}

/// Nonparametric bootstrap standard error: units are resampled with
/// replacement (fresh unit ids), the estimator is rerun end to end, and
/// failed resamples are skipped.
inline std::optional<double> bootstrap_se(const Dataset& d, int B, std::uint64_t seed, int workers,
                                          const std::function<double(const Dataset&)>& estimator,
                                          int* failures = nullptr) {
  std::vector<std::optional<double>> est(static_cast<std::size_t>(std::max(0, B)));
  parallel_for(est.size(), workers, [&](std::size_t b) {
    Rng rng = make_rng(seed, b);
    std::uniform_int_distribution<std::size_t> pick(0, d.n() - 1);
    std::vector<std::size_t> idx(d.n());
    for (auto& v : idx) v = pick(rng);
    try {
      est[b] = estimator(subset_rows(d, idx, false));
    } catch (const Error&) {
    }
  });
  std::vector<double> ok;
  for (const auto& e : est)
    if (e) ok.push_back(*e);
  if (failures) *failures = static_cast<int>(est.size() - ok.size());
  if (ok.size() < 2) return std::nullopt;
  return sample_sd(ok);
}

}  // namespace nmar
