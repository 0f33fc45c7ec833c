#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nmar/core_data.hpp"
#include "nmar/error.hpp"
#include "nmar/kernel.hpp"
#include "nmar/logistic.hpp"
#include "nmar/math.hpp"
#include "nmar/outcome_model.hpp"
#include "nmar/rng.hpp"
#include "nmar/tilt.hpp"

namespace nmar {

// Sample count used in the rule-of-thumb bandwidth over the pooled
// responder and imputed outcomes: the number of units, or every point.
enum class BandwidthRule { units, points };

inline std::string to_string(BandwidthRule r) { return r == BandwidthRule::units ? "units" : "points"; }

inline BandwidthRule bandwidth_rule_from_string(const std::string& s) {
  if (s == "units") return BandwidthRule::units;
  if (s == "points") return BandwidthRule::points;
  throw Error(ErrorKind::ConfigError, "unknown bandwidth rule: " + s);
}

struct EmConfig {
  int M = 100;
  int max_iter = 200;
  double tol_phi = 1e-6;
  double tol_g = 1e-6;
  double propensity_clamp = 1e-3;
  int step_halving_max = 20;
  std::uint64_t seed = 0;
  // spacing of the evaluation grid in units of the bandwidth
  double grid_step = 1.0 / 3.0;
  // least local kernel mass per group, in units, for a grid node to be kept
  double min_local_mass = 1.0;
  KernelFamily kernel = KernelFamily::epanechnikov;
  // fixed bandwidth; computed from the pooled sample when absent
  std::optional<double> bandwidth;
  BandwidthRule bandwidth_rule = BandwidthRule::units;
  // hold g at the MAR constant and fit phi alone
  bool freeze_g = false;
  std::optional<Eigen::VectorXd> phi_init;

  void validate() const {
    auto bad = [](const std::string& what) { throw Error(ErrorKind::ConfigError, what); };
    if (M < 1) bad("em.M must be >= 1");
    if (max_iter < 1) bad("em.max_iter must be >= 1");
    if (!(tol_phi > 0.0) || !(tol_g > 0.0)) bad("em tolerances must be positive");
    if (!(propensity_clamp > 0.0 && propensity_clamp < 0.5)) bad("em.propensity_clamp must lie in (0, 0.5)");
    if (step_halving_max < 1) bad("em.step_halving_max must be >= 1");
    if (!(grid_step > 0.0)) bad("em.grid_step must be positive");
    if (!(min_local_mass >= 0.0)) bad("em.min_local_mass must be nonnegative");
    if (bandwidth && !(*bandwidth > 0.0)) bad("em.bandwidth must be positive");
  }
};

/// logistic(x1' phi + g(y)) clamped to [eps, 1 - eps].
inline double propensity(const Eigen::VectorXd& phi, double g_at_y, const Eigen::RowVectorXd& x1_row,
                         double eps = 1e-3) {
  const double eta = (phi.size() ? x1_row.dot(phi) : 0.0) + g_at_y;
  return std::clamp(logistic(eta), eps, 1.0 - eps);
}

/// w_j proportional to exp{-g(y*_j)}, normalized to sum to one.
inline std::vector<double> compute_fractional_weights(const TiltFunction& g,
                                                      const std::vector<double>& imputed_y) {
  if (imputed_y.empty()) throw Error(ErrorKind::InvalidArgument, "no imputed values");
  std::vector<double> w(imputed_y.size());
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < w.size(); ++j) {
    w[j] = -evaluate_g(g, imputed_y[j]);
    top = std::max(top, w[j]);
  }
  double sum = 0.0;
  for (double& v : w) sum += (v = std::exp(v - top));
  for (double& v : w) v /= sum;
  return w;
}

struct LocalTerms {
  double G = 0.0;
  double H = 0.0;
  Eigen::VectorXd I;
  double ltilde = 0.0;
  double mass = 0.0;
};

struct PhiTerms {
  Eigen::VectorXd A;
  Eigen::MatrixXd B;
  Eigen::MatrixXd B_x1;  // same curvature with x1 alone as regressor
};

struct PhiStep {
  Eigen::VectorXd phi;
  double step = 0.0;
  double q_start = 0.0;
  double q_after = 0.0;
  int halvings = 0;
};

struct GStep {
  std::vector<double> values;  // total g at each evaluation point
  double min_gain = 0.0;       // smallest change of the local smoothed likelihood
};

/// Smoothed profile likelihood over a fixed set of weighted points.
///
/// Each point belongs to a unit and carries an outcome value. Points of
/// responding units enter as log pi, points of nonresponding units as
/// log(1 - pi), both scaled by the point weight. Kernel values between
/// evaluation targets and points are computed once; set_weights folds them
/// into one local mass per (target, unit).
class ProfileLikelihood {
 public:
  ProfileLikelihood(Eigen::MatrixXd x1, std::vector<char> responded, std::vector<std::size_t> point_unit,
                    std::vector<double> point_y, std::vector<double> targets, KernelSpec kernel)
      : x1_(std::move(x1)),
        responded_(std::move(responded)),
        point_unit_(std::move(point_unit)),
        point_y_(std::move(point_y)),
        targets_(std::move(targets)),
        kernel_(kernel) {
    const std::size_t P = point_y_.size();
    if (point_unit_.size() != P) throw Error(ErrorKind::InvalidArgument, "point arrays differ in length");
    if (!std::is_sorted(targets_.begin(), targets_.end()))
      throw Error(ErrorKind::InvalidArgument, "evaluation targets must be sorted");
    eta_.setZero(x1_.rows());
    weight_.assign(P, 1.0);
    weight_arr_ = Eigen::ArrayXd::Ones(static_cast<Eigen::Index>(P));
    sign_.resize(static_cast<Eigen::Index>(P));
    responded_point_.resize(static_cast<Eigen::Index>(P));
    for (std::size_t p = 0; p < P; ++p) {
      const bool r = responded_[point_unit_[p]] != 0;
      sign_(static_cast<Eigen::Index>(p)) = r ? 1.0 : -1.0;
      responded_point_(static_cast<Eigen::Index>(p)) = r ? 1.0 : 0.0;
    }
    loc_.resize(P);
    for (std::size_t p = 0; p < P; ++p) loc_[p] = locate(targets_, point_y_[p]);

    // points ordered by y make the window search a pair of binary searches
    std::vector<std::size_t> order(P);
    for (std::size_t p = 0; p < P; ++p) order[p] = p;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return point_y_[a] < point_y_[b] || (point_y_[a] == point_y_[b] && a < b);
    });
    std::vector<double> sorted_y(P);
    for (std::size_t p = 0; p < P; ++p) sorted_y[p] = point_y_[order[p]];

    const std::size_t K = targets_.size();
    row_begin_.assign(K + 1, 0);
    unit_begin_.assign(K + 1, 0);
    std::vector<std::ptrdiff_t> slot_of(static_cast<std::size_t>(x1_.rows()), -1);
    for (std::size_t k = 0; k < K; ++k) {
      const double t = targets_[k], h = kernel_.bandwidth;
      auto lo = std::upper_bound(sorted_y.begin(), sorted_y.end(), t - h);
      auto hi = std::lower_bound(sorted_y.begin(), sorted_y.end(), t + h);
      const std::size_t first_unit = units_.size();
      for (auto it = lo; it != hi; ++it) {
        const std::size_t p = order[static_cast<std::size_t>(it - sorted_y.begin())];
        const double kv = kernel_weight(kernel_, t - point_y_[p]);
        if (kv <= 0.0) continue;
        const std::size_t u = point_unit_[p];
        if (slot_of[u] < 0) {
          slot_of[u] = static_cast<std::ptrdiff_t>(units_.size());
          units_.push_back(u);
        }
        entry_point_.push_back(p);
        entry_kernel_.push_back(kv);
        entry_slot_.push_back(static_cast<std::size_t>(slot_of[u]) - first_unit);
      }
      for (std::size_t s = first_unit; s < units_.size(); ++s) slot_of[units_[s]] = -1;
      row_begin_[k + 1] = entry_point_.size();
      unit_begin_[k + 1] = units_.size();
    }
    mass_.assign(units_.size(), 0.0);
    unit_sign_.resize(x1_.rows());
    for (Eigen::Index u = 0; u < x1_.rows(); ++u) unit_sign_(u) = responded_[static_cast<std::size_t>(u)] ? 1.0 : -1.0;
    aggregate();
  }

  std::size_t targets() const { return targets_.size(); }
  std::size_t points() const { return point_y_.size(); }
  const std::vector<double>& target_values() const { return targets_; }
  Eigen::Index p() const { return x1_.cols(); }

  void set_weights(const std::vector<double>& w) {
    if (w.size() != weight_.size()) throw Error(ErrorKind::InvalidArgument, "weight vector length");
    weight_ = w;
    weight_arr_ = Eigen::Map<const Eigen::ArrayXd>(w.data(), static_cast<Eigen::Index>(w.size()));
    aggregate();
  }
  const std::vector<double>& weights() const { return weight_; }

  void set_phi(const Eigen::VectorXd& phi) {
    phi_ = phi;
    if (x1_.cols()) eta_ = x1_ * phi;
  }
  const Eigen::VectorXd& phi() const { return phi_; }

  /// G, H, I and the smoothed likelihood at target k with g(target) = gamma.
  LocalTerms local_terms(std::size_t k, double gamma, bool with_loglik = true) const {
    const auto b = static_cast<Eigen::Index>(unit_begin_[k]);
    const auto len = static_cast<Eigen::Index>(unit_begin_[k + 1] - unit_begin_[k]);
    Eigen::ArrayXd t(len), r(len);
    for (Eigen::Index s = 0; s < len; ++s) {
      const auto u = static_cast<Eigen::Index>(units_[static_cast<std::size_t>(b + s)]);
      t(s) = eta_(u) + gamma;
      r(s) = unit_sign_(u) > 0.0 ? 1.0 : 0.0;
    }
    const auto m = mass_arr_.segment(b, len);
    const Eigen::ArrayXd pi = 1.0 / (1.0 + (-t).exp());
    const Eigen::ArrayXd v = pi * (1.0 - pi) * m;
    LocalTerms out;
    out.G = (m * (r - pi)).sum();
    out.H = -v.sum();
    out.mass = m.sum();
    out.I = Eigen::VectorXd::Zero(x1_.cols());
    if (x1_.cols())
      for (Eigen::Index s = 0; s < len; ++s)
        out.I += v(s) * x1_.row(static_cast<Eigen::Index>(units_[static_cast<std::size_t>(b + s)])).transpose();
    if (!(out.mass > 0.0))
      throw Error(ErrorKind::NoLocalSupport, "no kernel mass at evaluation point " + std::to_string(targets_[k]));
    if (with_loglik) out.ltilde = smoothed_loglik(k, gamma);
    return out;
  }

  double smoothed_loglik(std::size_t k, double gamma) const {
    const auto b = static_cast<Eigen::Index>(unit_begin_[k]);
    const auto len = static_cast<Eigen::Index>(unit_begin_[k + 1] - unit_begin_[k]);
    Eigen::ArrayXd z(len);
    for (Eigen::Index s = 0; s < len; ++s) {
      const auto u = units_[static_cast<std::size_t>(b + s)];
      z(s) = -unit_sign_(static_cast<Eigen::Index>(u)) * (eta_(static_cast<Eigen::Index>(u)) + gamma);
    }
    const Eigen::ArrayXd e = (-z.abs()).exp();
    return -(mass_arr_.segment(b, len) * (z.max(0.0) + (1.0 + e).log())).sum();
  }

  /// One damped Newton step per target at the current phi, kept inside
  /// [-bound, bound].
  GStep update_g(const TiltFunction& g, int max_halving,
                 double bound = std::numeric_limits<double>::infinity()) const {
    GStep out;
    out.values.resize(targets_.size());
    out.min_gain = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < targets_.size(); ++k) {
      const double gamma = g.at_node(k);
      const LocalTerms lt = local_terms(k, gamma);
      double best = gamma, gain = 0.0;
      if (lt.H < 0.0) {
        const double step = -lt.G / lt.H;
        double s = 1.0;
        for (int hv = 0; hv <= max_halving; ++hv, s *= 0.5) {
          const double cand = std::clamp(gamma + s * step, -bound, bound);
          const double l_new = smoothed_loglik(k, cand);
          if (l_new >= lt.ltilde) {
            best = cand;
            gain = l_new - lt.ltilde;
            break;
          }
        }
      }
      out.values[k] = best;
      out.min_gain = std::min(out.min_gain, gain);
    }
    if (targets_.empty()) out.min_gain = 0.0;
    return out;
  }

  /// d g(target) / d phi = I / H at each target, current phi.
  Eigen::MatrixXd gradient_g(const TiltFunction& g) const {
    Eigen::MatrixXd grad(static_cast<Eigen::Index>(targets_.size()), x1_.cols());
    for (std::size_t k = 0; k < targets_.size(); ++k) {
      const LocalTerms lt = local_terms(k, g.at_node(k), false);
      if (!(lt.H < 0.0))
        throw Error(ErrorKind::NoLocalSupport, "local curvature vanished at " + std::to_string(targets_[k]));
      grad.row(static_cast<Eigen::Index>(k)) = (lt.I / lt.H).transpose();
    }
    return grad;
  }

  double g_at_point(const TiltFunction& g, std::size_t p) const {
    return g.level + interpolate(g.g_values, loc_[p]);
  }

  Eigen::VectorXd grad_at_point(const TiltFunction& g, std::size_t p) const {
    const auto& l = loc_[p];
    const auto k = static_cast<Eigen::Index>(l.k);
    if (l.lambda == 0.0) return g.grad_values.row(k).transpose();
    return ((1.0 - l.lambda) * g.grad_values.row(k) + l.lambda * g.grad_values.row(k + 1)).transpose();
  }

  /// Linear predictor eta(x1) + g(y) of every point.
  Eigen::ArrayXd point_predictor(const TiltFunction& g) const {
    Eigen::ArrayXd t(static_cast<Eigen::Index>(point_y_.size()));
    for (std::size_t p = 0; p < point_y_.size(); ++p)
      t(static_cast<Eigen::Index>(p)) = eta_(static_cast<Eigen::Index>(point_unit_[p])) + g_at_point(g, p);
    return t;
  }

  /// Weighted log-likelihood of all points with predictor t.
  double weighted_loglik(const Eigen::ArrayXd& t) const {
    // log pi = -softplus(-t) for responders, log(1 - pi) = -softplus(t) otherwise
    const Eigen::ArrayXd z = -sign_ * t;
    const Eigen::ArrayXd e = (-z.abs()).exp();
    const Eigen::ArrayXd sp = z.max(0.0) + (1.0 + e).log();
    return -(weight_arr_ * sp).sum();
  }

  /// Weighted log-likelihood of all points at the current phi and g.
  double q_value(const TiltFunction& g) const { return weighted_loglik(point_predictor(g)); }

  /// Regressors x1 + grad g(y) of every point, one row per point.
  Eigen::MatrixXd augmented_regressors(const TiltFunction& g) const {
    const Eigen::Index pp = x1_.cols();
    Eigen::MatrixXd Z(static_cast<Eigen::Index>(point_y_.size()), pp);
    for (std::size_t p = 0; p < point_y_.size(); ++p) {
      const auto r = static_cast<Eigen::Index>(p);
      const auto u = static_cast<Eigen::Index>(point_unit_[p]);
      const auto k = static_cast<Eigen::Index>(loc_[p].k);
      const double lam = loc_[p].lambda;
      for (Eigen::Index c = 0; c < pp; ++c) {
        double gr = g.grad_values(k, c);
        if (lam != 0.0) gr = (1.0 - lam) * gr + lam * g.grad_values(k + 1, c);
        Z(r, c) = x1_(u, c) + gr;
      }
    }
    return Z;
  }

  /// Score and Hessian for phi with the tilt gradient held fixed.
  PhiTerms phi_terms(const TiltFunction& g) const { return phi_terms(g, augmented_regressors(g)); }

  PhiTerms phi_terms(const TiltFunction& g, const Eigen::MatrixXd& Z) const {
    const Eigen::ArrayXd pi = 1.0 / (1.0 + (-point_predictor(g)).exp());
    const Eigen::ArrayXd v = weight_arr_ * pi * (1.0 - pi);
    const Eigen::VectorXd resid = (weight_arr_ * (responded_point_ - pi)).matrix();
    Eigen::VectorXd unit_v = Eigen::VectorXd::Zero(x1_.rows());
    for (std::size_t p = 0; p < point_y_.size(); ++p)
      unit_v(static_cast<Eigen::Index>(point_unit_[p])) += v(static_cast<Eigen::Index>(p));
    PhiTerms out;
    out.A = Z.transpose() * resid;
    const Eigen::MatrixXd Zs = Z.array().colwise() * v.sqrt();
    out.B = -(Zs.transpose() * Zs);
    const Eigen::MatrixXd Xs = x1_.array().colwise() * unit_v.array().sqrt();
    out.B_x1 = -(Xs.transpose() * Xs);
    return out;
  }

  /// Damped Newton step for phi. The step length is halved until the
  /// objective, with g moved along its gradient, does not decrease.
  PhiStep update_phi(const TiltFunction& g, int max_halving) const {
    PhiStep out;
    out.phi = phi_;
    const Eigen::Index pp = x1_.cols();
    const Eigen::ArrayXd base = point_predictor(g);
    Eigen::ArrayXd dir = Eigen::ArrayXd::Zero(base.size());
    auto objective = [&](double s) { return weighted_loglik(base + s * dir); };
    out.q_start = objective(0.0);
    out.q_after = out.q_start;
    if (pp == 0) return out;

    const Eigen::MatrixXd Z = augmented_regressors(g);
    const PhiTerms terms = phi_terms(g, Z);
    const Eigen::MatrixXd negB = -terms.B;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(negB, Eigen::EigenvaluesOnly);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig_x1(-terms.B_x1, Eigen::EigenvaluesOnly);
    const double scale = std::max(eig_x1.eigenvalues().maxCoeff(), std::numeric_limits<double>::min());
    if (!(eig.eigenvalues().minCoeff() > 1e-9 * scale))
      throw Error(ErrorKind::SingularHessian, "phi Hessian is singular (min eigenvalue " +
                                                  std::to_string(eig.eigenvalues().minCoeff()) + ")");
    const Eigen::VectorXd delta = negB.llt().solve(terms.A);
    dir = (Z * delta).array();
    double s = 1.0;
    for (int hv = 0; hv <= max_halving; ++hv, s *= 0.5) {
      const double q = objective(s);
      if (q >= out.q_start) {
        out.step = s;
        out.q_after = q;
        out.halvings = hv;
        out.phi = phi_ + s * delta;
        return out;
      }
    }
    out.halvings = max_halving + 1;
    return out;
  }

 private:
  void aggregate() {
    std::fill(mass_.begin(), mass_.end(), 0.0);
    for (std::size_t k = 0; k < targets_.size(); ++k) {
      const std::size_t base = unit_begin_[k];
      for (std::size_t e = row_begin_[k]; e < row_begin_[k + 1]; ++e)
        mass_[base + entry_slot_[e]] += weight_[entry_point_[e]] * entry_kernel_[e];
    }
    mass_arr_ = Eigen::Map<const Eigen::ArrayXd>(mass_.data(), static_cast<Eigen::Index>(mass_.size()));
  }

  Eigen::MatrixXd x1_;
  std::vector<char> responded_;
  std::vector<std::size_t> point_unit_;
  std::vector<double> point_y_;
  std::vector<double> targets_;
  KernelSpec kernel_;

  std::vector<GridLocation> loc_;
  std::vector<double> weight_;
  Eigen::ArrayXd weight_arr_, sign_, responded_point_;
  Eigen::VectorXd phi_;
  Eigen::VectorXd eta_;

  // per target k: kernel entries in [row_begin_[k], row_begin_[k+1]) and
  // distinct units in [unit_begin_[k], unit_begin_[k+1]); entry_slot_ is
  // relative to unit_begin_[k]
  std::vector<std::size_t> row_begin_, unit_begin_;
  std::vector<std::size_t> entry_point_, entry_slot_;
  std::vector<double> entry_kernel_;
  std::vector<std::size_t> units_;
  std::vector<double> mass_;
  Eigen::ArrayXd mass_arr_, unit_sign_;
};

struct IterationRecord {
  int iteration = 0;
  double q = 0.0;          // objective before the phi step
  double q_damped = 0.0;   // objective after the damped phi step
  double phi_step = 0.0;
  double min_ltilde_gain = 0.0;
  double delta_phi = 0.0;  // sup norm
  double delta_g = 0.0;    // sup norm over evaluation points
};

struct FittedResponseModel {
  Eigen::VectorXd phi;
  TiltFunction g;
  std::optional<OutcomeModel> outcome;
  std::vector<std::size_t> nonresponders;
  std::vector<std::vector<double>> imputations;
  std::vector<std::vector<double>> weights;
  std::vector<IterationRecord> trace;
  bool converged = false;
  bool boundary = false;  // every unit responded: pi is pushed to the clamp
  int iterations = 0;
  double bandwidth = 0.0;
  double propensity_clamp = 1e-3;
  int M = 0;

  double linear_predictor(const Eigen::RowVectorXd& x1, double y) const {
    return (phi.size() ? x1.dot(phi) : 0.0) + evaluate_g(g, y);
  }
  double prob(const Eigen::RowVectorXd& x1, double y) const {
    return propensity(phi, evaluate_g(g, y), x1, propensity_clamp);
  }
};

namespace detail {

/// Evaluation grid: spacing step*h over [lo, hi], keeping nodes where each
/// group has local kernel mass of at least min_mass units. Mass counts
/// K(u)/K(0) per point, times the per-point weight of its group.
inline std::vector<double> support_grid(double lo, double hi, const KernelSpec& kernel, double step,
                                        std::vector<double> resp_y, double resp_w, std::vector<double> nonresp_y,
                                        double nonresp_w, double min_mass) {
  std::sort(resp_y.begin(), resp_y.end());
  std::sort(nonresp_y.begin(), nonresp_y.end());
  const double h = kernel.bandwidth;
  const double peak = kernel_unit(kernel.family, 0.0);
  auto mass = [&](const std::vector<double>& v, double w, double t) {
    double m = 0.0;
    for (auto it = std::upper_bound(v.begin(), v.end(), t - h); it != v.end() && *it < t + h; ++it)
      m += kernel_unit(kernel.family, (*it - t) / h) / peak;
    return w * m;
  };
  std::vector<double> nodes;
  const double dx = step * h;
  const auto count = static_cast<long>(std::floor((hi - lo) / dx + 1e-9));
  for (long k = 0; k <= count; ++k) {
    const double t = lo + static_cast<double>(k) * dx;
    const double mr = mass(resp_y, resp_w, t);
    const double mn = mass(nonresp_y, nonresp_w, t);
    if (mr > 0.0 && mn > 0.0 && mr >= min_mass && mn >= min_mass) nodes.push_back(t);
  }
  return nodes;
}

inline FittedResponseModel boundary_fit(const Dataset& d, const EmConfig& cfg) {
  FittedResponseModel fit;
  fit.phi = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d.p()));
  std::vector<double> ys;
  for (std::size_t i = 0; i < d.n(); ++i)
    if (d.delta[i] == 1) ys.push_back(d.y_at(i));
  std::sort(ys.begin(), ys.end());
  ys.erase(std::unique(ys.begin(), ys.end()), ys.end());
  fit.g = TiltFunction::constant(ys, logit(1.0 - cfg.propensity_clamp),
                                 static_cast<Eigen::Index>(d.p()), cfg.bandwidth.value_or(0.0));
  fit.converged = true;
  fit.boundary = true;
  fit.propensity_clamp = cfg.propensity_clamp;
  fit.M = cfg.M;
  return fit;
}

inline void centre(TiltFunction& g, const ProfileLikelihood& lik, const std::vector<std::size_t>& resp_points) {
  if (resp_points.empty()) return;
  double mean = 0.0;
  for (std::size_t p : resp_points) mean += lik.g_at_point(g, p) - g.level;
  mean /= static_cast<double>(resp_points.size());
  for (double& v : g.g_values) v -= mean;
  g.level += mean;
}

struct Solution {
  Eigen::VectorXd phi;
  TiltFunction g;
  std::vector<IterationRecord> trace;
  bool converged = false;
  int iterations = 0;
};

/// Alternating phi / g ascent. reweight(g) returns new point weights or an
/// empty vector when the weights stay fixed.
template <class Reweight>
Solution solve(ProfileLikelihood& lik, TiltFunction g, Eigen::VectorXd phi, const EmConfig& cfg,
               const std::vector<std::size_t>& resp_points, Reweight&& reweight) {
  Solution sol;
  lik.set_phi(phi);
  for (int it = 1; it <= cfg.max_iter; ++it) {
    if (auto w = reweight(g); !w.empty()) lik.set_weights(w);
    IterationRecord rec;
    rec.iteration = it;
    if (!cfg.freeze_g) g.grad_values = lik.gradient_g(g);
    const PhiStep ps = lik.update_phi(g, cfg.step_halving_max);
    rec.q = ps.q_start;
    rec.q_damped = ps.q_after;
    rec.phi_step = ps.step;
    rec.delta_phi = phi.size() ? (ps.phi - phi).lpNorm<Eigen::Infinity>() : 0.0;
    phi = ps.phi;
    lik.set_phi(phi);

    double dg = 0.0;
    if (!cfg.freeze_g) {
      const GStep gs = lik.update_g(g, cfg.step_halving_max, logit(1.0 - cfg.propensity_clamp));
      rec.min_ltilde_gain = gs.min_gain;
      for (std::size_t k = 0; k < gs.values.size(); ++k) {
        dg = std::max(dg, std::abs(gs.values[k] - g.at_node(k)));
        g.g_values[k] = gs.values[k] - g.level;
      }
      centre(g, lik, resp_points);
    }
    rec.delta_g = dg;
    if (!std::isfinite(rec.q) || !phi.allFinite())
      throw Error(ErrorKind::NotConverged, "non-finite iterate at iteration " + std::to_string(it));
    sol.trace.push_back(rec);
    sol.iterations = it;
    if (rec.delta_phi < cfg.tol_phi && dg < cfg.tol_g) {
      sol.converged = true;
      break;
    }
  }
  if (!cfg.freeze_g) g.grad_values = lik.gradient_g(g);
  sol.phi = phi;
  sol.g = std::move(g);
  return sol;
}

}  // namespace detail

/// Profile likelihood fit when every outcome is known: one point per unit
/// at its true y with weight one.
inline FittedResponseModel fit_complete_profile(const Eigen::MatrixXd& x1, const std::vector<double>& y,
                                                const std::vector<int>& delta, const EmConfig& cfg) {
  cfg.validate();
  const std::size_t n = y.size();
  if (delta.size() != n || static_cast<std::size_t>(x1.rows()) != n)
    throw Error(ErrorKind::InvalidArgument, "complete-data arrays differ in length");
  std::vector<double> ry, ny;
  for (std::size_t i = 0; i < n; ++i) (delta[i] ? ry : ny).push_back(y[i]);
  if (ry.empty()) throw Error(ErrorKind::NoResponders, "no responders");

  Dataset d;
  d.x1 = x1;
  d.x2 = Eigen::MatrixXd(static_cast<Eigen::Index>(n), 0);
  d.delta = delta;
  for (std::size_t i = 0; i < n; ++i) {
    d.y.push_back(delta[i] ? std::optional<double>(y[i]) : std::nullopt);
    d.unit_ids.push_back(i);
  }
  if (ny.empty()) return detail::boundary_fit(d, cfg);

  const double h = cfg.bandwidth ? *cfg.bandwidth : rule_of_thumb_bandwidth(y, y.size(), cfg.kernel);
  const auto [lo, hi] = std::minmax_element(ry.begin(), ry.end());
  std::vector<double> nodes =
      detail::support_grid(*lo, *hi, {cfg.kernel, h}, cfg.grid_step, ry, 1.0, ny, 1.0, cfg.min_local_mass);
  if (nodes.empty()) throw Error(ErrorKind::NoLocalSupport, "no evaluation point has support from both groups");

  const MarFit mar = fit_mar_logistic(d);
  std::vector<char> responded(n);
  std::vector<std::size_t> unit(n), resp_points;
  for (std::size_t i = 0; i < n; ++i) {
    responded[i] = static_cast<char>(delta[i] == 1);
    unit[i] = i;
    if (delta[i]) resp_points.push_back(i);
  }
  ProfileLikelihood lik(x1, responded, unit, y, nodes, {cfg.kernel, h});
  TiltFunction g0 = TiltFunction::constant(nodes, mar.c_a, x1.cols(), h);
  const Eigen::VectorXd phi0 = cfg.phi_init ? *cfg.phi_init : mar.phi_a;
  auto sol = detail::solve(lik, std::move(g0), phi0, cfg, resp_points,
                           [](const TiltFunction&) { return std::vector<double>{}; });

  FittedResponseModel fit;
  fit.phi = sol.phi;
  fit.g = std::move(sol.g);
  fit.trace = std::move(sol.trace);
  fit.converged = sol.converged;
  fit.iterations = sol.iterations;
  fit.bandwidth = h;
  fit.propensity_clamp = cfg.propensity_clamp;
  fit.M = 0;
  return fit;
}

/// EM with fractional imputation. Imputations are drawn once from the
/// responder outcome model; each iteration reweights them by exp{-g} and
/// takes one damped ascent step in phi and in g.
inline FittedResponseModel run_em(const Dataset& d, const BasisSpec& basis, const EmConfig& cfg) {
  cfg.validate();
  if (!std::is_sorted(d.unit_ids.begin(), d.unit_ids.end())) {
    // fit in unit-id order so that no accumulation depends on row order
    std::vector<std::size_t> order(d.n());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return d.unit_ids[a] < d.unit_ids[b]; });
    FittedResponseModel fit = run_em(subset_rows(d, order, true), basis, cfg);
    for (auto& i : fit.nonresponders) i = order[i];
    return fit;
  }
  const auto [resp, nonresp] = split_responders(d);
  if (resp.empty()) throw Error(ErrorKind::NoResponders, "no responders");
  if (nonresp.empty()) {
    std::vector<double> y(d.n());
    for (std::size_t i = 0; i < d.n(); ++i) y[i] = d.y_at(i);
    FittedResponseModel fit = fit_complete_profile(d.x1, y, d.delta, cfg);
    return fit;
  }

  FittedResponseModel fit;
  fit.outcome = fit_outcome_model(d, basis);
  fit.nonresponders = nonresp;
  fit.propensity_clamp = cfg.propensity_clamp;
  fit.M = cfg.M;
  const Eigen::MatrixXd cov = d.covariates();
  for (std::size_t i : nonresp) {
    Rng rng = make_rng(cfg.seed, d.unit_ids[i]);
    fit.imputations.push_back(draw_imputations(*fit.outcome, cov.row(static_cast<Eigen::Index>(i)), cfg.M, rng));
  }

  // points: responders first, then M per nonresponder
  std::vector<std::size_t> point_unit, resp_points;
  std::vector<double> point_y, ry, ny;
  for (std::size_t i : resp) {
    resp_points.push_back(point_y.size());
    point_unit.push_back(i);
    point_y.push_back(d.y_at(i));
    ry.push_back(d.y_at(i));
  }
  for (std::size_t k = 0; k < nonresp.size(); ++k)
    for (double v : fit.imputations[k]) {
      point_unit.push_back(nonresp[k]);
      point_y.push_back(v);
      ny.push_back(v);
    }

  const double h = cfg.bandwidth ? *cfg.bandwidth
                                  : rule_of_thumb_bandwidth(point_y,
                                                            cfg.bandwidth_rule == BandwidthRule::units ? d.n()
                                                                                                       : point_y.size(),
                                                            cfg.kernel);
  const auto [lo, hi] = std::minmax_element(ry.begin(), ry.end());
  std::vector<double> nodes = detail::support_grid(*lo, *hi, {cfg.kernel, h}, cfg.grid_step, ry, 1.0, ny,
                                                  1.0 / static_cast<double>(cfg.M), cfg.min_local_mass);
  if (nodes.empty()) throw Error(ErrorKind::NoLocalSupport, "no evaluation point has support from both groups");

  const MarFit mar = fit_mar_logistic(d);
  std::vector<char> responded(d.n());
  for (std::size_t i = 0; i < d.n(); ++i) responded[i] = static_cast<char>(d.delta[i] == 1);
  ProfileLikelihood lik(d.x1, responded, point_unit, point_y, nodes, {cfg.kernel, h});

  const std::size_t r = resp.size();
  const auto M = static_cast<std::size_t>(cfg.M);
  auto reweight = [&](const TiltFunction& g) {
    const auto Mi = static_cast<Eigen::Index>(M);
    Eigen::ArrayXd a(static_cast<Eigen::Index>(point_y.size() - r));
    for (Eigen::Index q = 0; q < a.size(); ++q) a(q) = -lik.g_at_point(g, r + static_cast<std::size_t>(q));
    for (std::size_t k = 0; k < nonresp.size(); ++k) {
      auto block = a.segment(static_cast<Eigen::Index>(k) * Mi, Mi);
      block -= block.maxCoeff();
    }
    a = a.exp();
    std::vector<double> w(point_y.size(), 1.0);
    for (std::size_t k = 0; k < nonresp.size(); ++k) {
      const auto block = a.segment(static_cast<Eigen::Index>(k) * Mi, Mi);
      const double sum = block.sum();
      for (std::size_t j = 0; j < M; ++j) w[r + k * M + j] = block(static_cast<Eigen::Index>(j)) / sum;
    }
    return w;
  };

  TiltFunction g0 = TiltFunction::constant(nodes, mar.c_a, d.x1.cols(), h);
  const Eigen::VectorXd phi0 = cfg.phi_init ? *cfg.phi_init : mar.phi_a;
  auto sol = detail::solve(lik, std::move(g0), phi0, cfg, resp_points, reweight);

  fit.phi = sol.phi;
  fit.g = std::move(sol.g);
  fit.trace = std::move(sol.trace);
  fit.converged = sol.converged;
  fit.iterations = sol.iterations;
  fit.bandwidth = h;
  const std::vector<double> w = reweight(fit.g);
  for (std::size_t k = 0; k < nonresp.size(); ++k)
    fit.weights.emplace_back(w.begin() + static_cast<std::ptrdiff_t>(r + k * M),
                             w.begin() + static_cast<std::ptrdiff_t>(r + (k + 1) * M));
  return fit;
}

inline void write_trace_csv(std::ostream& out, const std::vector<IterationRecord>& trace) {
  out.precision(17);
  out << "iteration,q,q_damped,phi_step,min_ltilde_gain,delta_phi,delta_g\n";
  for (const auto& r : trace)
    out << r.iteration << ',' << r.q << ',' << r.q_damped << ',' << r.phi_step << ',' << r.min_ltilde_gain
        << ',' << r.delta_phi << ',' << r.delta_g << '\n';
}

}  // namespace nmar
