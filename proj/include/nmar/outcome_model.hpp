#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "nmar/core_data.hpp"
#include "nmar/error.hpp"
#include "nmar/kernel.hpp"
#include "nmar/rng.hpp"
#include "nmar/tilt.hpp"

namespace nmar {

/// Product of powers of covariate columns; column indices refer to [x1 | x2].
struct Monomial {
  std::vector<std::pair<std::size_t, int>> factors;

  double eval(const Eigen::RowVectorXd& x) const {
    double v = 1.0;
    for (auto [col, power] : factors) v *= std::pow(x(static_cast<Eigen::Index>(col)), power);
    return v;
  }

  bool operator<(const Monomial& o) const { return factors < o.factors; }
  bool operator==(const Monomial& o) const { return factors == o.factors; }
};

struct BasisSpec {
  std::vector<Monomial> terms;
  bool include_intercept = true;

  std::size_t size() const { return terms.size() + (include_intercept ? 1 : 0); }

  static BasisSpec linear(std::size_t k) {
    BasisSpec b;
    for (std::size_t c = 0; c < k; ++c) b.terms.push_back({{{c, 1}}});
    return b;
  }

  /// Linear terms, squares, then pairwise interactions, after the intercept.
  static BasisSpec full_quadratic(std::size_t k) {
    BasisSpec b = linear(k);
    for (std::size_t c = 0; c < k; ++c) b.terms.push_back({{{c, 2}}});
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t c = a + 1; c < k; ++c) b.terms.push_back({{{a, 1}, {c, 1}}});
    return b;
  }

  void validate(std::size_t covariate_count) const {
    std::set<Monomial> seen;
    for (const auto& t : terms) {
      if (t.factors.empty()) throw Error(ErrorKind::InvalidArgument, "empty basis term");
      for (auto [col, power] : t.factors) {
        if (col >= covariate_count)
          throw Error(ErrorKind::InvalidArgument, "basis term references covariate " +
                                                      std::to_string(col) + " of " +
                                                      std::to_string(covariate_count));
        if (power < 1) throw Error(ErrorKind::InvalidArgument, "basis powers must be positive");
      }
      if (!seen.insert(t).second) throw Error(ErrorKind::InvalidArgument, "duplicate basis term");
    }
    if (size() == 0) throw Error(ErrorKind::InvalidArgument, "empty basis");
  }

  Eigen::RowVectorXd expand(const Eigen::RowVectorXd& x) const {
    Eigen::RowVectorXd row(static_cast<Eigen::Index>(size()));
    Eigen::Index j = 0;
    if (include_intercept) row(j++) = 1.0;
    for (const auto& t : terms) row(j++) = t.eval(x);
    return row;
  }

  Eigen::MatrixXd design(const Eigen::MatrixXd& covariates) const {
    Eigen::MatrixXd X(covariates.rows(), static_cast<Eigen::Index>(size()));
    for (Eigen::Index i = 0; i < covariates.rows(); ++i) X.row(i) = expand(covariates.row(i));
    return X;
  }

  std::string describe(const std::vector<std::string>& names) const {
    std::ostringstream os;
    bool first = true;
    if (include_intercept) {
      os << "1";
      first = false;
    }
    for (const auto& t : terms) {
      os << (first ? "" : " + ");
      first = false;
      for (std::size_t f = 0; f < t.factors.size(); ++f) {
        const auto [col, power] = t.factors[f];
        os << (f ? "*" : "") << (col < names.size() ? names[col] : "c" + std::to_string(col));
        if (power != 1) os << "^" << power;
      }
    }
    return os.str();
  }
};

inline constexpr double kSigma2Floor = 1e-8;

/// Normal regression of y on a basis expansion of [x1 | x2], fitted on responders.
struct OutcomeModel {
  BasisSpec basis;
  Eigen::VectorXd beta;
  double sigma2 = 1.0;
  bool sigma2_floored = false;
  std::size_t responders = 0;

  double mean(const Eigen::RowVectorXd& x) const { return basis.expand(x).dot(beta); }
};

/// Solves the responder score equation. For the normal family this is least
/// squares for beta and RSS / r for the variance.
inline OutcomeModel fit_outcome_model(const Dataset& d, const BasisSpec& basis) {
  const Eigen::MatrixXd cov = d.covariates();
  basis.validate(static_cast<std::size_t>(cov.cols()));
  const auto [resp, nonresp] = split_responders(d);
  (void)nonresp;
  const std::size_t r = resp.size();
  if (r < basis.size() + 2)
    throw Error(ErrorKind::TooFewResponders, std::to_string(r) + " responders for a " +
                                                 std::to_string(basis.size()) + "-term basis");
  Eigen::MatrixXd X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(basis.size()));
  Eigen::VectorXd y(static_cast<Eigen::Index>(r));
  for (std::size_t k = 0; k < r; ++k) {
    X.row(static_cast<Eigen::Index>(k)) = basis.expand(cov.row(static_cast<Eigen::Index>(resp[k])));
    y(static_cast<Eigen::Index>(k)) = d.y_at(resp[k]);
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  qr.setThreshold(1e-10);
  if (qr.rank() < X.cols())
    throw Error(ErrorKind::RankDeficient, "responder design has rank " + std::to_string(qr.rank()) +
                                              " < " + std::to_string(X.cols()));
  OutcomeModel m;
  m.basis = basis;
  m.beta = qr.solve(y);
  // one refinement step keeps the residual score at round-off level
  m.beta += qr.solve(Eigen::VectorXd(y - X * m.beta));
  const double rss = (y - X * m.beta).squaredNorm();
  m.sigma2 = rss / static_cast<double>(r);
  if (m.sigma2 < kSigma2Floor) {
    m.sigma2 = kSigma2Floor;
    m.sigma2_floored = true;
  }
  m.responders = r;
  return m;
}

/// Score of the normal log-likelihood, summed over responders: (d/d beta, d/d sigma2).
inline Eigen::VectorXd outcome_score(const OutcomeModel& m, const Dataset& d) {
  const Eigen::MatrixXd cov = d.covariates();
  const auto k = static_cast<Eigen::Index>(m.basis.size());
  Eigen::VectorXd s = Eigen::VectorXd::Zero(k + 1);
  for (std::size_t i = 0; i < d.n(); ++i) {
    if (d.delta[i] != 1) continue;
    const Eigen::RowVectorXd row = m.basis.expand(cov.row(static_cast<Eigen::Index>(i)));
    const double e = d.y_at(i) - row.dot(m.beta);
    s.head(k) += row.transpose() * (e / m.sigma2);
    s(k) += -0.5 / m.sigma2 + 0.5 * e * e / (m.sigma2 * m.sigma2);
  }
  return s;
}

/// M independent draws from N(basis(x) beta, sigma2).
inline std::vector<double> draw_imputations(const OutcomeModel& m, const Eigen::RowVectorXd& x,
                                            int M, Rng& rng) {
  if (M < 1) throw Error(ErrorKind::InvalidArgument, "imputation count must be >= 1");
  std::normal_distribution<double> z(0.0, 1.0);
  const double mu = m.mean(x);
  const double sd = std::sqrt(m.sigma2);
  std::vector<double> out(static_cast<std::size_t>(M));
  for (auto& v : out) v = mu + sd * z(rng);
  return out;
}

/// Per-covariate rule-of-thumb bandwidths over responders.
inline Eigen::VectorXd np_bandwidths(const Dataset& d) {
  const Eigen::MatrixXd cov = d.covariates();
  Eigen::VectorXd h(cov.cols());
  for (Eigen::Index c = 0; c < cov.cols(); ++c) {
    std::vector<double> v;
    for (std::size_t i = 0; i < d.n(); ++i)
      if (d.delta[i] == 1) v.push_back(cov(static_cast<Eigen::Index>(i), c));
    h(c) = silverman_bandwidth(v);
  }
  return h;
}

/// Kernel estimate of E{A(x1, Y) | x, delta = 0} that needs no outcome model:
/// responders are reweighted by the product kernel in x and by exp{-g(y)}.
inline double np_conditional_expectation(
    const Dataset& d, const TiltFunction& g,
    const std::function<double(const Eigen::RowVectorXd& x1, double y)>& A,
    const Eigen::RowVectorXd& x_target, const Eigen::VectorXd& bandwidths,
    KernelFamily family = KernelFamily::epanechnikov) {
  const Eigen::MatrixXd cov = d.covariates();
  if (x_target.size() != cov.cols() || bandwidths.size() != cov.cols())
    throw Error(ErrorKind::InvalidArgument, "target / bandwidth dimension mismatch");
  const Eigen::RowVectorXd x1_target = x_target.head(d.p());
  double num = 0.0, den = 0.0;
  double emax = 0.0;
  // exp{-g} is shifted by the largest exponent among contributors
  std::vector<std::pair<double, double>> contrib;  // (kernel weight, -g)
  std::vector<std::size_t> who;
  for (std::size_t j = 0; j < d.n(); ++j) {
    if (d.delta[j] != 1) continue;
    double k = 1.0;
    for (Eigen::Index c = 0; c < cov.cols() && k > 0.0; ++c)
      k *= kernel_weight({family, bandwidths(c)}, cov(static_cast<Eigen::Index>(j), c) - x_target(c));
    if (k <= 0.0) continue;
    const double e = -evaluate_g(g, d.y_at(j));
    if (contrib.empty() || e > emax) emax = e;
    contrib.emplace_back(k, e);
    who.push_back(j);
  }
  if (contrib.empty())
    throw Error(ErrorKind::NoLocalSupport, "no responder has positive kernel weight at the target");
  for (std::size_t t = 0; t < contrib.size(); ++t) {
    const double w = contrib[t].first * std::exp(contrib[t].second - emax);
    num += w * A(x1_target, d.y_at(who[t]));
    den += w;
  }
  return num / den;
}

}  // namespace nmar
