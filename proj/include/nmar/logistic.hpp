#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "nmar/core_data.hpp"
#include "nmar/error.hpp"
#include "nmar/math.hpp"

namespace nmar {

struct LogisticFit {
  Eigen::VectorXd coef;
  double loglik = 0.0;
  Eigen::VectorXd score;
  int iterations = 0;
};

/// Weighted binary logistic regression by damped Newton-Raphson.
/// Rows with label 1 contribute w log pi, label 0 contribute w log(1 - pi).
inline LogisticFit fit_logistic(const Eigen::MatrixXd& X, const std::vector<int>& label,
                                const Eigen::VectorXd& weight,
                                const Eigen::VectorXd* start = nullptr, int max_iter = 100) {
  const Eigen::Index n = X.rows(), k = X.cols();
  double w1 = 0.0, w0 = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) (label[static_cast<std::size_t>(i)] ? w1 : w0) += weight(i);
  if (w1 <= 0.0 || w0 <= 0.0)
    throw Error(ErrorKind::Separation, "all responses in one class; the likelihood is monotone");
  {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    qr.setThreshold(1e-10);
    if (qr.rank() < k) throw Error(ErrorKind::RankDeficient, "logistic design is rank deficient");
  }

  Eigen::ArrayXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y(i) = label[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
  const Eigen::ArrayXd sign = 2.0 * y - 1.0;
  const Eigen::ArrayXd w = weight.array();
  // sum of w log pi (label 1) and w log(1 - pi) (label 0)
  auto loglik = [&](const Eigen::VectorXd& b) {
    const Eigen::ArrayXd z = -sign * (X * b).array();
    const Eigen::ArrayXd e = (-z.abs()).exp();
    return -(w * (z.max(0.0) + (1.0 + e).log())).sum();
  };
  auto score = [&](const Eigen::ArrayXd& p) { return Eigen::VectorXd(X.transpose() * (w * (y - p)).matrix()); };
  auto probs = [&](const Eigen::VectorXd& b) { return Eigen::ArrayXd(1.0 / (1.0 + (-(X * b).array()).exp())); };

  LogisticFit fit;
  fit.coef = start ? *start : Eigen::VectorXd::Zero(k);
  double ll = loglik(fit.coef);
  const double scale = weight.sum();
  for (int it = 1; it <= max_iter; ++it) {
    const Eigen::ArrayXd p = probs(fit.coef);
    const Eigen::VectorXd grad = score(p);
    const Eigen::MatrixXd Xv = X.array().colwise() * (w * p * (1.0 - p));
    const Eigen::MatrixXd info = X.transpose() * Xv;
    fit.score = grad;
    fit.iterations = it;
    if (grad.lpNorm<Eigen::Infinity>() <= 1e-11 * std::max(1.0, scale)) break;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
    if (ldlt.info() != Eigen::Success || ldlt.vectorD().minCoeff() <= 0.0)
      throw Error(ErrorKind::Separation, "information matrix lost definiteness");
    const Eigen::VectorXd step = ldlt.solve(grad);
    double s = 1.0;
    Eigen::VectorXd cand = fit.coef + step;
    double ll_c = loglik(cand);
    for (int h = 0; h < 30 && !(ll_c >= ll); ++h) {
      s *= 0.5;
      cand = fit.coef + s * step;
      ll_c = loglik(cand);
    }
    if (!(ll_c >= ll)) break;
    const bool stalled = cand == fit.coef;
    fit.coef = cand;
    ll = ll_c;
    if (fit.coef.lpNorm<Eigen::Infinity>() > 50.0)
      throw Error(ErrorKind::Separation, "coefficients diverge (quasi-complete separation)");
    if (stalled) break;
  }
  fit.loglik = ll;
  fit.score = score(probs(fit.coef));
  return fit;
}

/// MAR response model pi = logistic(c + x1' phi), the null of the ignorability test.
struct MarFit {
  Eigen::VectorXd phi_a;
  double c_a = 0.0;
  double loglik = 0.0;
  Eigen::VectorXd score;  // (c, phi) order
  int iterations = 0;

  double linear_predictor(const Eigen::RowVectorXd& x1) const {
    return c_a + (phi_a.size() ? x1.dot(phi_a) : 0.0);
  }
  double prob(const Eigen::RowVectorXd& x1) const { return logistic(linear_predictor(x1)); }
};

/// Maximum-likelihood logistic regression of delta on (1, x1).
inline MarFit fit_mar_logistic(const Dataset& d) {
  const auto n = static_cast<Eigen::Index>(d.n());
  if (n == 0) throw Error(ErrorKind::NoResponders, "empty dataset");
  Eigen::MatrixXd X(n, 1 + d.p());
  X.col(0).setOnes();
  if (d.p()) X.rightCols(d.p()) = d.x1;
  const LogisticFit f = fit_logistic(X, d.delta, Eigen::VectorXd::Ones(n));
  MarFit m;
  m.c_a = f.coef(0);
  m.phi_a = f.coef.tail(d.p());
  m.loglik = f.loglik;
  m.score = f.score;
  m.iterations = f.iterations;
  return m;
}

}  // namespace nmar
