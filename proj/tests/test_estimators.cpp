#include <cmath>

#include <gtest/gtest.h>

#include "nmar/estimators.hpp"
#include "test_support.hpp"

using namespace nmar;

namespace {

/// Two-unit sample with a handcrafted response fit of known propensities.
Dataset two_units(int delta1) {
  Dataset d;
  d.x1 = Eigen::MatrixXd::Zero(2, 1);
  d.x2 = Eigen::MatrixXd::Zero(2, 0);
  d.delta = {1, delta1};
  d.y = {0.0, delta1 ? std::optional<double>(1.0) : std::nullopt};
  d.unit_ids = {0, 1};
  return d;
}

FittedResponseModel tilt_only(std::vector<double> points, std::vector<double> values) {
  FittedResponseModel f;
  f.phi = Eigen::VectorXd::Zero(1);
  f.g = TiltFunction::constant(std::move(points), 0.0, 1, 1.0);
  f.g.g_values = std::move(values);
  f.propensity_clamp = 1e-300;
  return f;
}

}  // namespace

TEST(Ipw, TwoResponderExample) {
  // pi = (0.5, 1): logistic(0) and logistic(40) == 1 in double precision
  const FittedResponseModel fit = tilt_only({0.0, 1.0}, {0.0, 40.0});
  const EstimateResult r = ipw_estimate(fit, two_units(1), EstimandSpec::mean());
  EXPECT_NEAR(r.theta, 1.0 / 3.0, 1e-12);
  EXPECT_LE(r.residual, kResidualTolerance);
}

TEST(Ipw, ConstantPropensityCancels) {
  const auto s = fixtures::simulated(Mechanism::R3, OutcomeKind::M2, 300, 31);
  FittedResponseModel fit = tilt_only({-1.0, 1.0}, {0.0, 0.0});
  fit.g.level = 0.37;
  EXPECT_NEAR(ipw_estimate(fit, s.data, EstimandSpec::mean()).theta, cc_estimate(s.data, EstimandSpec::mean()).theta,
              1e-12);
}

TEST(Ipw, AllRespondEqualsFullAndCc) {
  auto s = fixtures::simulated(Mechanism::R1, OutcomeKind::M3, 120, 32);
  for (std::size_t i = 0; i < s.data.n(); ++i) {
    s.data.delta[i] = 1;
    s.data.y[i] = s.pop.y[i];
  }
  const FittedResponseModel fit = run_em(s.data, BasisSpec::full_quadratic(2), EmConfig{});
  const double ipw = ipw_estimate(fit, s.data, EstimandSpec::mean()).theta;
  const double cc = cc_estimate(s.data, EstimandSpec::mean()).theta;
  const double full = full_estimate(s.pop.x, s.pop.y, EstimandSpec::mean()).theta;
  EXPECT_NEAR(ipw, cc, 1e-12);
  EXPECT_NEAR(cc, full, 1e-12);
}

TEST(Fi, WeightedImputationExample) {
  FittedResponseModel fit = tilt_only({0.0}, {0.0});
  fit.nonresponders = {1};
  fit.imputations = {{0.0, 1.0}};
  fit.weights = {{0.5, 0.5}};
  Dataset d = two_units(0);
  d.y[0] = 1.0;
  EXPECT_NEAR(fi_estimate(fit, d, EstimandSpec::mean()).theta, 0.75, 1e-12);
}

TEST(Fi, ClosedFormMean) {
  const auto s = fixtures::simulated(Mechanism::R2, OutcomeKind::M3, 200, 33);
  EmConfig cfg;
  cfg.M = 20;
  const FittedResponseModel fit = run_em(s.data, BasisSpec::full_quadratic(2), cfg);
  double sum = 0.0;
  for (std::size_t i = 0; i < s.data.n(); ++i)
    if (s.data.delta[i]) sum += s.data.y_at(i);
  for (std::size_t k = 0; k < fit.nonresponders.size(); ++k)
    for (std::size_t j = 0; j < fit.imputations[k].size(); ++j) sum += fit.weights[k][j] * fit.imputations[k][j];
  EXPECT_NEAR(fi_estimate(fit, s.data, EstimandSpec::mean()).theta, sum / static_cast<double>(s.data.n()), 1e-12);
}

TEST(FullAndCc, SampleMeans) {
  const auto s = fixtures::simulated(Mechanism::R1, OutcomeKind::M1, 100, 34);
  double all = 0.0, resp = 0.0;
  for (double v : s.pop.y) all += v;
  for (std::size_t i = 0; i < s.data.n(); ++i)
    if (s.data.delta[i]) resp += s.data.y_at(i);
  EXPECT_NEAR(full_estimate(s.pop.x, s.pop.y, EstimandSpec::mean()).theta, all / 100.0, 1e-12);
  EXPECT_NEAR(cc_estimate(s.data, EstimandSpec::mean()).theta, resp / static_cast<double>(s.data.responders()),
              1e-12);
}

TEST(ScalarRoot, GeneralEstimatingFunction) {
  // second moment: U = y^2 - theta
  const auto s = fixtures::simulated(Mechanism::R1, OutcomeKind::M3, 150, 35);
  const EstimandSpec sq = EstimandSpec::custom(
      "second_moment", [](double t, const Eigen::RowVectorXd&, double y) { return y * y - t; },
      [](double, const Eigen::RowVectorXd&, double) { return -1.0; });
  double m2 = 0.0;
  for (std::size_t i = 0; i < s.data.n(); ++i)
    if (s.data.delta[i]) m2 += s.data.y_at(i) * s.data.y_at(i);
  EXPECT_NEAR(cc_estimate(s.data, sq).theta, m2 / static_cast<double>(s.data.responders()), 1e-10);

  const RootResult r = solve_scalar_root([](double t) { return std::make_pair(std::tanh(t - 3.0), 1.0 / std::cosh(t - 3.0) / std::cosh(t - 3.0)); }, -20.0);
  EXPECT_NEAR(r.x, 3.0, 1e-10);
  EXPECT_THROW(solve_scalar_root([](double t) { return std::make_pair(1.0 + t * t, 2.0 * t); }, 0.0), Error);
}

TEST(KcGmm, RecoversResponseModelWithinThreeSe) {
  // delta from logistic(phi0 + phi1 x1 + phi2 y): the working model is correct
  const std::size_t n = 4000;
  const int reps = 12;
  const Eigen::Vector3d truth(0.2, 0.3, 0.4);
  std::vector<Eigen::VectorXd> est;
  for (int r = 0; r < reps; ++r) {
    Rng rng = make_rng(36, static_cast<std::uint64_t>(r));
    const Population pop = generate_population(OutcomeKind::M3, n, rng);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Dataset d;
    d.x1 = pop.x.col(0);
    d.x2 = pop.x.col(1);
    for (std::size_t i = 0; i < n; ++i) {
      const double eta = truth(0) + truth(1) * pop.x(static_cast<Eigen::Index>(i), 0) + truth(2) * pop.y[i];
      const int delta = u(rng) < 1.0 / (1.0 + std::exp(-eta)) ? 1 : 0;
      d.delta.push_back(delta);
      d.y.push_back(delta ? std::optional<double>(pop.y[i]) : std::nullopt);
      d.unit_ids.push_back(i);
    }
    est.push_back(kc_gmm_estimate(d, EstimandSpec::mean()).response_coef);
  }
  for (Eigen::Index j = 0; j < 3; ++j) {
    double m = 0.0, ss = 0.0;
    for (const auto& e : est) m += e(j);
    m /= reps;
    for (const auto& e : est) ss += (e(j) - m) * (e(j) - m);
    const double se = std::sqrt(ss / (reps - 1) / reps);
    EXPECT_LT(std::abs(m - truth(j)), 3.0 * se + 1e-3) << j;
  }
}

TEST(Riddles, ZeroTiltReducesToMarImputation) {
  const auto s = fixtures::simulated(Mechanism::R1, OutcomeKind::M3, 200, 37);
  RiddlesConfig rc;
  rc.M = 30;
  rc.seed = 5;
  const BasisSpec basis = BasisSpec::full_quadratic(2);
  const EstimateResult r = riddles_fi_estimate(s.data, basis, EstimandSpec::mean(), rc, 0.0);
  // uniform weights: each nonresponder contributes its plain imputation mean
  const OutcomeModel om = fit_outcome_model(s.data, basis);
  const Eigen::MatrixXd cov = s.data.covariates();
  double sum = 0.0;
  for (std::size_t i = 0; i < s.data.n(); ++i) {
    if (s.data.delta[i]) {
      sum += s.data.y_at(i);
      continue;
    }
    Rng rng = make_rng(rc.seed, s.data.unit_ids[i]);
    const auto imp = draw_imputations(om, cov.row(static_cast<Eigen::Index>(i)), rc.M, rng);
    double m = 0.0;
    for (double v : imp) m += v;
    sum += m / rc.M;
  }
  EXPECT_NEAR(r.theta, sum / static_cast<double>(s.data.n()), 1e-12);
}

TEST(Equivariance, LocationShiftEveryMethod) {
  const auto s = fixtures::simulated(Mechanism::R3, OutcomeKind::M3, 200, 38);
  const double c = 0.75;
  const Dataset moved = fixtures::shift_outcome(s.data, c);
  std::vector<double> ymoved = s.pop.y;
  for (double& v : ymoved) v += c;
  const EstimandSpec mean = EstimandSpec::mean();
  const BasisSpec basis = BasisSpec::full_quadratic(2);

  EXPECT_NEAR(full_estimate(s.pop.x, ymoved, mean).theta - full_estimate(s.pop.x, s.pop.y, mean).theta, c, 1e-10);
  EXPECT_NEAR(cc_estimate(moved, mean).theta - cc_estimate(s.data, mean).theta, c, 1e-10);
  EXPECT_NEAR(kc_gmm_estimate(moved, mean).theta - kc_gmm_estimate(s.data, mean).theta, c, 1e-10);

  RiddlesConfig rc;
  rc.M = 20;
  rc.tol = 1e-12;
  rc.max_iter = 2000;
  EXPECT_NEAR(riddles_fi_estimate(moved, basis, mean, rc).theta - riddles_fi_estimate(s.data, basis, mean, rc).theta,
              c, 1e-10);

  EmConfig cfg;
  cfg.M = 20;
  cfg.tol_phi = cfg.tol_g = 1e-12;
  cfg.max_iter = 5000;
  const FittedResponseModel a = run_em(s.data, basis, cfg);
  const FittedResponseModel b = run_em(moved, basis, cfg);
  ASSERT_TRUE(a.converged && b.converged);
  EXPECT_NEAR(ipw_estimate(b, moved, mean).theta - ipw_estimate(a, s.data, mean).theta, c, 1e-10);
  EXPECT_NEAR(fi_estimate(b, moved, mean).theta - fi_estimate(a, s.data, mean).theta, c, 1e-10);
}

TEST(Method, NamesRoundTrip) {
  for (Method m : {Method::full, Method::cc, Method::ipw_sp, Method::fi_sp, Method::kc_gmm, Method::riddles_fi})
    EXPECT_EQ(method_from_string(to_string(m)), m);
  EXPECT_EQ(method_from_string("sp_ipw"), Method::ipw_sp);
  EXPECT_THROW(method_from_string("nope"), Error);
}

TEST(BootstrapSe, DeterministicAndPositive) {
  const auto s = fixtures::simulated(Mechanism::R2, OutcomeKind::M3, 150, 39);
  auto est = [](const Dataset& d) { return cc_estimate(d, EstimandSpec::mean()).theta; };
  const auto a = bootstrap_se(s.data, 50, 3, 1, est);
  const auto b = bootstrap_se(s.data, 50, 3, 2, est);
  ASSERT_TRUE(a && b);
  EXPECT_GT(*a, 0.0);
  EXPECT_EQ(*a, *b);
}
