#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "nmar/logistic.hpp"
#include "nmar/simulation.hpp"
#include "test_support.hpp"

using namespace nmar;

namespace {

/// Logistic fit of delta on the given design columns, with standard errors.
std::pair<Eigen::VectorXd, Eigen::VectorXd> response_fit(const Eigen::MatrixXd& X, const std::vector<int>& delta) {
  const LogisticFit f = fit_logistic(X, delta, Eigen::VectorXd::Ones(X.rows()));
  Eigen::MatrixXd info = Eigen::MatrixXd::Zero(X.cols(), X.cols());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double p = logistic(X.row(i).dot(f.coef));
    info += p * (1.0 - p) * X.row(i).transpose() * X.row(i);
  }
  return {f.coef, info.inverse().diagonal().cwiseSqrt()};
}

}  // namespace

TEST(Population, OutcomeMeansMatchTruth) {
  for (OutcomeKind m : {OutcomeKind::M1, OutcomeKind::M2, OutcomeKind::M3}) {
    Rng rng = make_rng(51, static_cast<std::uint64_t>(m));
    const Population pop = generate_population(m, 1000000, rng);
    double s = 0.0;
    for (double v : pop.y) s += v;
    EXPECT_NEAR(s / 1e6, true_theta(m), 0.002) << to_string(m);
  }
}

TEST(Population, TruthsFromMoments) {
  // x1, x2 iid N(1, 1/4): E(x2 - 1/2)^2 = 1/4 + 1/4 and E(x1 x2) = 1
  EXPECT_DOUBLE_EQ(true_theta(OutcomeKind::M1), -1.0 + 0.25 + 0.25);
  EXPECT_DOUBLE_EQ(true_theta(OutcomeKind::M2), -2.75 + 1.0 + 1.0 + 1.0);
  EXPECT_DOUBLE_EQ(true_theta(OutcomeKind::M3), -1.75 + 1.0 + 1.0);
}

TEST(Response, R1IgnoresOutcome) {
  Rng rng = make_rng(52, 0);
  const Population pop = generate_population(OutcomeKind::M3, 20000, rng);
  const Dataset d = apply_response(Mechanism::R1, pop, rng);
  Eigen::MatrixXd X(pop.x.rows(), 3);
  X.col(0).setOnes();
  X.col(1) = pop.x.col(0);
  for (Eigen::Index i = 0; i < X.rows(); ++i) X(i, 2) = pop.y[static_cast<std::size_t>(i)];
  const auto [coef, se] = response_fit(X, d.delta);
  EXPECT_LT(std::abs(coef(2)), 3.0 * se(2));
  EXPECT_LT(std::abs(coef(1) - 0.2), 3.0 * se(1));
}

TEST(Response, Sim2RecoversTiltOnSquaredOutcome) {
  for (double phi_y : {0.0, 0.5}) {
    Rng rng = make_rng(53, static_cast<std::uint64_t>(phi_y * 10));
    const Population pop = generate_population(OutcomeKind::SIM2, 20000, rng);
    const Dataset d = apply_response(Mechanism::SIM2, pop, rng, phi_y);
    Eigen::MatrixXd X(pop.x.rows(), 3);
    X.col(0).setOnes();
    X.col(1) = pop.x.col(0);
    for (Eigen::Index i = 0; i < X.rows(); ++i) X(i, 2) = std::pow(pop.y[static_cast<std::size_t>(i)], 2);
    const auto [coef, se] = response_fit(X, d.delta);
    EXPECT_LT(std::abs(coef(0)), 3.0 * se(0)) << phi_y;
    EXPECT_LT(std::abs(coef(1) - 0.1), 3.0 * se(1)) << phi_y;
    EXPECT_LT(std::abs(coef(2) - phi_y), 3.0 * se(2)) << phi_y;
  }
}

TEST(Response, ProbabilitiesInUnitInterval) {
  for (int k = 0; k <= static_cast<int>(Mechanism::SIM2); ++k)
    for (double y : {-3.0, 0.0, 2.5})
      for (double x : {-1.0, 1.0, 3.0}) {
        const double p = response_probability(static_cast<Mechanism>(k), x, x, y, 1.0);
        EXPECT_GT(p, 0.0);
        EXPECT_LE(p, 1.0);
      }
}

TEST(Summarize, RmseIdentity) {
  ScenarioSpec s;
  std::vector<TidyRow> rows;
  const double truth = 0.25;
  for (int r = 0; r < 7; ++r) rows.push_back({s.label(), r, Method::cc, truth + 0.1 * std::sin(r + 1.0), truth, true, ""});
  rows.push_back({s.label(), 7, Method::cc, std::nullopt, truth, true, "failed"});
  const McCell c = summarize(rows, s, Method::cc);
  EXPECT_EQ(c.valid, 7);
  EXPECT_EQ(c.failures, 1);
  const double B = 7.0;
  EXPECT_NEAR(c.rmse * c.rmse, c.bias * c.bias + (B - 1.0) / B * c.std * c.std, 1e-10);
}

TEST(MonteCarlo, DeterministicAcrossWorkers) {
  ScenarioSpec s{OutcomeKind::M3, Mechanism::R1, 0.0, 120, 4, 10, 77};
  McOptions a, b;
  a.workers = 1;
  b.workers = 3;
  const std::vector<Method> methods{Method::full, Method::cc, Method::ipw_sp};
  std::ostringstream ta, tb;
  write_tidy(ta, monte_carlo({s}, methods, a));
  write_tidy(tb, monte_carlo({s}, methods, b));
  EXPECT_EQ(ta.str(), tb.str());
}

TEST(MonteCarlo, CellSeedIndependentOfOrder) {
  ScenarioSpec a{OutcomeKind::M3, Mechanism::R2, 0.0, 100, 3, 10, 5};
  ScenarioSpec b{OutcomeKind::M1, Mechanism::R3, 0.0, 100, 3, 10, 5};
  const std::vector<Method> methods{Method::full, Method::cc};
  const McReport ab = monte_carlo({a, b}, methods);
  const McReport ba = monte_carlo({b, a}, methods);
  EXPECT_EQ(ab.cells[0].bias, ba.cells[2].bias);
  EXPECT_EQ(ab.cells[3].bias, ba.cells[1].bias);
  EXPECT_NE(a.cell_seed(), b.cell_seed());
}

TEST(MonteCarlo, FullSampleMeanIsUnbiased) {
  ScenarioSpec s{OutcomeKind::M2, Mechanism::R2, 0.0, 200, 400, 10, 78};
  const McReport rep = monte_carlo({s}, {Method::full});
  const McCell& c = rep.cells.front();
  EXPECT_EQ(c.valid, 400);
  EXPECT_LT(std::abs(c.bias), 2.5 * c.std / std::sqrt(400.0));
}

TEST(Writers, TableLayout) {
  ScenarioSpec s{OutcomeKind::M3, Mechanism::R1, 0.0, 60, 2, 10, 79};
  const std::vector<Method> methods{Method::full, Method::cc};
  const McReport rep = monte_carlo({s}, methods);
  std::ostringstream report, table;
  write_mc_report(report, rep);
  write_mc_table(table, rep, methods);
  std::string line;
  std::istringstream r(report.str()), t(table.str());
  int nr = 0, nt = 0;
  while (std::getline(r, line)) ++nr;
  while (std::getline(t, line)) ++nt;
  EXPECT_EQ(nr, 1 + 2);
  EXPECT_EQ(nt, 1 + 3);
  EXPECT_EQ(table.str().substr(0, table.str().find('\n')), "mechanism,model,metric,full,cc");
}

TEST(Labels, RoundTrip) {
  for (int k = 0; k <= static_cast<int>(Mechanism::SIM2); ++k)
    EXPECT_EQ(mechanism_from_string(to_string(static_cast<Mechanism>(k))), static_cast<Mechanism>(k));
  EXPECT_EQ(outcome_from_string("M2"), OutcomeKind::M2);
  EXPECT_THROW(outcome_from_string("M7"), Error);
}
