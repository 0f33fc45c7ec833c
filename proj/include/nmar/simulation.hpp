#pragma once

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nmar/core_data.hpp"
#include "nmar/error.hpp"
#include "nmar/estimators.hpp"
#include "nmar/ignorability_test.hpp"
#include "nmar/math.hpp"
#include "nmar/outcome_model.hpp"
#include "nmar/parallel.hpp"
#include "nmar/profile_em.hpp"
#include "nmar/rng.hpp"

namespace nmar {

enum class OutcomeKind { M1, M2, M3, SIM2 };
enum class Mechanism { R1, R2, R3, R4, R5, R6, R7, R8, R9, SIM2 };

inline const char* to_string(OutcomeKind m) {
  switch (m) {
    case OutcomeKind::M1: return "M1";
    case OutcomeKind::M2: return "M2";
    case OutcomeKind::M3: return "M3";
    case OutcomeKind::SIM2: return "SIM2";
  }
  return "?";
}

inline const char* to_string(Mechanism m) {
  static const char* names[] = {"R1", "R2", "R3", "R4", "R5", "R6", "R7", "R8", "R9", "SIM2"};
  return names[static_cast<int>(m)];
}

inline OutcomeKind outcome_from_string(const std::string& s) {
  for (OutcomeKind m : {OutcomeKind::M1, OutcomeKind::M2, OutcomeKind::M3, OutcomeKind::SIM2})
    if (s == to_string(m)) return m;
  throw Error(ErrorKind::ConfigError, "unknown outcome model '" + s + "'");
}

inline Mechanism mechanism_from_string(const std::string& s) {
  for (int k = 0; k <= static_cast<int>(Mechanism::SIM2); ++k)
    if (s == to_string(static_cast<Mechanism>(k))) return static_cast<Mechanism>(k);
  throw Error(ErrorKind::ConfigError, "unknown response mechanism '" + s + "'");
}

/// E(y) under each outcome model with x ~ N((1,1), diag(0.25, 0.25)).
inline double true_theta(OutcomeKind m) {
  switch (m) {
    case OutcomeKind::M1: return -0.5;
    case OutcomeKind::M2: return 0.25;
    case OutcomeKind::M3: return 0.25;
    case OutcomeKind::SIM2: return 1.0;
  }
  return 0.0;
}

inline double outcome_mean(OutcomeKind m, double x1, double x2) {
  switch (m) {
    case OutcomeKind::M1: return -1.0 + (x2 - 0.5) * (x2 - 0.5);
    case OutcomeKind::M2: return -2.75 + x1 + x2 + x1 * x2;
    case OutcomeKind::M3: return -1.75 + x1 + x2;
    case OutcomeKind::SIM2: return -1.0 + x1 + x2;
  }
  return 0.0;
}

inline double normal_cdf(double t) { return 0.5 * std::erfc(-t / std::sqrt(2.0)); }

/// Response probability of each mechanism; `phi_y` is used by SIM2 only.
inline double response_probability(Mechanism m, double x1, double x2, double y, double phi_y = 0.0) {
  const double y2 = y * y;
  switch (m) {
    case Mechanism::R1: return logistic(0.7 + 0.2 * x1);
    case Mechanism::R2: return logistic(1.0 + 0.2 * x1 + 0.2 * y);
    case Mechanism::R3: return logistic(0.1 * x1 + 0.7 * y2);
    case Mechanism::R4: return logistic(0.1 * x1 * x1 + 0.5 * y2);
    case Mechanism::R5: return logistic(0.1 * std::exp(x1 - 1.0) + 0.6 * y2);
    case Mechanism::R6: return logistic(0.1 * x1 * y + 0.6 * y2);
    case Mechanism::R7: return normal_cdf(-0.1 * x1 + 0.6 * y2);
    case Mechanism::R8: return 1.0 - std::exp(-std::exp(-0.05 * x1 + 0.3 * y2));
    case Mechanism::R9: return logistic(0.1 * x2 + 0.7 * y2);
    case Mechanism::SIM2: return logistic(0.1 * x1 + phi_y * y2);
  }
  return 0.0;
}

/// Complete sample: covariate columns (x1, x2) and the outcome.
struct Population {
  Eigen::MatrixXd x;
  std::vector<double> y;
  std::size_t n() const { return y.size(); }
};

inline Population generate_population(OutcomeKind model, std::size_t n, Rng& rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  Population pop;
  pop.x.resize(static_cast<Eigen::Index>(n), 2);
  pop.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x1 = 1.0 + 0.5 * z(rng);
    const double x2 = 1.0 + 0.5 * z(rng);
    const double e = 0.5 * z(rng);
    pop.x(static_cast<Eigen::Index>(i), 0) = x1;
    pop.x(static_cast<Eigen::Index>(i), 1) = x2;
    pop.y[i] = outcome_mean(model, x1, x2) + e;
  }
  return pop;
}

/// Independent Bernoulli response indicators; x1 enters the fitted
/// response model and x2 is the instrument.
inline Dataset apply_response(Mechanism m, const Population& pop, Rng& rng, double phi_y = 0.0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Dataset d;
  const auto n = static_cast<Eigen::Index>(pop.n());
  d.x1 = pop.x.col(0);
  d.x2 = pop.x.col(1);
  d.x1_names = {"x1"};
  d.x2_names = {"x2"};
  d.delta.resize(pop.n());
  d.y.resize(pop.n());
  d.unit_ids.resize(pop.n());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    const double pi = response_probability(m, pop.x(i, 0), pop.x(i, 1), pop.y[k], phi_y);
    d.delta[k] = u(rng) < pi ? 1 : 0;
    if (d.delta[k]) d.y[k] = pop.y[k];
    d.unit_ids[k] = k;
  }
  return d;
}

struct ScenarioSpec {
  OutcomeKind model = OutcomeKind::M3;
  Mechanism mechanism = Mechanism::R1;
  double phi_y = 0.0;
  std::size_t n = 500;
  int B = 200;
  int M = 100;
  std::uint64_t seed = 0;

  std::string label() const { return std::string(to_string(mechanism)) + "/" + to_string(model); }

  // master stream of this cell: independent of the order cells are run in
  std::uint64_t cell_seed() const {
    std::uint64_t key = static_cast<std::uint64_t>(model) | (static_cast<std::uint64_t>(mechanism) << 8) |
                        (static_cast<std::uint64_t>(n) << 16);
    return derive_seed(derive_seed(seed, key), std::bit_cast<std::uint64_t>(phi_y));
  }
};

/// Realized share of responders in one generated sample.
inline double realized_response_rate(const ScenarioSpec& s) {
  Rng rng = make_rng(s.cell_seed(), 0);
  const Population pop = generate_population(s.model, s.n, rng);
  const Dataset d = apply_response(s.mechanism, pop, rng, s.phi_y);
  return static_cast<double>(d.responders()) / static_cast<double>(d.n());
}

struct McCell {
  std::string scenario;
  Mechanism mechanism = Mechanism::R1;
  OutcomeKind model = OutcomeKind::M1;
  Method method = Method::cc;
  double bias = 0.0;
  double std = 0.0;
  double rmse = 0.0;
  int valid = 0;
  int failures = 0;
  int not_converged = 0;
};

struct TidyRow {
  std::string scenario;
  int replicate = 0;
  Method method = Method::cc;
  std::optional<double> theta;
  double truth = 0.0;
  bool converged = true;
  std::string error;
};

struct McReport {
  std::vector<McCell> cells;
  std::vector<TidyRow> rows;
};

inline std::vector<Method> default_mc_methods() {
  return {Method::full, Method::cc, Method::kc_gmm, Method::riddles_fi, Method::ipw_sp};
}

struct McOptions {
  EmConfig em;            // seed is replaced per replicate
  BasisSpec basis = BasisSpec::full_quadratic(2);
  int workers = 1;
};

/// One replicate of one cell: every requested estimator on the same sample.
inline std::vector<TidyRow> run_replicate(const ScenarioSpec& s, int r, const std::vector<Method>& methods,
                                          const McOptions& opt) {
  Rng rng = make_rng(s.cell_seed(), static_cast<std::uint64_t>(r));
  const Population pop = generate_population(s.model, s.n, rng);
  const Dataset d = apply_response(s.mechanism, pop, rng, s.phi_y);
  const EstimandSpec mean = EstimandSpec::mean();
  const std::uint64_t impute_seed = derive_seed(s.cell_seed() ^ 0x5EEDULL, static_cast<std::uint64_t>(r));

  std::optional<FittedResponseModel> sp;
  std::string sp_error;
  auto need_sp = [&] {
    if (sp || !sp_error.empty()) return;
    EmConfig cfg = opt.em;
    cfg.M = s.M;
    cfg.seed = impute_seed;
    try {
      sp = run_em(d, opt.basis, cfg);
    } catch (const Error& e) {
      sp_error = e.what();
    }
  };

  std::vector<TidyRow> out;
  for (Method m : methods) {
    TidyRow row{s.label(), r, m, std::nullopt, true_theta(s.model), true, ""};
    try {
      switch (m) {
        case Method::full: row.theta = full_estimate(pop.x, pop.y, mean).theta; break;
        case Method::cc: row.theta = cc_estimate(d, mean).theta; break;
        case Method::kc_gmm: row.theta = kc_gmm_estimate(d, mean).theta; break;
        case Method::riddles_fi: {
          RiddlesConfig rc;
          rc.M = s.M;
          rc.seed = impute_seed;
          row.theta = riddles_fi_estimate(d, opt.basis, mean, rc).theta;
          break;
        }
        case Method::ipw_sp:
        case Method::fi_sp:
          need_sp();
          if (!sp) throw Error(ErrorKind::NotConverged, sp_error);
          row.converged = sp->converged;
          row.theta = (m == Method::ipw_sp ? ipw_estimate(*sp, d, mean) : fi_estimate(*sp, d, mean)).theta;
          break;
      }
    } catch (const Error& e) {
      row.theta.reset();
      row.error = e.what();
    }
    out.push_back(std::move(row));
  }
  return out;
}

/// bias = mean error, std with divisor B - 1, rmse = sqrt(mean squared error).
inline McCell summarize(const std::vector<TidyRow>& rows, const ScenarioSpec& s, Method m) {
  McCell c;
  c.scenario = s.label();
  c.mechanism = s.mechanism;
  c.model = s.model;
  c.method = m;
  std::vector<double> err;
  for (const auto& r : rows) {
    if (r.method != m) continue;
    if (!r.theta) {
      ++c.failures;
      continue;
    }
    if (!r.converged) ++c.not_converged;
    err.push_back(*r.theta - r.truth);
  }
  c.valid = static_cast<int>(err.size());
  if (err.empty()) {
    c.bias = c.std = c.rmse = std::numeric_limits<double>::quiet_NaN();
    return c;
  }
  double s1 = 0.0, s2 = 0.0;
  for (double e : err) {
    s1 += e;
    s2 += e * e;
  }
  const double B = static_cast<double>(err.size());
  c.bias = s1 / B;
  double ss = 0.0;
  for (double e : err) ss += (e - c.bias) * (e - c.bias);
  c.std = err.size() > 1 ? std::sqrt(ss / (B - 1.0)) : 0.0;
  c.rmse = std::sqrt(s2 / B);
  return c;
}

inline McReport monte_carlo(const std::vector<ScenarioSpec>& scenarios, const std::vector<Method>& methods,
                            const McOptions& opt = {}) {
  McReport rep;
  for (const auto& s : scenarios) {
    std::vector<std::vector<TidyRow>> per(static_cast<std::size_t>(s.B));
    parallel_for(per.size(), opt.workers,
                 [&](std::size_t r) { per[r] = run_replicate(s, static_cast<int>(r), methods, opt); });
    std::vector<TidyRow> rows;
    for (auto& v : per)
      for (auto& row : v) rows.push_back(std::move(row));
    for (Method m : methods) rep.cells.push_back(summarize(rows, s, m));
    for (auto& row : rows) rep.rows.push_back(std::move(row));
  }
  return rep;
}

struct PowerCell {
  std::size_t n = 0;
  double phi_y = 0.0;
  std::vector<double> alphas;
  std::vector<double> rejection;
  std::vector<double> p_values;
  int valid = 0;
  int failures = 0;
};

struct PowerOptions {
  std::vector<std::size_t> ns{100, 500};
  std::vector<double> phi_ys{0.0, 0.2, 0.5, 1.0};
  std::vector<double> alphas{0.01, 0.05, 0.1, 0.15, 0.2};
  int B_mc = 200;
  int B_boot = 200;
  int M = 100;
  std::uint64_t seed = 0;
  int workers = 1;
  EmConfig em;
  BasisSpec basis = BasisSpec::full_quadratic(2);
};

/// p-value of the bootstrap ignorability test on one generated sample.
inline double power_replicate(const ScenarioSpec& s, int r, const PowerOptions& opt) {
  Rng rng = make_rng(s.cell_seed(), static_cast<std::uint64_t>(r));
  const Population pop = generate_population(OutcomeKind::SIM2, s.n, rng);
  const Dataset d = apply_response(Mechanism::SIM2, pop, rng, s.phi_y);
  EmConfig cfg = opt.em;
  cfg.M = opt.M;
  cfg.seed = derive_seed(s.cell_seed() ^ 0x5EEDULL, static_cast<std::uint64_t>(r));
  const std::uint64_t boot_seed = derive_seed(s.cell_seed() ^ 0xB007ULL, static_cast<std::uint64_t>(r));
  return bootstrap_pvalue(d, opt.basis, cfg, opt.B_boot, boot_seed, 1).p_value;
}

/// Rejection rate at each level: share of replicates with p < alpha.
inline std::vector<PowerCell> power_study(const PowerOptions& opt) {
  std::vector<PowerCell> cells;
  for (std::size_t n : opt.ns)
    for (double phi_y : opt.phi_ys) {
      ScenarioSpec s{OutcomeKind::SIM2, Mechanism::SIM2, phi_y, n, opt.B_mc, opt.M, opt.seed};
      std::vector<std::optional<double>> p(static_cast<std::size_t>(opt.B_mc));
      parallel_for(p.size(), opt.workers, [&](std::size_t r) {
        try {
          p[r] = power_replicate(s, static_cast<int>(r), opt);
        } catch (const Error&) {
        }
      });
      PowerCell c;
      c.n = n;
      c.phi_y = phi_y;
      c.alphas = opt.alphas;
      for (const auto& v : p)
        if (v) c.p_values.push_back(*v);
      c.valid = static_cast<int>(c.p_values.size());
      c.failures = opt.B_mc - c.valid;
      for (double a : opt.alphas) {
        std::size_t rej = 0;
        for (double v : c.p_values)
          if (v < a) ++rej;
        c.rejection.push_back(c.valid ? static_cast<double>(rej) / c.valid : std::numeric_limits<double>::quiet_NaN());
      }
      cells.push_back(std::move(c));
    }
  return cells;
}

inline void write_mc_report(std::ostream& out, const McReport& rep) {
  out.precision(17);
  out << "scenario,mechanism,model,estimator,bias,std,rmse,valid,failures,not_converged\n";
  for (const auto& c : rep.cells)
    out << c.scenario << ',' << to_string(c.mechanism) << ',' << to_string(c.model) << ',' << to_string(c.method)
        << ',' << c.bias << ',' << c.std << ',' << c.rmse << ',' << c.valid << ',' << c.failures << ','
        << c.not_converged << '\n';
}

/// Table layout: one row per (mechanism, model, metric), one column per estimator.
inline void write_mc_table(std::ostream& out, const McReport& rep, const std::vector<Method>& methods) {
  out.precision(6);
  out << std::fixed;
  out << "mechanism,model,metric";
  for (Method m : methods) out << ',' << to_string(m);
  out << '\n';
  std::vector<std::string> order;
  std::map<std::string, std::map<Method, const McCell*>> by;
  for (const auto& c : rep.cells) {
    if (!by.count(c.scenario)) order.push_back(c.scenario);
    by[c.scenario][c.method] = &c;
  }
  for (const auto& sc : order) {
    const McCell* any = by[sc].begin()->second;
    for (const char* metric : {"bias", "std", "rmse"}) {
      out << to_string(any->mechanism) << ',' << to_string(any->model) << ',' << metric;
      for (Method m : methods) {
        out << ',';
        auto it = by[sc].find(m);
        if (it == by[sc].end()) continue;
        const McCell& c = *it->second;
        out << (metric[0] == 'b' ? c.bias : metric[0] == 's' ? c.std : c.rmse);
      }
      out << '\n';
    }
  }
  out.unsetf(std::ios::floatfield);
}

inline void write_tidy(std::ostream& out, const McReport& rep) {
  out.precision(17);
  out << "scenario,replicate,estimator,theta,truth,error,converged,message\n";
  for (const auto& r : rep.rows) {
    out << r.scenario << ',' << r.replicate << ',' << to_string(r.method) << ',';
    if (r.theta) out << *r.theta;
    out << ',' << r.truth << ',';
    if (r.theta) out << (*r.theta - r.truth);
    std::string msg = r.error;
    for (char& ch : msg)
      if (ch == ',' || ch == '\n') ch = ';';
    out << ',' << (r.converged ? 1 : 0) << ',' << msg << '\n';
  }
}

inline std::string shortest(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline void write_power_table(std::ostream& out, const std::vector<PowerCell>& cells) {
  out.precision(17);
  out << "n,phi_y";
  if (!cells.empty())
    for (double a : cells.front().alphas) out << ",alpha_" << shortest(a);
  out << ",valid,failures\n";
  for (const auto& c : cells) {
    out << c.n << ',' << shortest(c.phi_y);
    for (double r : c.rejection) out << ',' << r;
    out << ',' << c.valid << ',' << c.failures << '\n';
  }
}

}  // namespace nmar
