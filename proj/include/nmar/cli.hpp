#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include "json.hpp"

#include "nmar/core_data.hpp"
#include "nmar/error.hpp"
#include "nmar/estimators.hpp"
#include "nmar/ignorability_test.hpp"
#include "nmar/logistic.hpp"
#include "nmar/outcome_model.hpp"
#include "nmar/profile_em.hpp"
#include "nmar/simulation.hpp"

namespace nmar::cli {

inline constexpr const char* kVersion = "1.0.0";

enum ExitCode { ok = 0, config_error = 1, data_error = 2, numerical_error = 3 };

using Settings = std::map<std::string, std::string>;

/// Every recognised key with its default. An empty default means unset.
inline const Settings& defaults() {
  static const Settings d{
      {"command", ""},
      {"seed", ""},
      {"out", "out"},
      {"workers", "1"},
      {"input", ""},
      {"roles.x1", "x1"},
      {"roles.x2", "x2"},
      {"roles.y", "y"},
      {"roles.delta", "delta"},
      {"basis", "quadratic"},
      {"estimators", ""},
      {"em.M", "100"},
      {"em.max_iter", "200"},
      {"em.tol_phi", "1e-06"},
      {"em.tol_g", "1e-06"},
      {"em.propensity_clamp", "0.001"},
      {"em.step_halving_max", "20"},
      {"em.grid_step", "0.33333333333333331"},
      {"em.min_local_mass", "1"},
      {"em.kernel", "epanechnikov"},
      {"em.bandwidth", "auto"},
      {"em.bandwidth_rule", "units"},
      {"estimate.bootstrap_B", "0"},
      {"test.B", "200"},
      {"simulate.scenarios", "R1/M3"},
      {"simulate.n", "500"},
      {"simulate.B", "200"},
      {"power.ns", "100,500"},
      {"power.phi_ys", "0,0.2,0.5,1"},
      {"power.alphas", "0.01,0.05,0.1,0.15,0.2"},
      {"power.B_mc", "200"},
      {"power.B_boot", "200"},
  };
  return d;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    cur = detail::trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

inline void set_key(Settings& s, const std::string& key, const std::string& value) {
  if (!defaults().count(key)) throw Error(ErrorKind::ConfigError, "unknown config key '" + key + "'");
  s[key] = value;
}

/// key = value lines; `[section]` prefixes following keys with "section.".
/// Blank lines and lines starting with '#' or ';' are ignored.
inline Settings parse_config_text(const std::string& text) {
  Settings s;
  std::istringstream in(text);
  std::string line, section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw Error(ErrorKind::ConfigError, "line " + std::to_string(line_no) + ": bad section");
      section = detail::trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorKind::ConfigError, "line " + std::to_string(line_no) + ": expected key = value");
    std::string key = detail::trim(t.substr(0, eq));
    std::string value = detail::trim(t.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (!section.empty()) key = section + "." + key;
    set_key(s, key, value);
  }
  return s;
}

/// A manifest written by a previous run: its "config" object.
inline Settings parse_manifest(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ConfigError, std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!j.contains("config") || !j["config"].is_object())
    throw Error(ErrorKind::ConfigError, "manifest has no config object");
  Settings s;
  for (const auto& [k, v] : j["config"].items()) set_key(s, k, v.is_string() ? v.get<std::string>() : v.dump());
  return s;
}

inline Settings load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ConfigError, "cannot open config '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return std::filesystem::path(path).extension() == ".json" ? parse_manifest(buf.str()) : parse_config_text(buf.str());
}

/// Defaults overlaid with file settings, then command-line overrides.
inline Settings resolve(const Settings& file, const Settings& overrides) {
  Settings s = defaults();
  for (const auto& [k, v] : file) s[k] = v;
  for (const auto& [k, v] : overrides) s[k] = v;
  return s;
}

template <class T>
T parse_number(const Settings& s, const std::string& key) {
  const std::string& v = s.at(key);
  try {
    std::size_t pos = 0;
    T out;
    if constexpr (std::is_floating_point_v<T>)
      out = static_cast<T>(std::stod(v, &pos));
    else if constexpr (std::is_unsigned_v<T>)
      out = static_cast<T>(std::stoull(v, &pos));
    else
      out = static_cast<T>(std::stoll(v, &pos));
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw Error(ErrorKind::ConfigError, "key '" + key + "' has non-numeric value '" + v + "'");
  }
}

template <class T>
std::vector<T> parse_number_list(const Settings& s, const std::string& key) {
  std::vector<T> out;
  for (const auto& item : split_list(s.at(key))) {
    Settings one{{key, item}};
    out.push_back(parse_number<T>(one, key));
  }
  if (out.empty()) throw Error(ErrorKind::ConfigError, "key '" + key + "' is empty");
  return out;
}

inline EmConfig em_config(const Settings& s) {
  EmConfig c;
  c.M = parse_number<int>(s, "em.M");
  c.max_iter = parse_number<int>(s, "em.max_iter");
  c.tol_phi = parse_number<double>(s, "em.tol_phi");
  c.tol_g = parse_number<double>(s, "em.tol_g");
  c.propensity_clamp = parse_number<double>(s, "em.propensity_clamp");
  c.step_halving_max = parse_number<int>(s, "em.step_halving_max");
  c.grid_step = parse_number<double>(s, "em.grid_step");
  c.min_local_mass = parse_number<double>(s, "em.min_local_mass");
  c.kernel = kernel_family_from_string(s.at("em.kernel"));
  if (s.at("em.bandwidth") != "auto") c.bandwidth = parse_number<double>(s, "em.bandwidth");
  c.bandwidth_rule = bandwidth_rule_from_string(s.at("em.bandwidth_rule"));
  c.seed = parse_number<std::uint64_t>(s, "seed");
  c.validate();
  return c;
}

inline BasisSpec basis_for(const Settings& s, std::size_t covariates) {
  const std::string& b = s.at("basis");
  if (b == "quadratic") return BasisSpec::full_quadratic(covariates);
  if (b == "linear") return BasisSpec::linear(covariates);
  throw Error(ErrorKind::ConfigError, "basis must be 'quadratic' or 'linear', got '" + b + "'");
}

inline std::vector<Method> methods_for(const Settings& s, const std::vector<Method>& fallback) {
  if (s.at("estimators").empty()) return fallback;
  std::vector<Method> out;
  for (const auto& m : split_list(s.at("estimators"))) out.push_back(method_from_string(m));
  return out;
}

inline ScenarioSpec scenario_from_label(const std::string& label) {
  const auto slash = label.find('/');
  if (slash == std::string::npos)
    throw Error(ErrorKind::ConfigError, "scenario '" + label + "' is not of the form MECHANISM/MODEL");
  ScenarioSpec sc;
  try {
    sc.mechanism = mechanism_from_string(label.substr(0, slash));
    sc.model = outcome_from_string(label.substr(slash + 1));
  } catch (const Error& e) {
    throw Error(ErrorKind::ConfigError, e.what());
  }
  return sc;
}

/// Run state shared by every command.
struct Context {
  Settings settings;
  std::string command;
  std::filesystem::path out;
  std::uint64_t seed = 0;
  int workers = 1;
  std::vector<std::string> outputs;
  std::ostream* log = &std::cerr;

  std::ofstream open(const std::string& name) {
    std::ofstream f(out / name, std::ios::binary);
    if (!f) throw Error(ErrorKind::ConfigError, "cannot write '" + (out / name).string() + "'");
    outputs.push_back(name);
    return f;
  }
};

inline Dataset load_input(const Context& ctx) {
  const std::string& path = ctx.settings.at("input");
  if (path.empty()) throw Error(ErrorKind::ConfigError, "command '" + ctx.command + "' needs input");
  if (!std::filesystem::exists(path)) throw Error(ErrorKind::ConfigError, "input '" + path + "' does not exist");
  ColumnRoles roles;
  roles.x1_columns = split_list(ctx.settings.at("roles.x1"));
  roles.x2_columns = split_list(ctx.settings.at("roles.x2"));
  roles.y_column = ctx.settings.at("roles.y");
  roles.delta_column = ctx.settings.at("roles.delta");
  try {
    Dataset d = validate_dataset(read_csv_file(path), roles);
    for (const auto& w : d.warnings) *ctx.log << "warning: " << w << '\n';
    return d;
  } catch (const Error& e) {
    // every failure while reading the sample is a data error
    if (is_data_error(e.kind())) throw;
    throw Error(ErrorKind::ParseError, e.what());
  }
}

inline void write_estimates(std::ostream& out, const std::vector<EstimateResult>& rows) {
  out.precision(17);
  out << "estimator,theta,iterations,residual,bootstrap_se\n";
  for (const auto& r : rows) {
    out << to_string(r.method) << ',' << r.theta << ',' << r.iterations << ',' << r.residual << ',';
    if (r.bootstrap_se) out << *r.bootstrap_se;
    out << '\n';
  }
}

/// Evaluation points with the fitted tilt and its phi-gradient.
inline void write_g_curve(std::ostream& out, const FittedResponseModel& fit, const std::vector<std::string>& x1_names) {
  out.precision(17);
  out << "y,g";
  for (const auto& n : x1_names) out << ",grad_" << n;
  out << '\n';
  for (std::size_t k = 0; k < fit.g.size(); ++k) {
    out << fit.g.eval_points[k] << ',' << fit.g.at_node(k);
    for (Eigen::Index c = 0; c < fit.g.grad_values.cols(); ++c)
      out << ',' << fit.g.grad_values(static_cast<Eigen::Index>(k), c);
    out << '\n';
  }
}

inline std::vector<EstimateResult> estimate_all(const Dataset& d, const BasisSpec& basis, const EmConfig& em,
                                                const std::vector<Method>& methods, const FittedResponseModel& fit) {
  const EstimandSpec mean = EstimandSpec::mean();
  RiddlesConfig rc;
  rc.M = em.M;
  rc.seed = em.seed;
  std::vector<EstimateResult> out;
  for (Method m : methods) {
    switch (m) {
      case Method::full: {
        if (d.responders() != d.n())
          throw Error(ErrorKind::ConfigError, "the full-sample estimator needs every outcome observed");
        std::vector<double> y(d.n());
        for (std::size_t i = 0; i < d.n(); ++i) y[i] = d.y_at(i);
        out.push_back(full_estimate(d.covariates(), y, mean));
        break;
      }
      case Method::cc: out.push_back(cc_estimate(d, mean)); break;
      case Method::ipw_sp: out.push_back(ipw_estimate(fit, d, mean)); break;
      case Method::fi_sp: out.push_back(fi_estimate(fit, d, mean)); break;
      case Method::kc_gmm: out.push_back(kc_gmm_estimate(d, mean)); break;
      case Method::riddles_fi: out.push_back(riddles_fi_estimate(d, basis, mean, rc)); break;
    }
  }
  return out;
}

inline void run_estimate(Context& ctx) {
  const Dataset d = load_input(ctx);
  const EmConfig em = em_config(ctx.settings);
  const BasisSpec basis = basis_for(ctx.settings, static_cast<std::size_t>(d.p() + d.q()));
  const auto methods =
      methods_for(ctx.settings, {Method::ipw_sp, Method::fi_sp, Method::cc, Method::kc_gmm, Method::riddles_fi});
  const int B = parse_number<int>(ctx.settings, "estimate.bootstrap_B");

  const FittedResponseModel fit = run_em(d, basis, em);
  if (!fit.converged) *ctx.log << "warning: EM stopped at max_iter without meeting the tolerances\n";
  std::vector<EstimateResult> rows = estimate_all(d, basis, em, methods, fit);
  if (B > 0) {
    for (auto& r : rows) {
      if (r.method == Method::full) continue;
      const Method m = r.method;
      r.bootstrap_se = bootstrap_se(d, B, derive_seed(ctx.seed, static_cast<std::uint64_t>(m)), ctx.workers,
                                    [&](const Dataset& db) {
                                      EmConfig eb = em;
                                      FittedResponseModel fb;
                                      if (m == Method::ipw_sp || m == Method::fi_sp) fb = run_em(db, basis, eb);
                                      return estimate_all(db, basis, eb, {m}, fb).front().theta;
                                    });
    }
  }
  {
    auto f = ctx.open("estimates.csv");
    write_estimates(f, rows);
  }
  {
    auto f = ctx.open("fit_trace.csv");
    write_trace_csv(f, fit.trace);
  }
  {
    auto f = ctx.open("g_curve.csv");
    write_g_curve(f, fit, d.x1_names);
  }
}

inline nlohmann::json report_json(const TestReport& r) {
  nlohmann::json j;
  j["statistic"] = r.statistic;
  j["p_value"] = r.p_value;
  j["B"] = r.B;
  j["failures"] = r.failures;
  j["seed"] = r.seed;
  return j;
}

inline void run_test(Context& ctx) {
  const Dataset d = load_input(ctx);
  const EmConfig em = em_config(ctx.settings);
  const BasisSpec basis = basis_for(ctx.settings, static_cast<std::size_t>(d.p() + d.q()));
  const int B = parse_number<int>(ctx.settings, "test.B");
  const TestReport rep = bootstrap_pvalue(d, basis, em, B, derive_seed(ctx.seed, 0x7E57ULL), ctx.workers);
  auto f = ctx.open("test_report.json");
  f << report_json(rep).dump(2) << '\n';
}

inline void run_simulate(Context& ctx) {
  McOptions opt;
  opt.em = em_config(ctx.settings);
  opt.basis = basis_for(ctx.settings, 2);
  opt.workers = ctx.workers;
  const auto methods = methods_for(ctx.settings, default_mc_methods());
  std::vector<ScenarioSpec> scenarios;
  for (const auto& label : split_list(ctx.settings.at("simulate.scenarios"))) {
    ScenarioSpec s = scenario_from_label(label);
    s.n = parse_number<std::size_t>(ctx.settings, "simulate.n");
    s.B = parse_number<int>(ctx.settings, "simulate.B");
    s.M = opt.em.M;
    s.seed = ctx.seed;
    if (s.B < 1 || s.n < 10) throw Error(ErrorKind::ConfigError, "simulate needs B >= 1 and n >= 10");
    scenarios.push_back(s);
  }
  if (scenarios.empty()) throw Error(ErrorKind::ConfigError, "simulate.scenarios is empty");
  const McReport rep = monte_carlo(scenarios, methods, opt);
  {
    auto f = ctx.open("mc_report.csv");
    write_mc_report(f, rep);
  }
  {
    auto f = ctx.open("tidy.csv");
    write_tidy(f, rep);
  }
  {
    auto f = ctx.open("mc_table.csv");
    write_mc_table(f, rep, methods);
  }
}

inline void run_power(Context& ctx) {
  PowerOptions opt;
  opt.em = em_config(ctx.settings);
  opt.basis = basis_for(ctx.settings, 2);
  opt.workers = ctx.workers;
  opt.M = opt.em.M;
  opt.seed = ctx.seed;
  opt.ns = parse_number_list<std::size_t>(ctx.settings, "power.ns");
  opt.phi_ys = parse_number_list<double>(ctx.settings, "power.phi_ys");
  opt.alphas = parse_number_list<double>(ctx.settings, "power.alphas");
  opt.B_mc = parse_number<int>(ctx.settings, "power.B_mc");
  opt.B_boot = parse_number<int>(ctx.settings, "power.B_boot");
  if (opt.B_mc < 1 || opt.B_boot < 1) throw Error(ErrorKind::ConfigError, "power needs B_mc, B_boot >= 1");
  const auto cells = power_study(opt);
  auto f = ctx.open("power_table.csv");
  write_power_table(f, cells);
}

inline nlohmann::json manifest_json(const Context& ctx, double wall_seconds) {
  nlohmann::json j;
  j["command"] = ctx.command;
  j["seed"] = ctx.seed;
  nlohmann::json cfg = nlohmann::json::object();
  for (const auto& [k, v] : ctx.settings) cfg[k] = v;
  j["config"] = cfg;
  j["versions"] = {{"nmar", kVersion},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)},
                   {"compiler", __VERSION__}};
  j["outputs"] = ctx.outputs;
  j["wall_time_seconds"] = wall_seconds;
  return j;
}

inline void write_diagnostics(const Context& ctx, const Error& e) {
  std::error_code ec;
  std::filesystem::create_directories(ctx.out, ec);
  std::ofstream f(ctx.out / "diagnostics.json");
  nlohmann::json j;
  j["command"] = ctx.command;
  j["seed"] = ctx.seed;
  j["error_kind"] = to_string(e.kind());
  j["message"] = e.what();
  f << j.dump(2) << '\n';
}

/// Runs one command on resolved settings and writes its artifacts plus the
/// manifest. Returns the process exit status.
inline int run(Settings settings, std::ostream& log = std::cerr) {
  Context ctx;
  ctx.log = &log;
  const auto start = std::chrono::steady_clock::now();
  try {
    ctx.settings = std::move(settings);
    ctx.command = ctx.settings.at("command");
    if (ctx.command != "estimate" && ctx.command != "test" && ctx.command != "simulate" && ctx.command != "power")
      throw Error(ErrorKind::ConfigError, "command must be estimate, test, simulate or power");
    if (ctx.settings.at("seed").empty()) throw Error(ErrorKind::ConfigError, "seed is mandatory");
    ctx.seed = parse_number<std::uint64_t>(ctx.settings, "seed");
    ctx.workers = parse_number<int>(ctx.settings, "workers");
    if (ctx.workers < 1) throw Error(ErrorKind::ConfigError, "workers must be >= 1");
    ctx.out = ctx.settings.at("out");
    std::error_code ec;
    std::filesystem::create_directories(ctx.out, ec);
    if (ec) throw Error(ErrorKind::ConfigError, "cannot create output directory '" + ctx.out.string() + "'");
    em_config(ctx.settings);
  } catch (const Error& e) {
    log << "config error: " << e.what() << '\n';
    return config_error;
  }

  try {
    if (ctx.command == "estimate") run_estimate(ctx);
    if (ctx.command == "test") run_test(ctx);
    if (ctx.command == "simulate") run_simulate(ctx);
    if (ctx.command == "power") run_power(ctx);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::ConfigError || e.kind() == ErrorKind::InvalidArgument) {
      log << "config error: " << e.what() << '\n';
      return config_error;
    }
    if (is_data_error(e.kind())) {
      log << "data error: " << e.what() << '\n';
      return data_error;
    }
    log << "numerical failure: " << e.what() << '\n';
    write_diagnostics(ctx, e);
    return numerical_error;
  }

  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  ctx.outputs.push_back("manifest.json");
  std::ofstream f(ctx.out / "manifest.json");
  f << manifest_json(ctx, wall).dump(2) << '\n';
  return ok;
}

}  // namespace nmar::cli
