#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nmar/cli.hpp"

int main(int argc, char** argv) {
  using namespace nmar::cli;
  CLI::App app{"Semiparametric estimation under nonignorable nonresponse"};
  app.require_subcommand(1);

  std::string config_path, seed, out, workers, input, M, B;
  std::vector<std::string> sets;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key = value config file or a previous manifest.json");
    sub->add_option("--seed", seed, "master seed");
    sub->add_option("--out", out, "output directory");
    sub->add_option("--workers", workers, "worker threads");
    sub->add_option("--M", M, "imputations per nonrespondent");
    sub->add_option("--B", B, "bootstrap or Monte Carlo replications");
    sub->add_option("--set", sets, "override any key, as key=value");
  };
  for (const char* name : {"estimate", "test"}) {
    auto* sub = app.add_subcommand(name, std::string(name) + " on a CSV sample");
    add_common(sub);
    sub->add_option("--input", input, "input CSV");
  }
  add_common(app.add_subcommand("simulate", "Monte Carlo over scenario cells"));
  add_common(app.add_subcommand("power", "power study of the ignorability test"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : config_error;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  Settings file, over;
  try {
    if (!config_path.empty()) file = load_config_file(config_path);
    over["command"] = command;
    if (!seed.empty()) over["seed"] = seed;
    if (!out.empty()) over["out"] = out;
    if (!workers.empty()) over["workers"] = workers;
    if (!input.empty()) over["input"] = input;
    if (!M.empty()) over["em.M"] = M;
    if (!B.empty()) {
      if (command == "estimate") over["estimate.bootstrap_B"] = B;
      if (command == "test") over["test.B"] = B;
      if (command == "simulate") over["simulate.B"] = B;
      if (command == "power") over["power.B_mc"] = B;
    }
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw nmar::Error(nmar::ErrorKind::ConfigError, "--set expects key=value");
      Settings one;
      set_key(one, nmar::detail::trim(kv.substr(0, eq)), nmar::detail::trim(kv.substr(eq + 1)));
      over.insert_or_assign(one.begin()->first, one.begin()->second);
    }
  } catch (const nmar::Error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return config_error;
  }
  return run(resolve(file, over));
}
