#include <CLI11.hpp>

#include "rtta/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"rtta: teacher-guided robust test-time adaptation toolkit"};
  app.require_subcommand(0, 0);

  std::string command;
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
  std::string axis;
  long long seed = -1;

  app.add_option("command", command, "pretrain | adapt | eval | sweep | dynamics | verify-prop")
      ->required();
  app.add_option("--config", config_path, "experiment config file (defaults apply when omitted)");
  app.add_option("--set", sets, "override a key, e.g. --set adaptation.beta=12")->take_all();
  app.add_option("--seed", seed, "override run.seed");
  app.add_option("--out", out_dir, "override run.out_dir");
  app.add_option("--axis", axis, "sweep axis shorthand (beta | severity | split_fraction)");

  CLI11_PARSE(app, argc, argv);
  if (!axis.empty()) sets.push_back("sweep.axis=" + axis);

  try {
    std::string text;
    if (!config_path.empty()) text = rtta::read_file(config_path);

    std::vector<std::pair<std::string, std::string>> overrides;
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw rtta::ConfigError("--set " + s + ": expected section.key=value");
      overrides.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    if (seed >= 0) overrides.emplace_back("run.seed", std::to_string(seed));
    if (!out_dir.empty()) overrides.emplace_back("run.out_dir", out_dir);

    const rtta::ExperimentConfig cfg = rtta::parse_config(text, overrides);
    return rtta::run_command(command, cfg);
  } catch (const rtta::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return rtta::kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return rtta::kExitRuntimeError;
  }
}
