#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "batchaug/config.hpp"
#include "batchaug/runner.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Batch Augmentation experiment runner"};
  app.require_subcommand(1, 1);

  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  for (const auto& name : batchaug::command_names()) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "configuration file")->required();
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--seed", seed, "run seed (derives every unset component seed)");
    sub->add_option("--override", overrides, "key=value, applied after the file")->take_all();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : batchaug::kConfigError;
  }

  batchaug::ExperimentConfig cfg;
  try {
    cfg = batchaug::load_config(config_path);
    if (seed) cfg.seed = *seed;
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw batchaug::ConfigError("override '" + kv + "' is not key=value");
      batchaug::set_key(cfg, kv.substr(0, eq), kv.substr(eq + 1), "--override");
    }
  } catch (const batchaug::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return batchaug::kConfigError;
  }
  return batchaug::run_command(app.get_subcommands().front()->get_name(), cfg, out_dir);
}
