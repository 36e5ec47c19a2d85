// fsnet: gradient checks, parameter sweeps, training, evaluation, the subset
// experiment and the post-hoc factorisation comparison.
//
//   fsnet <command> [--config FILE] [--out DIR] [--seed N] [--set key.path=value]...
//
// Exit codes: 0 ok, 1 a check failed, 2 usage / configuration error.

#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "fsnet/error.hpp"
#include "fsnet/experiment.hpp"

namespace {

using fsnet::cli::CommandOptions;
using Command = int (*)(const nlohmann::json&, const CommandOptions&);

struct Flags {
  std::string config;
  std::string out;
  std::string data_root;
  std::int64_t seed = -1;
  std::vector<std::string> overrides;
  bool resume = false;
  bool quiet = false;
  bool inject_fault = false;
};

nlohmann::json load_user_config(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  std::ifstream in(path);
  if (!in) throw fsnet::ConfigError("cannot open config " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw fsnet::ConfigError(path + ": " + e.what());
  }
}

int run(Command command, const Flags& flags) {
  std::vector<std::string> overrides = flags.overrides;
  // Dedicated flags are applied last so they win over --set and the file.
  if (!flags.out.empty()) overrides.push_back("output_dir=" + nlohmann::json(flags.out).dump());
  if (!flags.data_root.empty()) overrides.push_back("data.root=" + nlohmann::json(flags.data_root).dump());
  if (flags.seed >= 0) overrides.push_back("seed=" + std::to_string(flags.seed));
  if (flags.resume) overrides.push_back("resume=true");
  const nlohmann::json cfg = fsnet::cli::resolve_config(load_user_config(flags.config), overrides);
  CommandOptions options;
  options.log = flags.quiet ? nullptr : &std::cerr;
  options.inject_fault = flags.inject_fault;
  return command(cfg, options);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"filter-sharing CNN experiments"};
  app.require_subcommand(1);
  Flags flags;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", flags.config, "JSON experiment config");
    sub->add_option("-o,--out", flags.out, "output directory (overrides output_dir)");
    sub->add_option("--seed", flags.seed, "seed (overrides seed)");
    sub->add_option("--data-root", flags.data_root, "dataset directory (overrides data.root)");
    sub->add_option("-s,--set", flags.overrides, "override a config value, e.g. train.epochs=3");
    sub->add_flag("-q,--quiet", flags.quiet, "no progress output");
  };

  struct Entry {
    const char* name;
    const char* help;
    Command command;
  };
  const Entry entries[] = {
      {"gradcheck", "finite-difference check of shared layers and both networks", fsnet::cli::cmd_gradcheck},
      {"params", "parameter counts over a kernel-size sweep", fsnet::cli::cmd_params},
      {"train", "train a network, writing metrics.csv and checkpoints", fsnet::cli::cmd_train},
      {"eval", "evaluate a saved model", fsnet::cli::cmd_eval},
      {"subset", "shared vs standard training over training-set fractions", fsnet::cli::cmd_subset},
      {"factorize", "post-hoc factorisation vs direct training", fsnet::cli::cmd_factorize},
  };
  Command selected = nullptr;
  for (const auto& e : entries) {
    CLI::App* sub = app.add_subcommand(e.name, e.help);
    add_common(sub);
    if (std::string(e.name) == "train") sub->add_flag("--resume", flags.resume, "continue from the latest checkpoint");
    if (std::string(e.name) == "gradcheck") {
      sub->add_flag("--inject-fault", flags.inject_fault, "negative control: corrupt one derivative")
          ->group("");  // hidden
    }
    sub->callback([&selected, &e] { selected = e.command; });
  }
  bool print_defaults = false;
  CLI::App* schema = app.add_subcommand("schema", "print the config JSON schema");
  schema->add_flag("--defaults", print_defaults, "print the default config instead");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? fsnet::cli::kExitOk : fsnet::cli::kExitUsage;
  }

  if (schema->parsed()) {
    std::cout << (print_defaults ? fsnet::cli::default_config() : fsnet::cli::config_schema()).dump(2) << '\n';
    return fsnet::cli::kExitOk;
  }
  try {
    return run(selected, flags);
  } catch (const fsnet::ConfigError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return fsnet::cli::kExitUsage;
  } catch (const fsnet::FormatError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return fsnet::cli::kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return fsnet::cli::kExitCheckFailed;
  }
}
