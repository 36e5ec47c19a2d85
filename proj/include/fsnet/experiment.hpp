#pragma once

// Config-driven experiment commands behind the `fsnet` tool.
//
// Every command takes a resolved ExperimentConfig (defaults, then the user's
// JSON file, then --set overrides), writes its CSV outputs plus
// config.resolved.json into output_dir, and returns an exit code:
//   0 success, 1 a check failed, 2 usage or configuration error.

#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

#include "fsnet/data.hpp"
#include "fsnet/nets.hpp"
#include "fsnet/train.hpp"

namespace fsnet::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitUsage = 2;

// Environment variable naming the dataset root when data.root is null.
inline constexpr const char* kDataRootEnv = "FSNET_DATA_ROOT";

const nlohmann::json& config_schema();
const nlohmann::json& default_config();

// Throws ConfigError naming the offending JSON path.
void validate_config(const nlohmann::json& doc, const nlohmann::json& schema);

// defaults <- user <- overrides ("a.b.c=value", value parsed as JSON when
// possible, else taken as a string). The result is validated.
nlohmann::json resolve_config(const nlohmann::json& user, const std::vector<std::string>& overrides = {});

struct TaskData {
  Dataset train, val, test;
  std::size_t input_extent = 0;
};

TaskData load_task(const nlohmann::json& config);
NetSpec make_net_spec(const nlohmann::json& config, std::size_t input_extent, bool shared);
TrainConfig make_train_config(const nlohmann::json& config);

struct CommandOptions {
  std::ostream* log = nullptr;
  // Test-only negative control: adds an op with a wrong derivative.
  bool inject_fault = false;
};

int cmd_gradcheck(const nlohmann::json& config, const CommandOptions& options = {});
int cmd_params(const nlohmann::json& config, const CommandOptions& options = {});
int cmd_train(const nlohmann::json& config, const CommandOptions& options = {});
int cmd_eval(const nlohmann::json& config, const CommandOptions& options = {});
int cmd_subset(const nlohmann::json& config, const CommandOptions& options = {});
int cmd_factorize(const nlohmann::json& config, const CommandOptions& options = {});

// Network parameter sweep behind cmd_params, exposed for tests.
struct ParamsRow {
  std::size_t kernel_extent = 0;
  std::string layer;  // "total" for whole-network rows
  std::size_t m = 0, n = 0, s = 0;
  std::size_t unshared = 0, shared = 0;
  std::size_t above_breakeven = 0;  // layers where P exceeds breakeven
  double ratio() const { return static_cast<double>(shared) / static_cast<double>(unshared); }
};

// Per-layer rows followed by a "total" row for each kernel extent. P is
// applied to every non-head conv layer as given (no clamping), so layers past
// breakeven show up with ratio > 1.
std::vector<ParamsRow> unet_params_sweep(const UNetOptions& base, const std::vector<std::size_t>& kernels,
                                         std::size_t p);

}  // namespace fsnet::cli
