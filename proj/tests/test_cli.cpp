#include "doctest.h"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "fsnet/error.hpp"
#include "fsnet/experiment.hpp"
#include "support.hpp"

using namespace fsnet;
using namespace fsnet::cli;
using nlohmann::json;

namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

int run_binary(const std::string& args) {
  const std::string cmd = std::string(FSNET_BINARY) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

json with_out(const fs::path& dir, std::vector<std::string> overrides = {}) {
  overrides.push_back("output_dir=" + json(dir.string()).dump());
  return resolve_config(json::object(), overrides);
}

// Small, fast synthetic segmentation setup.
std::vector<std::string> tiny_synth() {
  return {"data.count=20",
          "arch.input_extent=16",
          "arch.levels=2",
          "arch.base_channels=2",
          "data.synth.min_semi_axis=2",
          "data.synth.max_semi_axis=4",
          "sharing.P=4"};
}

}  // namespace

TEST_CASE("config schema and overrides") {
  const json d = resolve_config(json::object());
  CHECK(d == default_config());
  CHECK_THROWS_AS(resolve_config({{"bogus", 1}}), ConfigError);
  CHECK_THROWS_AS(resolve_config({{"train", {{"epochz", 3}}}}), ConfigError);
  CHECK_THROWS_AS(resolve_config({{"train", {{"lr", -1}}}}), ConfigError);
  CHECK_THROWS_AS(resolve_config({{"task", "imagenet"}}), ConfigError);
  CHECK_THROWS_AS(resolve_config(json::object(), {"nothing.here=1"}), ConfigError);
  CHECK_THROWS_AS(resolve_config(json::object(), {"no-equals-sign"}), ConfigError);
  CHECK_THROWS_AS(resolve_config({{"data", {{"split", {{"train", 0.9}}}}}}), ConfigError);

  const json c = resolve_config({{"train", {{"epochs", 5}}}}, {"train.epochs=3", "task=toy", "subset.fractions=[0.5,1]"});
  CHECK(c["train"]["epochs"] == 3);
  CHECK(c["task"] == "toy");
  CHECK(c["subset"]["fractions"].size() == 2);
  CHECK(c["train"]["lr"] == 0.001);

  const TrainConfig tc = make_train_config(c);
  CHECK(tc.epochs == 3);
  CHECK(tc.regularizers.feature_dropout_p == 0.1);
}

TEST_CASE("params: single layer row") {
  testing::TempDir dir("params1");
  json cfg = with_out(dir.path());
  cfg["params"]["single_layer"] = {{"M", 64}, {"N", 32}, {"kernel", 3}};
  REQUIRE(cmd_params(cfg) == kExitOk);
  const std::string csv = slurp(dir.path() / "params.csv");
  CHECK(csv.find("3,55296,31125,") != std::string::npos);
  CHECK(fs::exists(dir.path() / "config.resolved.json"));

  cfg["params"]["P"] = 30;  // above the breakeven of 26
  REQUIRE(cmd_params(cfg) == kExitOk);
  const std::string above = slurp(dir.path() / "params.csv");
  CHECK(above.substr(above.size() - 2) == "1\n");
}

TEST_CASE("params: U-Net sweep matches the closed forms") {
  const auto rows = unet_params_sweep(UNetOptions{}, {3, 5, 7, 9}, 15);
  std::vector<const ParamsRow*> totals;
  for (const auto& r : rows) {
    if (r.layer == "total") {
      totals.push_back(&r);
      continue;
    }
    const bool head = r.m == 1;  // 1x1x1 output layer, not swept
    CHECK(r.s == (head ? 1 : r.kernel_extent * r.kernel_extent * r.kernel_extent));
    CHECK(r.unshared == r.m * r.n * r.s);
    CHECK(r.shared == (head ? r.m * r.n * 1 : r.m * r.n * 15 + 15 * r.s));
  }
  REQUIRE(totals.size() == 4);
  for (std::size_t i = 1; i < totals.size(); ++i) {
    CHECK(totals[i]->ratio() < totals[i - 1]->ratio());
    // Per kernel step every shared layer grows by P dS, every standard one by MN dS.
    const std::size_t s0 = totals[i - 1]->kernel_extent, s1 = totals[i]->kernel_extent;
    const std::size_t ds = s1 * s1 * s1 - s0 * s0 * s0;
    std::size_t mn_sum = 0, shared_layers = 0;
    for (const auto& r : rows)
      if (r.kernel_extent == s1 && r.layer != "total" && r.m != 1) {
        mn_sum += r.m * r.n;
        ++shared_layers;
      }
    CHECK(totals[i]->unshared - totals[i - 1]->unshared == mn_sum * ds);
    CHECK(totals[i]->shared - totals[i - 1]->shared == shared_layers * 15 * ds);
  }
  CHECK(totals[0]->unshared == 88352);
  // Small channel counts at 3^3 put some layers past breakeven.
  CHECK(totals[0]->above_breakeven > 0);
}

TEST_CASE("params command is reproducible") {
  testing::TempDir a("params-a"), b("params-b");
  REQUIRE(cmd_params(with_out(a.path())) == kExitOk);
  REQUIRE(cmd_params(with_out(b.path())) == kExitOk);
  CHECK(slurp(a.path() / "params.csv") == slurp(b.path() / "params.csv"));
  CHECK(slurp(a.path() / "params_layers.csv") == slurp(b.path() / "params_layers.csv"));
}

TEST_CASE("train, resume and eval on a small synthetic task") {
  testing::TempDir dir("train");
  auto overrides = tiny_synth();
  overrides.push_back("train.epochs=3");
  json cfg = with_out(dir.path(), overrides);
  REQUIRE(cmd_train(cfg) == kExitOk);
  const Metrics m = Metrics::load_csv(dir.path() / "metrics.csv");
  CHECK(m.rows.size() == 6);
  CHECK(m.last("val").has_value());
  const json summary = json::parse(slurp(dir.path() / "summary.json"));
  CHECK(summary.contains("test_metric"));
  const std::string first = slurp(dir.path() / "metrics.csv");

  // Same config again, from the resolved copy: identical metrics.
  testing::TempDir again("train-again");
  json resolved = json::parse(slurp(dir.path() / "config.resolved.json"));
  resolved["output_dir"] = again.path().string();
  REQUIRE(cmd_train(resolved) == kExitOk);
  CHECK(slurp(again.path() / "metrics.csv") == first);

  // Continue to 5 epochs from the checkpoint.
  cfg["train"]["epochs"] = 5;
  cfg["resume"] = true;
  REQUIRE(cmd_train(cfg) == kExitOk);
  const Metrics more = Metrics::load_csv(dir.path() / "metrics.csv");
  REQUIRE(more.rows.size() == 10);
  CHECK(more.rows[6].epoch == 4);
  CHECK(slurp(dir.path() / "metrics.csv").rfind(first, 0) == 0);

  REQUIRE(cmd_eval(cfg) == kExitOk);
  const std::string eval = slurp(dir.path() / "eval.csv");
  CHECK(eval.rfind("split,count,loss,metric\ntest,5,", 0) == 0);
}

TEST_CASE("subset experiment rows") {
  testing::TempDir dir("subset");
  json cfg = with_out(dir.path(), {"task=toy", "data.toy_train=40", "data.toy_val=20", "data.toy_extent=8",
                                   "train.epochs=1", "sharing.P=4"});
  REQUIRE(cmd_subset(cfg) == kExitOk);
  std::istringstream csv(slurp(dir.path() / "subset.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "fraction,shared,weights,val_loss,val_metric");
  std::vector<std::vector<std::string>> rows;
  while (std::getline(csv, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  REQUIRE(rows.size() == 6);
  for (std::size_t i = 0; i < 6; i += 2) {
    CHECK(rows[i][0] == rows[i + 1][0]);
    CHECK(rows[i][1] == "0");
    CHECK(rows[i + 1][1] == "1");
    CHECK(std::stoul(rows[i + 1][2]) < std::stoul(rows[i][2]));
  }
}

TEST_CASE("factorize command") {
  testing::TempDir dir("factorize");
  auto overrides = tiny_synth();
  overrides.push_back("train.epochs=1");
  json un = with_out(dir.path() / "un", overrides);
  un["sharing"]["enabled"] = false;
  json sh = with_out(dir.path() / "sh", overrides);
  REQUIRE(cmd_train(un) == kExitOk);
  REQUIRE(cmd_train(sh) == kExitOk);

  json cfg = with_out(dir.path() / "fx", overrides);
  cfg["factorize"]["unshared"] = (dir.path() / "un" / "model").string();
  cfg["factorize"]["shared"] = (dir.path() / "sh" / "model").string();
  cfg["factorize"]["P"] = {1, 2, 1000};
  REQUIRE(cmd_factorize(cfg) == kExitOk);
  std::istringstream csv(slurp(dir.path() / "fx" / "factorize.csv"));
  std::string line;
  std::size_t count = 0;
  std::getline(csv, line);
  while (std::getline(csv, line)) ++count;
  CHECK(count == 7 * 3);

  cfg["factorize"]["unshared"] = (dir.path() / "missing").string();
  CHECK_THROWS_AS(cmd_factorize(cfg), ConfigError);
}

TEST_CASE("binary exit codes") {
  testing::TempDir dir("exit");
  const std::string out = " -q -o " + (dir.path() / "g").string();
  CHECK(run_binary("gradcheck" + out) == kExitOk);
  const std::string first = slurp(dir.path() / "g" / "gradcheck.csv");
  CHECK(run_binary("gradcheck" + out) == kExitOk);
  CHECK(slurp(dir.path() / "g" / "gradcheck.csv") == first);
  const std::string summary = slurp(dir.path() / "g" / "gradcheck_summary.csv");
  CHECK(summary.rfind("check,param_id,role,coords,max_rel_err,passed\n", 0) == 0);

  CHECK(run_binary("gradcheck --inject-fault" + out) == kExitCheckFailed);
  CHECK(run_binary("factorize -q -o " + (dir.path() / "f").string() + " --set factorize.unshared=\"" +
                   (dir.path() / "nope").string() + "\" --set factorize.shared=\"" + (dir.path() / "nope").string() +
                   "\"") == kExitUsage);
  CHECK(run_binary("train -q --set bogus.key=1 -o " + dir.path().string()) == kExitUsage);
  CHECK(run_binary("no-such-command") == kExitUsage);
  CHECK(run_binary("schema") == kExitOk);
  CHECK(run_binary("train -q --set task=cifar -o " + (dir.path() / "c").string()) == kExitUsage);
}
