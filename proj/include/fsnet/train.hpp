#pragma once

// Losses, metrics, optimisers and the training / evaluation loops.
//
// Determinism: every random draw during training comes from a generator
// seeded with (seed, epoch, step, sample), so a run resumed from a checkpoint
// continues exactly as the uninterrupted run would have.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "fsnet/autodiff.hpp"
#include "fsnet/data.hpp"
#include "fsnet/nets.hpp"
#include "fsnet/regularizers.hpp"

namespace fsnet {

// ---------------------------------------------------------------------------
// Losses and metrics

// -log softmax(logits)[true_class], max-subtracted.
double softmax_cross_entropy(const Tensor& logits, std::size_t true_class);
Var softmax_cross_entropy(const Var& logits, std::size_t true_class);

// 1 - (2 sum(p g) + eps) / (sum p + sum g + eps)
double soft_dice_loss(const Tensor& pred, const Tensor& target, double eps = 1.0);
Var soft_dice_loss(const Var& pred, const Tensor& target, double eps = 1.0);

// 2|A n B| / (|A| + |B|) on masks already thresholded to 0/1. Two empty masks
// score 1.
double dice_overlap(const Tensor& pred, const Tensor& target);
Tensor threshold(const Tensor& probs, double level = 0.5);

std::size_t argmax(const Tensor& t);

// ---------------------------------------------------------------------------
// Optimisers

enum class OptimizerKind { kSgd, kAdam };

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  std::size_t batch_size = 4;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  RegularizerConfig regularizers;
  double subset_fraction = 1.0;
  std::size_t eval_every = 1;  // epochs between validation rows
  // Stop once the validation metric reaches this value.
  std::optional<double> target_metric;
  std::size_t max_steps = 0;  // 0 = no cap
  // Record real elapsed seconds; off by default so metrics.csv is
  // reproducible byte for byte.
  bool wall_time = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate);

  // One update from the accumulated Parameter::grad. Throws NumericError
  // naming the parameter if any gradient is not finite.
  void step(const std::vector<ParameterPtr>& params);

  OptimizerKind kind() const { return kind_; }
  double learning_rate() const { return lr_; }
  std::size_t steps() const { return t_; }

  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEpsilon = 1e-8;

  void save(const std::filesystem::path& dir) const;
  void load(const std::filesystem::path& dir);

 private:
  struct Moments {
    Tensor m, v;
  };

  OptimizerKind kind_;
  double lr_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

// Post-step constraints: unit-norm seed projection when enabled.
void apply_constraints(const std::vector<ParameterPtr>& params, const RegularizerConfig& reg);

// Optimizer step followed by the constraints.
void optimizer_step(Optimizer& opt, const std::vector<ParameterPtr>& params, const RegularizerConfig& reg);

// Sum of the active coefficient penalties, recorded on `tape`.
std::optional<Var> penalty_term(Tape& tape, const std::vector<ParameterPtr>& params, const RegularizerConfig& reg);

// ---------------------------------------------------------------------------
// Metrics

struct MetricsRow {
  std::size_t epoch = 0;
  std::string split;  // train | val
  double loss = 0.0;
  double metric = 0.0;  // accuracy or mean Dice
  double seconds = 0.0;
};

struct Metrics {
  std::vector<MetricsRow> rows;

  // Header: epoch,split,loss,metric,seconds
  void write_csv(std::ostream& out) const;
  void save_csv(const std::filesystem::path& path) const;
  static Metrics read_csv(std::istream& in);
  static Metrics load_csv(const std::filesystem::path& path);

  std::optional<MetricsRow> last(const std::string& split) const;
};

std::string format_double(double v);

// ---------------------------------------------------------------------------
// Loops

struct EvalResult {
  double loss = 0.0;
  double metric = 0.0;
};

// Dropout off; mean loss plus accuracy or mean Dice.
EvalResult evaluate(const Network& net, const Dataset& data);

struct TrainOptions {
  const Dataset* validation = nullptr;
  // Checkpoints go to <dir>/epoch_NNNN, newest two kept.
  std::optional<std::filesystem::path> checkpoint_dir;
  bool resume = false;
  std::ostream* log = nullptr;
};

struct TrainResult {
  Metrics metrics;
  std::size_t epochs_run = 0;
  std::size_t steps = 0;
  bool reached_target = false;
};

// Trains `net` in place.
TrainResult train(Network& net, const Dataset& data, const TrainConfig& config, const TrainOptions& options = {});

std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& dir);

}  // namespace fsnet
