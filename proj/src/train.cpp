#include "fsnet/train.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <ostream>
#include <random>
#include <sstream>

#include "fsnet/error.hpp"

namespace fsnet {

// ---------------------------------------------------------------------------
// Losses and metrics

namespace {

void check_class(std::size_t classes, std::size_t true_class) {
  if (true_class >= classes) {
    throw ContractError("class " + std::to_string(true_class) + " out of range for " + std::to_string(classes) +
                        " logits");
  }
}

Tensor softmax(const Tensor& logits) {
  const double mx = *std::max_element(logits.values().begin(), logits.values().end());
  Tensor p(logits.shape());
  double z = 0.0;
  for (std::size_t i = 0; i < p.numel(); ++i) z += p[i] = std::exp(logits[i] - mx);
  for (double& v : p.values()) v /= z;
  return p;
}

}  // namespace

double softmax_cross_entropy(const Tensor& logits, std::size_t true_class) {
  check_class(logits.numel(), true_class);
  const double mx = *std::max_element(logits.values().begin(), logits.values().end());
  double z = 0.0;
  for (double v : logits.values()) z += std::exp(v - mx);
  return std::log(z) - (logits[true_class] - mx);
}

Var softmax_cross_entropy(const Var& logits, std::size_t true_class) {
  check_class(logits.value().numel(), true_class);
  const double loss = softmax_cross_entropy(logits.value(), true_class);
  return logits.tape()->record(Tensor::scalar(loss), {logits},
                               [logits, true_class](Tape& tp, const Tensor& g, const Tensor&) {
                                 Tensor d = softmax(logits.value());
                                 d[true_class] -= 1.0;
                                 tp.accumulate(logits, scale(d, g[0]));
                               });
}

namespace {

void check_same(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": prediction " + a.str() + " vs target " + b.str());
}

}  // namespace

double soft_dice_loss(const Tensor& pred, const Tensor& target, double eps) {
  check_same(pred.shape(), target.shape(), "soft_dice_loss");
  const double num = 2.0 * dot(pred, target) + eps;
  const double den = sum(pred) + sum(target) + eps;
  return 1.0 - num / den;
}

Var soft_dice_loss(const Var& pred, const Tensor& target, double eps) {
  check_same(pred.shape(), target.shape(), "soft_dice_loss");
  const Tensor& p = pred.value();
  const double num = 2.0 * dot(p, target) + eps;
  const double den = sum(p) + sum(target) + eps;
  return pred.tape()->record(Tensor::scalar(1.0 - num / den), {pred},
                             [pred, target, num, den](Tape& tp, const Tensor& g, const Tensor&) {
                               // d/dp_i of -num/den = -(2 g_i den - num) / den^2
                               Tensor d(target.shape());
                               const double inv = 1.0 / (den * den);
                               for (std::size_t i = 0; i < d.numel(); ++i)
                                 d[i] = -g[0] * (2.0 * target[i] * den - num) * inv;
                               tp.accumulate(pred, d);
                             });
}

double dice_overlap(const Tensor& pred, const Tensor& target) {
  check_same(pred.shape(), target.shape(), "dice_overlap");
  double a = 0.0, b = 0.0, both = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const bool x = pred[i] != 0.0, y = target[i] != 0.0;
    a += x;
    b += y;
    both += x && y;
  }
  if (a + b == 0.0) return 1.0;
  return 2.0 * both / (a + b);
}

Tensor threshold(const Tensor& probs, double level) {
  Tensor out(probs.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = probs[i] >= level ? 1.0 : 0.0;
  return out;
}

std::size_t argmax(const Tensor& t) {
  return static_cast<std::size_t>(std::max_element(t.values().begin(), t.values().end()) - t.values().begin());
}

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be > 0");
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  if (eval_every == 0) throw ConfigError("eval_every must be >= 1");
  if (!(subset_fraction > 0.0 && subset_fraction <= 1.0)) throw ConfigError("subset fraction must be in (0, 1]");
  regularizers.validate();
}

namespace {

const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::kSgd ? "sgd" : "adam"; }

}  // namespace

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"optimizer", optimizer_name(c.optimizer)},
                     {"lr", c.learning_rate},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"seed", c.seed},
                     {"regularizers", c.regularizers},
                     {"subset_fraction", c.subset_fraction},
                     {"eval_every", c.eval_every},
                     {"target_metric", c.target_metric ? nlohmann::json(*c.target_metric) : nlohmann::json()},
                     {"max_steps", c.max_steps},
                     {"wall_time", c.wall_time}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  const auto opt = j.value("optimizer", std::string("adam"));
  if (opt != "sgd" && opt != "adam") throw ConfigError("unknown optimizer '" + opt + "'");
  c.optimizer = opt == "sgd" ? OptimizerKind::kSgd : OptimizerKind::kAdam;
  c.learning_rate = j.value("lr", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  if (j.contains("regularizers")) c.regularizers = j["regularizers"].get<RegularizerConfig>();
  c.subset_fraction = j.value("subset_fraction", c.subset_fraction);
  c.eval_every = j.value("eval_every", c.eval_every);
  if (j.contains("target_metric") && !j["target_metric"].is_null()) c.target_metric = j["target_metric"].get<double>();
  c.max_steps = j.value("max_steps", c.max_steps);
  c.wall_time = j.value("wall_time", c.wall_time);
}

// ---------------------------------------------------------------------------
// Optimisers

Optimizer::Optimizer(OptimizerKind kind, double learning_rate) : kind_(kind), lr_(learning_rate) {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
}

void Optimizer::step(const std::vector<ParameterPtr>& params) {
  for (const auto& p : params) {
    if (!p->grad.all_finite()) throw NumericError("non-finite gradient in " + p->name + "; training aborted");
  }
  ++t_;
  if (kind_ == OptimizerKind::kSgd) {
    for (const auto& p : params) axpy(-lr_, p->grad, p->value);
    return;
  }
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (const auto& p : params) {
    auto it = moments_.find(p->name);
    if (it == moments_.end() || it->second.m.shape() != p->value.shape()) {
      it = moments_.insert_or_assign(p->name, Moments{Tensor(p->value.shape()), Tensor(p->value.shape())}).first;
    }
    Tensor& m = it->second.m;
    Tensor& v = it->second.v;
    for (std::size_t i = 0; i < m.numel(); ++i) {
      const double g = p->grad[i];
      m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g;
      v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g * g;
      p->value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEpsilon);
    }
  }
}

void Optimizer::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json names = nlohmann::json::array();
  for (const auto& [name, mom] : moments_) {
    names.push_back(name);
    save_tensor(dir / ("m." + name + ".bin"), mom.m);
    save_tensor(dir / ("v." + name + ".bin"), mom.v);
  }
  std::ofstream out(dir / "optimizer.json");
  out << nlohmann::json{{"kind", optimizer_name(kind_)}, {"lr", lr_}, {"t", t_}, {"moments", names}}.dump(2) << '\n';
}

void Optimizer::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "optimizer.json");
  if (!in) throw FormatError("missing optimizer state in " + dir.string());
  const auto j = nlohmann::json::parse(in);
  if (j.at("kind").get<std::string>() != optimizer_name(kind_)) {
    throw ConfigError("checkpoint optimizer differs from the configured one");
  }
  t_ = j.at("t").get<std::size_t>();
  moments_.clear();
  for (const auto& name : j.at("moments")) {
    const auto n = name.get<std::string>();
    moments_[n] = Moments{load_tensor(dir / ("m." + n + ".bin")), load_tensor(dir / ("v." + n + ".bin"))};
  }
}

void apply_constraints(const std::vector<ParameterPtr>& params, const RegularizerConfig& reg) {
  if (!reg.unit_norm_seeds) return;
  for (const auto& p : params)
    if (p->role == ParamRole::kSeeds) project_unit_norm_inplace(p->value);
}

void optimizer_step(Optimizer& opt, const std::vector<ParameterPtr>& params, const RegularizerConfig& reg) {
  opt.step(params);
  apply_constraints(params, reg);
}

std::optional<Var> penalty_term(Tape& tape, const std::vector<ParameterPtr>& params, const RegularizerConfig& reg) {
  std::optional<Var> total;
  auto add = [&](const Var& v) { total = total ? ad::add(*total, v) : v; };
  for (const auto& p : params) {
    if (p->role != ParamRole::kMixing) continue;
    if (reg.l1_alpha_weight > 0.0) add(l1_penalty(tape.parameter(p), reg.l1_alpha_weight));
    if (reg.nuclear_alpha_weight > 0.0) add(nuclear_penalty(tape.parameter(p), reg.nuclear_alpha_weight));
  }
  return total;
}

// ---------------------------------------------------------------------------
// Metrics

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

void Metrics::write_csv(std::ostream& out) const {
  out << "epoch,split,loss,metric,seconds\n";
  for (const auto& r : rows) {
    out << r.epoch << ',' << r.split << ',' << format_double(r.loss) << ',' << format_double(r.metric) << ','
        << format_double(r.seconds) << '\n';
  }
}

void Metrics::save_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  write_csv(out);
}

Metrics Metrics::read_csv(std::istream& in) {
  Metrics m;
  std::string line;
  if (!std::getline(in, line) || line != "epoch,split,loss,metric,seconds") throw FormatError("bad metrics header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[5];
    for (auto& field : f)
      if (!std::getline(ss, field, ',')) throw FormatError("bad metrics row: " + line);
    m.rows.push_back({std::stoull(f[0]), f[1], std::stod(f[2]), std::stod(f[3]), std::stod(f[4])});
  }
  return m;
}

Metrics Metrics::load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  return read_csv(in);
}

std::optional<MetricsRow> Metrics::last(const std::string& split) const {
  for (auto it = rows.rbegin(); it != rows.rend(); ++it)
    if (it->split == split) return *it;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Loops

namespace {

// Task loss on the tape plus the hard metric for one example.
std::pair<Var, double> task_loss(TaskKind task, const Var& out, const Example& ex) {
  if (task == TaskKind::kClassification) {
    return {softmax_cross_entropy(out, ex.label), argmax(out.value()) == ex.label ? 1.0 : 0.0};
  }
  return {soft_dice_loss(out, ex.mask), dice_overlap(threshold(out.value()), ex.mask)};
}

std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{seed, stream, a, b};
  return std::mt19937_64(seq);
}

void check_task(const Network& net, const Dataset& data) {
  if (data.empty()) throw ConfigError("dataset is empty");
  const Shape want(net.spec().input_shape);
  for (const auto& ex : data.items) {
    if (ex.input.shape() != want) {
      throw ShapeError("example shape " + ex.input.shape().str() + " does not match network input " + want.str());
    }
  }
}

std::string epoch_dir_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%04zu", epoch);
  return buf;
}

void write_checkpoint(const std::filesystem::path& root, std::size_t epoch, std::size_t steps, const Network& net,
                      const Optimizer& opt, const Metrics& metrics) {
  namespace fs = std::filesystem;
  const fs::path final_dir = root / epoch_dir_name(epoch);
  const fs::path tmp = root / (epoch_dir_name(epoch) + ".tmp");
  fs::remove_all(tmp);
  net.save(tmp / "net");
  opt.save(tmp / "optimizer");
  metrics.save_csv(tmp / "metrics.csv");
  {
    std::ofstream out(tmp / "state.json");
    out << nlohmann::json{{"epoch", epoch}, {"steps", steps}}.dump(2) << '\n';
  }
  fs::remove_all(final_dir);
  fs::rename(tmp, final_dir);

  std::vector<fs::path> all;
  for (const auto& e : fs::directory_iterator(root)) {
    const auto name = e.path().filename().string();
    if (e.is_directory() && name.rfind("epoch_", 0) == 0 && name.find('.') == std::string::npos) {
      all.push_back(e.path());
    }
  }
  std::sort(all.begin(), all.end());
  while (all.size() > 2) {
    fs::remove_all(all.front());
    all.erase(all.begin());
  }
}

}  // namespace

std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) return std::nullopt;
  std::optional<fs::path> best;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (!e.is_directory() || name.rfind("epoch_", 0) != 0 || name.find('.') != std::string::npos) continue;
    if (!fs::exists(e.path() / "state.json")) continue;
    if (!best || e.path() > *best) best = e.path();
  }
  return best;
}

EvalResult evaluate(const Network& net, const Dataset& data) {
  check_task(net, data);
  EvalResult r;
  for (const auto& ex : data.items) {
    Tape tape;
    const Var out = net.forward(tape, tape.constant(ex.input));
    const auto [loss, metric] = task_loss(data.task, out, ex);
    r.loss += loss.value().item();
    r.metric += metric;
  }
  r.loss /= static_cast<double>(data.size());
  r.metric /= static_cast<double>(data.size());
  return r;
}

TrainResult train(Network& net, const Dataset& full, const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  check_task(net, full);
  if (options.validation) check_task(net, *options.validation);
  if (options.resume && !options.checkpoint_dir) throw ConfigError("resume requested without a checkpoint directory");

  Dataset subset_storage;
  const Dataset* data = &full;
  if (config.subset_fraction < 1.0) {
    std::vector<std::size_t> labels;
    for (const auto& ex : full.items) labels.push_back(ex.label);
    subset_storage = full.select(stratified_subset(labels, config.subset_fraction, config.seed));
    data = &subset_storage;
  }

  const auto params = net.parameters();
  Optimizer opt(config.optimizer, config.learning_rate);
  TrainResult result;
  std::size_t first_epoch = 1;

  if (options.resume) {
    if (auto ckpt = latest_checkpoint(*options.checkpoint_dir)) {
      std::ifstream in(*ckpt / "state.json");
      const auto state = nlohmann::json::parse(in);
      Network restored = Network::load(*ckpt / "net");
      if (!restored.spec().same_architecture(net.spec()) || restored.count_parameters().total() !=
                                                                   net.count_parameters().total()) {
        throw ConfigError("checkpoint " + ckpt->string() + " does not match the configured network");
      }
      const auto dst = net.parameters();
      const auto src = restored.parameters();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->value = src[i]->value;
      opt.load(*ckpt / "optimizer");
      result.metrics = Metrics::load_csv(*ckpt / "metrics.csv");
      result.steps = state.at("steps").get<std::size_t>();
      first_epoch = state.at("epoch").get<std::size_t>() + 1;
      if (options.log) *options.log << "resumed from " << ckpt->string() << '\n';
    }
  }

  const auto clock_start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    if (!config.wall_time) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
  };

  const std::size_t n = data->size();
  for (std::size_t epoch = first_epoch; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    auto shuffle_rng = derived_rng(config.seed, 1, epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_loss = 0.0, epoch_metric = 0.0;
    std::size_t seen = 0;
    bool capped = false;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t end = std::min(n, start + config.batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      zero_grads(params);
      for (std::size_t k = start; k < end; ++k) {
        const Example& ex = data->items[order[k]];
        auto drop_rng = derived_rng(config.seed, 2, result.steps, k - start);
        Tape tape;
        ForwardOptions fo{true, config.regularizers.feature_dropout_p, &drop_rng};
        const Var out = net.forward(tape, tape.constant(ex.input), fo);
        const auto [loss, metric] = task_loss(data->task, out, ex);
        const double value = loss.value().item();
        if (!std::isfinite(value)) {
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(result.steps) + "; last good checkpoint kept");
        }
        tape.backward(ad::scale(loss, inv_b));
        epoch_loss += value;
        epoch_metric += metric;
        ++seen;
      }
      {
        Tape tape;
        if (auto penalty = penalty_term(tape, params, config.regularizers)) tape.backward(*penalty);
      }
      optimizer_step(opt, params, config.regularizers);
      ++result.steps;
      if (config.max_steps && result.steps >= config.max_steps) {
        capped = true;
        break;
      }
    }

    result.metrics.rows.push_back({epoch, "train", epoch_loss / static_cast<double>(seen),
                                   epoch_metric / static_cast<double>(seen), elapsed()});
    if (options.validation && (epoch % config.eval_every == 0 || epoch == config.epochs || capped)) {
      const EvalResult v = evaluate(net, *options.validation);
      result.metrics.rows.push_back({epoch, "val", v.loss, v.metric, elapsed()});
      if (config.target_metric && v.metric >= *config.target_metric) result.reached_target = true;
    }
    if (options.log) {
      const auto& r = result.metrics.rows.back();
      *options.log << "epoch " << epoch << " step " << result.steps << " " << r.split << " loss " << r.loss
                   << " metric " << r.metric << '\n';
    }
    if (options.checkpoint_dir) write_checkpoint(*options.checkpoint_dir, epoch, result.steps, net, opt, result.metrics);
    ++result.epochs_run;
    if (capped || result.reached_target) break;
  }
  return result;
}

}  // namespace fsnet
