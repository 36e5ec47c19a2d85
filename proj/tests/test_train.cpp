#include "doctest.h"

#include <cmath>
#include <sstream>

#include "fsnet/error.hpp"
#include "fsnet/train.hpp"
#include "support.hpp"

using namespace fsnet;
using testing::random_tensor;

namespace {

// Two Gaussian blobs far apart in 2-D.
Dataset separable(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.3);
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % 2;
    const double sign = label ? 1.0 : -1.0;
    d.items.push_back({Tensor::vector({sign * 2.0 + noise(rng), sign * 1.0 + noise(rng)}), label, {}});
  }
  return d;
}

Dataset toy(std::size_t count, std::uint64_t seed) {
  return to_dataset(toy_gratings(count, seed, ToyOptions{.extent = 8, .classes = 4, .noise = 0.3}));
}

TrainConfig small_config() {
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 4;
  c.learning_rate = 3e-3;
  c.seed = 11;
  return c;
}

}  // namespace

TEST_CASE("softmax cross-entropy") {
  CHECK(softmax_cross_entropy(Tensor::vector({0, 0}), 0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  const double big = softmax_cross_entropy(Tensor::vector({1000, 0}), 0);
  CHECK(std::isfinite(big));
  CHECK(big < 1e-300);
  CHECK(std::isfinite(softmax_cross_entropy(Tensor::vector({1000, 0}), 1)));
  CHECK_THROWS_AS(softmax_cross_entropy(Tensor::vector({0, 0}), 2), ContractError);

  std::mt19937_64 rng(1);
  auto logits = std::make_shared<Parameter>("z", ParamRole::kBias, random_tensor(Shape{10}, rng, -3, 3));
  CHECK(grad_check([&](Tape& t) { return softmax_cross_entropy(t.parameter(logits), 7); }, {logits}).passed);
}

TEST_CASE("soft dice loss") {
  const Tensor ones(Shape{8}, 1.0);
  CHECK(soft_dice_loss(ones, ones) == 0.0);
  CHECK(soft_dice_loss(Tensor(Shape{8}), ones) == doctest::Approx(1.0 - 1.0 / 9.0).epsilon(1e-15));
  CHECK_THROWS_AS(soft_dice_loss(Tensor(Shape{8}), Tensor(Shape{7})), ShapeError);

  std::mt19937_64 rng(2);
  auto pred = std::make_shared<Parameter>("p", ParamRole::kBias, random_tensor(Shape{2, 3, 3}, rng, 0.0, 1.0));
  Tensor target(Shape{2, 3, 3});
  for (std::size_t i = 0; i < target.numel(); i += 3) target[i] = 1.0;
  CHECK(grad_check([&](Tape& t) { return soft_dice_loss(t.parameter(pred), target); }, {pred}).passed);
}

TEST_CASE("dice overlap") {
  const Tensor a = Tensor::vector({1, 1, 1, 1, 0, 0, 0, 0});
  const Tensor b = Tensor::vector({0, 0, 1, 1, 1, 1, 0, 0});
  const Tensor c = Tensor::vector({0, 0, 0, 0, 1, 1, 1, 1});
  CHECK(dice_overlap(a, a) == 1.0);
  CHECK(dice_overlap(a, c) == 0.0);
  CHECK(dice_overlap(a, b) == 0.5);
  CHECK(dice_overlap(Tensor(Shape{8}), Tensor(Shape{8})) == 1.0);
  CHECK_THROWS_AS(dice_overlap(a, Tensor(Shape{3})), ShapeError);
}

TEST_CASE("soft dice with eps -> 0 equals dice overlap on binary masks") {
  std::mt19937_64 rng(3);
  std::bernoulli_distribution coin(0.4);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor p(Shape{30}), g(Shape{30});
    for (std::size_t i = 0; i < 30; ++i) {
      p[i] = coin(rng);
      g[i] = coin(rng);
    }
    g[trial % 30] = 1.0;
    CHECK(std::abs((1.0 - soft_dice_loss(p, g, 0.0)) - dice_overlap(p, g)) < 1e-15);
  }
}

TEST_CASE("optimizer steps") {
  auto p = std::make_shared<Parameter>("theta", ParamRole::kBias, Tensor::vector({1.0}));
  p->grad = Tensor::vector({2.0});
  Optimizer sgd(OptimizerKind::kSgd, 0.1);
  sgd.step({p});
  CHECK(p->value[0] == doctest::Approx(0.8).epsilon(1e-15));

  p->zero_grad();
  const Tensor before = p->value;
  sgd.step({p});
  CHECK(p->value == before);
  Optimizer adam(OptimizerKind::kAdam, 0.1);
  adam.step({p});
  adam.step({p});
  CHECK(p->value == before);

  p->grad = Tensor::vector({std::nan("")});
  CHECK_THROWS_AS(adam.step({p}), NumericError);
  CHECK_THROWS_AS(Optimizer(OptimizerKind::kAdam, 0.0), ConfigError);
}

TEST_CASE("Adam on a quadratic decreases the loss for 100 steps") {
  auto theta = std::make_shared<Parameter>("theta", ParamRole::kBias, Tensor::vector({1.0, 1.0}));
  Optimizer adam(OptimizerKind::kAdam, 1e-3);
  double prev = squared_norm(theta->value);
  for (int step = 0; step < 100; ++step) {
    theta->zero_grad();
    Tape tape;
    const Var v = tape.parameter(theta);
    tape.backward(ad::dot(v, v));
    adam.step({theta});
    const double loss = squared_norm(theta->value);
    CHECK(loss < prev);
    prev = loss;
  }
}

TEST_CASE("unit-norm constraint is applied after each step") {
  auto seeds = std::make_shared<Parameter>("s", ParamRole::kSeeds, Tensor(Shape{2, 2}, {3, 4, 1, 1}));
  seeds->grad = Tensor(Shape{2, 2}, {1, 1, 1, 1});
  Optimizer sgd(OptimizerKind::kSgd, 0.1);
  RegularizerConfig reg;
  reg.unit_norm_seeds = true;
  optimizer_step(sgd, {seeds}, reg);
  for (std::size_t p = 0; p < 2; ++p)
    CHECK(std::abs(seeds->value[2 * p] * seeds->value[2 * p] + seeds->value[2 * p + 1] * seeds->value[2 * p + 1] -
                   1.0) < 1e-12);
}

TEST_CASE("linear model separates separable data") {
  const Dataset data = separable(200, 4);
  Network net = Network::create(build_linear(2, 2), 5);
  TrainConfig c;
  c.epochs = 200;
  c.batch_size = 200;
  c.optimizer = OptimizerKind::kSgd;
  c.learning_rate = 0.5;
  // One full-batch SGD step per call: the loss should fall on nearly every step.
  std::vector<double> losses;
  TrainResult r;
  for (std::size_t epoch = 1; epoch <= c.epochs; ++epoch) {
    TrainConfig one = c;
    one.epochs = 1;
    one.seed = epoch;
    r = train(net, data, one);
    losses.push_back(r.metrics.rows.front().loss);
    if (evaluate(net, data).metric >= 0.99) break;
  }
  CHECK(evaluate(net, data).metric >= 0.99);
  std::size_t falling = 0;
  for (std::size_t i = 1; i < losses.size(); ++i) falling += losses[i] < losses[i - 1];
  if (losses.size() > 1) CHECK(falling >= 0.9 * static_cast<double>(losses.size() - 1));
}

TEST_CASE("training is bitwise deterministic") {
  const Dataset data = toy(24, 6), val = toy(8, 7);
  const NetSpec spec = build_cifcnn(true, 4, 8, true);
  auto run = [&] {
    Network net = Network::create(spec, 3);
    TrainOptions o;
    o.validation = &val;
    const TrainResult r = train(net, data, small_config(), o);
    std::ostringstream csv;
    r.metrics.write_csv(csv);
    return std::make_pair(csv.str(), net.parameters());
  };
  const auto [csv_a, params_a] = run();
  const auto [csv_b, params_b] = run();
  CHECK(csv_a == csv_b);
  REQUIRE(params_a.size() == params_b.size());
  for (std::size_t i = 0; i < params_a.size(); ++i)
    CHECK(testing::bitwise_equal(params_a[i]->value, params_b[i]->value));
}

TEST_CASE("resuming from a checkpoint matches the uninterrupted run") {
  testing::TempDir dir("resume");
  const Dataset data = toy(24, 8), val = toy(8, 9);
  const NetSpec spec = build_cifcnn(true, 4, 8, true);
  TrainConfig cfg = small_config();
  cfg.epochs = 4;

  Network full = Network::create(spec, 3);
  TrainOptions o;
  o.validation = &val;
  const TrainResult whole = train(full, data, cfg, o);

  Network part = Network::create(spec, 3);
  TrainOptions oc = o;
  oc.checkpoint_dir = dir.path();
  TrainConfig first = cfg;
  first.epochs = 2;
  train(part, data, first, oc);
  CHECK(latest_checkpoint(dir.path())->filename() == "epoch_0002");

  Network resumed = Network::create(spec, 99);
  oc.resume = true;
  const TrainResult rest = train(resumed, data, cfg, oc);
  CHECK(rest.epochs_run == 2);
  CHECK(rest.steps == whole.steps);
  std::ostringstream a, b;
  whole.metrics.write_csv(a);
  rest.metrics.write_csv(b);
  CHECK(a.str() == b.str());
  const auto pa = full.parameters(), pb = resumed.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(testing::bitwise_equal(pa[i]->value, pb[i]->value));

  // Only the newest two checkpoints are kept.
  std::size_t kept = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir.path())) kept += e.is_directory();
  CHECK(kept == 2);
}

TEST_CASE("evaluate") {
  // Perfect predictor: one-hot inputs through an identity dense layer.
  Network id = Network::create(build_linear(4, 4), 1);
  auto params = id.parameters();
  params[0]->value = Tensor::matrix({{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}});
  params[1]->value = Tensor(Shape{4});
  Dataset onehot;
  for (std::size_t i = 0; i < 40; ++i) {
    Tensor x(Shape{4});
    x[i % 4] = 5.0;
    onehot.items.push_back({x, i % 4, {}});
  }
  CHECK(evaluate(id, onehot).metric == 1.0);

  // Random weights on random inputs, balanced labels.
  std::mt19937_64 rng(10);
  Network rnd = Network::create(build_linear(16, 10), 2);
  Dataset noise;
  for (std::size_t i = 0; i < 2000; ++i) noise.items.push_back({random_tensor(Shape{16}, rng), i % 10, {}});
  const EvalResult e1 = evaluate(rnd, noise);
  CHECK(std::abs(e1.metric - 0.1) <= 0.03);
  const EvalResult e2 = evaluate(rnd, noise);
  CHECK(std::memcmp(&e1.loss, &e2.loss, sizeof(double)) == 0);
  CHECK(e1.metric == e2.metric);

  Dataset wrong;
  wrong.items.push_back({Tensor(Shape{5}), 0, {}});
  CHECK_THROWS_AS(evaluate(rnd, wrong), ShapeError);
}

TEST_CASE("metrics CSV round trip") {
  Metrics m;
  m.rows.push_back({1, "train", 0.1 + 0.2, 1.0 / 3.0, 0.0});
  m.rows.push_back({1, "val", 1e-300, 0.5, 12.25});
  std::stringstream ss;
  m.write_csv(ss);
  CHECK(ss.str().rfind("epoch,split,loss,metric,seconds\n", 0) == 0);
  const Metrics back = Metrics::read_csv(ss);
  REQUIRE(back.rows.size() == 2);
  CHECK(back.rows[0].loss == 0.1 + 0.2);
  CHECK(back.rows[0].metric == 1.0 / 3.0);
  CHECK(back.rows[1].loss == 1e-300);
  CHECK(back.last("val")->seconds == 12.25);
  CHECK_FALSE(back.last("test").has_value());
}

TEST_CASE("train config validation and JSON") {
  TrainConfig c;
  c.learning_rate = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.subset_fraction = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  c = TrainConfig{};
  c.optimizer = OptimizerKind::kSgd;
  c.target_metric = 0.8;
  c.regularizers.l1_alpha_weight = 0.01;
  const nlohmann::json j = c;
  const TrainConfig back = j.get<TrainConfig>();
  CHECK(back.optimizer == OptimizerKind::kSgd);
  CHECK(back.target_metric == 0.8);
  CHECK(back.regularizers == c.regularizers);
}

TEST_CASE("segmentation training smoke run") {
  SynthOptions so;
  so.extent = 12;
  so.min_semi_axis = 1.5;
  so.max_semi_axis = 3.0;
  const Dataset data = to_dataset(synth_nodule_dataset(4, 1, so));
  Network net = Network::create(build_unet3d({.levels = 2, .base_channels = 2, .input_extent = 12}, true, 4), 1);
  TrainConfig c = small_config();
  c.epochs = 2;
  const TrainResult r = train(net, data, c, {.validation = &data});
  CHECK(r.metrics.rows.size() == 4);
  for (const auto& row : r.metrics.rows) {
    CHECK(std::isfinite(row.loss));
    CHECK(row.metric >= 0.0);
    CHECK(row.metric <= 1.0);
  }
}
