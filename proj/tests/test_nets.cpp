#include "doctest.h"

#include <algorithm>

#include "fsnet/error.hpp"
#include "fsnet/nets.hpp"
#include "support.hpp"

using namespace fsnet;
using testing::random_tensor;

namespace {

std::size_t weights_of(std::size_t m, std::size_t n, std::size_t s, std::size_t p) {
  if (p == 0) return m * n * s;
  // Largest P that still saves weights, scanned.
  std::size_t be = 0;
  for (std::size_t q = 1; q <= p; ++q)
    if (m * n * q + q * s < m * n * s) be = q;
  return be == 0 ? m * n * s : m * n * be + be * s;
}

}  // namespace

TEST_CASE("CIF-CNN counts equal the hand-summed layers") {
  const ShapeTrace un = validate(build_cifcnn(false));
  // conv 3->32 5x5, 32->64 5x5, 64->64 3x3, dense 64->10
  CHECK(un.total.weights == 2400 + 51200 + 36864 + 640);
  CHECK(un.total.bias == 32 + 64 + 64 + 10);
  CHECK(un.output == Shape{10});

  const NetSpec shared_spec = build_cifcnn(true, 15);
  const ShapeTrace sh = validate(shared_spec);
  CHECK(sh.total.weights == weights_of(32, 3, 25, 15) + weights_of(64, 32, 25, 15) + weights_of(64, 64, 9, 15) + 640);
  CHECK(sh.total.weights == 1815 + 31095 + 32840 + 640);
  // conv3 has S=9 < P, so P is clamped to its breakeven of 8.
  CHECK(shared_spec.warnings.size() == 1);
  for (const auto& layer : shared_spec.layers) {
    if (layer.kind != LayerKind::kConv) continue;
    const ConvLayerSpec& c = layer.conv;
    CHECK(param_count(c).weights == c.out_channels * c.in_channels * c.shared_p + c.shared_p * c.filter_size());
  }
}

TEST_CASE("U-Net counts equal the hand-summed layers") {
  const NetSpec un = build_unet3d({}, false);
  const ShapeTrace t = validate(un);
  // encoder 1-8-8, 8-16-16, 16-32-32; decoder 48-16-16, 24-8-8; head 8-1
  const std::size_t s = 27;
  const std::size_t expected = (1 * 8 + 8 * 8 + 8 * 16 + 16 * 16 + 16 * 32 + 32 * 32 + 48 * 16 + 16 * 16 + 24 * 8 +
                                8 * 8) * s + 8;
  CHECK(expected == 88352);
  CHECK(t.total.weights == expected);
  CHECK(t.total.bias == 8 + 8 + 16 + 16 + 32 + 32 + 16 + 16 + 8 + 8 + 1);
  CHECK(t.output == Shape{1, 40, 40, 40});

  const ShapeTrace sh = validate(build_unet3d({}, true, 15));
  const std::size_t pairs[][2] = {{8, 1}, {8, 8}, {16, 8}, {16, 16}, {32, 16}, {32, 32},
                                  {16, 48}, {16, 16}, {8, 24}, {8, 8}};
  std::size_t shared_expected = 8;  // unshared head
  for (const auto& mn : pairs) shared_expected += weights_of(mn[0], mn[1], s, 15);
  CHECK(sh.total.weights == shared_expected);
  CHECK(sh.total.weights < t.total.weights);
  CHECK(static_cast<double>(sh.total.weights) / static_cast<double>(t.total.weights) <= 0.60);
}

TEST_CASE("enumerated parameters equal the per-layer counts") {
  const NetSpec specs[] = {build_cifcnn(false), build_cifcnn(true, 15), build_cifcnn(true, 3),
                           build_unet3d({}, false), build_unet3d({}, true, 15),
                           build_unet3d({.levels = 2, .base_channels = 4, .input_extent = 16, .kernel_extent = 5}, true, 7)};
  for (const auto& spec : specs) {
    CAPTURE(spec.name);
    const Network net = Network::create(spec, 1);
    const ShapeTrace t = validate(spec);
    const ParamCount c = net.count_parameters();
    CHECK(c.weights == t.total.weights);
    CHECK(c.bias == t.total.bias);
    std::size_t enumerated = 0;
    for (const auto& p : net.parameters()) enumerated += p->value.numel();
    CHECK(enumerated == t.total.total());
  }
}

TEST_CASE("CIF-CNN on a zero image propagates the biases") {
  std::mt19937_64 rng(2);
  Network net = Network::create(build_cifcnn(false, 15, 32, false), 3);
  const auto convs = net.conv_indices();
  REQUIRE(convs.size() == 3);
  for (std::size_t i : convs) {
    ConvLayer& layer = net.conv_layer(i);
    layer.bias()->value = random_tensor(layer.bias()->value.shape(), rng);
    // Zero filters after the first layer keep every map constant.
    if (i != convs.front()) layer.filters()->value = Tensor(layer.filters()->value.shape());
  }
  const auto params = net.parameters();
  const Tensor& w = params[params.size() - 2]->value;
  params.back()->value = random_tensor(params.back()->value.shape(), rng);

  const Tensor logits = net.predict(Tensor(Shape{3, 32, 32}));
  const Tensor b3 = relu(net.conv_layer(convs.back()).bias()->value);
  const Tensor expected = add(matmul(w, b3.reshaped(Shape{64, 1})).reshaped(Shape{10}), params.back()->value);
  CHECK(testing::max_abs_diff(logits, expected) < 1e-12);
  CHECK(logits.shape() == Shape{10});
}

TEST_CASE("U-Net forward on 40^3 stays in (0, 1)") {
  std::mt19937_64 rng(4);
  const Network net = Network::create(build_unet3d({}, true, 15), 5);
  const Tensor out = net.predict(random_tensor(Shape{1, 40, 40, 40}, rng));
  CHECK(out.shape() == Shape{1, 40, 40, 40});
  CHECK(std::all_of(out.values().begin(), out.values().end(), [](double v) { return v > 0.0 && v < 1.0; }));
}

TEST_CASE("U-Net on 41^3 fails at pool level 1") {
  try {
    validate(build_unet3d({}, false), Shape{1, 41, 41, 41});
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("pool level 1") != std::string::npos);
  }
  CHECK_THROWS_AS(validate(build_unet3d({.input_extent = 42}, false)), ShapeError);
}

TEST_CASE("shared and unshared variants give identical output shapes") {
  std::mt19937_64 rng(6);
  const Tensor image = random_tensor(Shape{3, 32, 32}, rng);
  CHECK(Network::create(build_cifcnn(true), 1).predict(image).shape() ==
        Network::create(build_cifcnn(false), 1).predict(image).shape());
  const Tensor vol = random_tensor(Shape{1, 8, 8, 8}, rng);
  const UNetOptions small{.levels = 2, .base_channels = 2, .input_extent = 8};
  CHECK(Network::create(build_unet3d(small, true, 4), 1).predict(vol).shape() ==
        Network::create(build_unet3d(small, false), 1).predict(vol).shape());
}

TEST_CASE("U-Net output shape depends only on extent and levels") {
  for (std::size_t base : {2, 4, 8}) {
    for (std::size_t p : {0, 1, 15}) {
      const UNetOptions o{.levels = 3, .base_channels = base, .input_extent = 16};
      CHECK(validate(build_unet3d(o, p > 0, p)).output == Shape{1, 16, 16, 16});
    }
  }
}

TEST_CASE("NetSpec JSON round trip") {
  for (const auto& spec : {build_cifcnn(true, 15), build_unet3d({}, false), build_linear(4, 2)}) {
    const nlohmann::json j = spec;
    const NetSpec back = j.get<NetSpec>();
    CHECK(back.name == spec.name);
    CHECK(back.layers == spec.layers);
    CHECK(back.input_shape == spec.input_shape);
    CHECK(back.sharing == spec.sharing);
  }
  CHECK(build_cifcnn(true).same_architecture(build_cifcnn(false)));
  CHECK_FALSE(build_cifcnn(true).same_architecture(build_unet3d({}, true)));
}

TEST_CASE("network save and load") {
  testing::TempDir dir("net");
  const Network net = Network::create(build_cifcnn(true, 6, 8, false), 9);
  net.save(dir.path());
  const Network back = Network::load(dir.path());
  std::mt19937_64 rng(7);
  const Tensor image = random_tensor(Shape{3, 8, 8}, rng);
  CHECK(testing::bitwise_equal(net.predict(image), back.predict(image)));
  CHECK_THROWS_AS(Network::load(dir.path() / "missing"), FormatError);
}

TEST_CASE("dropout in training mode needs an rng") {
  const Network net = Network::create(build_cifcnn(false, 15, 8, true), 1);
  Tape tape;
  ForwardOptions o;
  o.training = true;
  o.dropout_p = 0.1;
  CHECK_THROWS_AS(net.forward(tape, tape.constant(Tensor(Shape{3, 8, 8})), o), ContractError);
}
