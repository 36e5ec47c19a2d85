#include "doctest.h"

#include <sstream>

#include "fsnet/error.hpp"
#include "fsnet/tensor.hpp"
#include "support.hpp"

using namespace fsnet;
using testing::max_abs_diff;
using testing::random_tensor;

TEST_CASE("shape invariants") {
  CHECK_THROWS_AS(Shape(std::vector<std::size_t>{}), ShapeError);
  CHECK_THROWS_AS((Shape{2, 0}), ShapeError);
  const Shape s{2, 3, 4};
  CHECK(s.numel() == 24);
  CHECK(s.strides() == std::vector<std::size_t>{12, 4, 1});
  CHECK(s.drop_front() == Shape{3, 4});
  CHECK(s.prepend(5) == Shape{5, 2, 3, 4});
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST_CASE("conv_valid examples") {
  CHECK(conv_valid(Tensor::vector({1, 2, 3}), Tensor::vector({1, 1})) == Tensor::vector({3, 5}));
  const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(conv_valid(m, Tensor::matrix({{1}})) == m);
  const Tensor cube = conv_valid(Tensor(Shape{3, 3, 3}, 1.0), Tensor(Shape{2, 2, 2}, 1.0));
  CHECK(cube == Tensor(Shape{2, 2, 2}, 8.0));
}

TEST_CASE("conv_valid errors name the dimension") {
  CHECK_THROWS_AS(conv_valid(Tensor::vector({1, 2}), Tensor::matrix({{1}})), ShapeError);
  try {
    conv_valid(Tensor(Shape{4, 2}), Tensor(Shape{2, 3}));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("in dim 1") != std::string::npos);
  }
}

TEST_CASE("conv_same examples") {
  CHECK(conv_same(Tensor::vector({1, 2, 3}), Tensor::vector({0, 1, 0})) == Tensor::vector({1, 2, 3}));
  CHECK(conv_same(Tensor::vector({1, 1}), Tensor::vector({1, 1, 1})) == Tensor::vector({2, 2}));
  CHECK_THROWS_AS(conv_same(Tensor::vector({1, 2, 3}), Tensor::vector({1, 1})), UnsupportedError);
}

TEST_CASE("conv_same equals conv_valid on the zero-padded input") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor(Shape{5, 5}, rng);
    const Tensor k = random_tensor(Shape{3, 3}, rng);
    CHECK(conv_same(x, k) == conv_valid(zero_pad(x, {1, 1}), k));
  }
  const Tensor x3 = random_tensor(Shape{4, 5, 6}, rng);
  const Tensor k3 = random_tensor(Shape{3, 5, 1}, rng);
  CHECK(conv_same(x3, k3) == conv_valid(zero_pad(x3, {1, 2, 0}), k3));
}

TEST_CASE("conv matches the brute-force oracle in 1, 2 and 3 dims") {
  std::mt19937_64 rng(2);
  struct Case {
    Shape input, filters;
  };
  const Case cases[] = {
      {Shape{3, 17}, Shape{2, 3, 5}},
      {Shape{3, 9, 8}, Shape{4, 3, 3, 3}},
      {Shape{2, 6, 7, 5}, Shape{3, 2, 3, 3, 3}},
      {Shape{1, 5, 5, 5}, Shape{2, 1, 1, 1, 1}},
      {Shape{2, 12, 11}, Shape{5, 2, 5, 3}},
  };
  for (const auto& c : cases) {
    const Tensor x = random_tensor(c.input, rng);
    const Tensor f = random_tensor(c.filters, rng);
    const Tensor b = random_tensor(Shape{c.filters[0]}, rng);
    CHECK(max_abs_diff(conv_layer(x, f, &b, Padding::kValid), testing::naive_conv(x, f, &b, false)) < 1e-12);
    CHECK(max_abs_diff(conv_layer(x, f, &b, Padding::kSame), testing::naive_conv(x, f, &b, true)) < 1e-12);
  }
}

TEST_CASE("conv is linear in both arguments") {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor(Shape{7, 6}, rng), y = random_tensor(Shape{7, 6}, rng);
  const Tensor k = random_tensor(Shape{3, 2}, rng), l = random_tensor(Shape{3, 2}, rng);
  const double a = 1.7, b = -0.3;
  auto rel = [](const Tensor& p, const Tensor& q) {
    return max_abs_diff(p, q) / std::max(1.0, std::sqrt(squared_norm(q)));
  };
  CHECK(rel(conv_valid(add(scale(x, a), scale(y, b)), k), add(scale(conv_valid(x, k), a), scale(conv_valid(y, k), b))) <
        1e-12);
  CHECK(rel(conv_valid(x, add(scale(k, a), scale(l, b))), add(scale(conv_valid(x, k), a), scale(conv_valid(x, l), b))) <
        1e-12);
}

TEST_CASE("one-hot kernel gives a shifted slice") {
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor(Shape{6, 7}, rng);
  Tensor k(Shape{3, 3});
  k.at({2, 1}) = 1.0;
  const Tensor out = conv_valid(x, k);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) CHECK(out.at({i, j}) == x.at({i + 2, j + 1}));
}

TEST_CASE("conv gradients are adjoint to the forward map") {
  std::mt19937_64 rng(5);
  for (Padding pad : {Padding::kValid, Padding::kSame}) {
    const Tensor x = random_tensor(Shape{3, 7, 6}, rng);
    const Tensor f = random_tensor(Shape{2, 3, 3, 3}, rng);
    const Tensor y = conv_layer(x, f, nullptr, pad);
    const Tensor g = random_tensor(y.shape(), rng);
    // <g, conv(x, f)> = <grad_input, x> = <grad_filters, f>
    const double lhs = dot(g, y);
    CHECK(dot(conv_layer_grad_input(g, f, x.shape(), pad), x) == doctest::Approx(lhs).epsilon(1e-12));
    CHECK(dot(conv_layer_grad_filters(g, x, f.shape(), pad), f) == doctest::Approx(lhs).epsilon(1e-12));
  }
}

TEST_CASE("max_pool") {
  const PoolResult r = max_pool(Tensor::vector({1, 3, 2, 4}), {2});
  CHECK(r.values == Tensor::vector({3, 4}));
  CHECK(r.argmax == std::vector<std::size_t>{1, 3});
  CHECK(max_pool(Tensor(Shape{4, 4}, 2.5), {2, 2}).values == Tensor(Shape{2, 2}, 2.5));
  CHECK_THROWS_AS(max_pool(Tensor(Shape{5}), {2}), ShapeError);

  std::mt19937_64 rng(6);
  const Tensor x = random_tensor(Shape{4, 4}, rng);
  const PoolResult p = max_pool(x, {2, 2});
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      double best = -1e300;
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 2; ++b) best = std::max(best, x.at({2 * i + a, 2 * j + b}));
      CHECK(p.values.at({i, j}) == best);
    }
  }
  const Tensor g = random_tensor(p.values.shape(), rng);
  const Tensor routed = max_pool_backward(g, p.argmax, x.shape());
  CHECK(sum(routed) == doctest::Approx(sum(g)).epsilon(1e-15));
  std::size_t nonzero = 0;
  for (double v : routed.values()) nonzero += v != 0.0;
  CHECK(nonzero == 4);
}

TEST_CASE("elementwise family") {
  CHECK(relu(Tensor::vector({-1, 0, 2})) == Tensor::vector({0, 0, 2}));
  CHECK(dot(Tensor::vector({1, 2}), Tensor::vector({3, 4})) == 11.0);
  const Tensor up = upsample_nearest(Tensor::matrix({{1, 2}, {3, 4}}), 2);
  CHECK(up == Tensor::matrix({{1, 1, 2, 2}, {1, 1, 2, 2}, {3, 3, 4, 4}, {3, 3, 4, 4}}));
  CHECK(upsample_nearest_backward(up, {2, 2}) == Tensor::matrix({{4, 8}, {12, 16}}));
  CHECK_THROWS_AS(add(Tensor::vector({1}), Tensor::vector({1, 2})), ShapeError);
  const Tensor s = sigmoid(Tensor::vector({-800, 0, 800}));
  CHECK(s.all_finite());
  CHECK(s[1] == 0.5);
}

TEST_CASE("matmul, transpose, concat and split") {
  const Tensor a = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  CHECK(matmul(a, transpose(a)) == Tensor::matrix({{14, 32}, {32, 77}}));
  const Tensor c = concat_front(Tensor(Shape{1, 2}, 1.0), Tensor(Shape{2, 2}, 2.0));
  CHECK(c.shape() == Shape{3, 2});
  const auto [head, tail] = split_front(c, 1);
  CHECK(head == Tensor(Shape{1, 2}, 1.0));
  CHECK(tail == Tensor(Shape{2, 2}, 2.0));
}

TEST_CASE("tensor dump round trip and byte layout") {
  std::mt19937_64 rng(7);
  const Tensor t = random_tensor(Shape{2, 3, 1}, rng);
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  CHECK(bytes.size() == 4 + 3 * 4 + 6 * 8);
  CHECK(static_cast<unsigned char>(bytes[0]) == 3);
  CHECK(static_cast<unsigned char>(bytes[4]) == 2);
  CHECK(read_tensor(ss) == t);

  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_tensor(truncated), FormatError);
}
