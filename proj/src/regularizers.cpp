#include "fsnet/regularizers.hpp"

#include <cmath>

#include "fsnet/error.hpp"
#include "fsnet/linalg.hpp"

namespace fsnet {

void RegularizerConfig::validate() const {
  if (!(l1_alpha_weight >= 0.0)) throw ConfigError("l1_alpha must be >= 0");
  if (!(nuclear_alpha_weight >= 0.0)) throw ConfigError("nuclear_alpha must be >= 0");
  if (!(feature_dropout_p >= 0.0 && feature_dropout_p < 1.0)) {
    throw ConfigError("dropout_p must lie in [0, 1), got " + std::to_string(feature_dropout_p));
  }
}

void to_json(nlohmann::json& j, const RegularizerConfig& c) {
  j = nlohmann::json{{"unit_norm_seeds", c.unit_norm_seeds},
                     {"l1_alpha", c.l1_alpha_weight},
                     {"nuclear_alpha", c.nuclear_alpha_weight},
                     {"dropout_p", c.feature_dropout_p}};
}

void from_json(const nlohmann::json& j, RegularizerConfig& c) {
  c = RegularizerConfig{};
  if (j.contains("unit_norm_seeds")) c.unit_norm_seeds = j.at("unit_norm_seeds").get<bool>();
  if (j.contains("l1_alpha")) c.l1_alpha_weight = j.at("l1_alpha").get<double>();
  if (j.contains("nuclear_alpha")) c.nuclear_alpha_weight = j.at("nuclear_alpha").get<double>();
  if (j.contains("dropout_p")) c.feature_dropout_p = j.at("dropout_p").get<double>();
  c.validate();
}

namespace {

std::vector<double> seed_norms(const Tensor& seeds) {
  const std::size_t p = seeds.shape()[0];
  const std::size_t s = seeds.numel() / p;
  std::vector<double> norms(p);
  for (std::size_t k = 0; k < p; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < s; ++i) acc += seeds[k * s + i] * seeds[k * s + i];
    norms[k] = std::sqrt(acc);
    if (!(norms[k] >= 1e-12)) {
      throw NumericError("unit-norm projection: seed " + std::to_string(k) + " has degenerate norm " +
                         std::to_string(norms[k]));
    }
  }
  return norms;
}

}  // namespace

void project_unit_norm_inplace(Tensor& seeds) {
  if (seeds.rank() < 2) throw ShapeError("seed bank must be [P, kernel...], got " + seeds.shape().str());
  const auto norms = seed_norms(seeds);
  const std::size_t s = seeds.numel() / norms.size();
  for (std::size_t k = 0; k < norms.size(); ++k)
    for (std::size_t i = 0; i < s; ++i) seeds[k * s + i] /= norms[k];
}

FilterBank project_unit_norm(const FilterBank& bank) {
  FilterBank out = bank;
  project_unit_norm_inplace(out.seeds);
  return out;
}

void normalize_gauge(Tensor& seeds, Tensor& alpha) {
  if (alpha.rank() != 3 || alpha.shape()[2] != seeds.shape()[0]) {
    throw ShapeError("normalize_gauge: alpha " + alpha.shape().str() + " vs seeds " + seeds.shape().str());
  }
  const auto norms = seed_norms(seeds);
  project_unit_norm_inplace(seeds);
  const std::size_t p = norms.size();
  for (std::size_t i = 0; i < alpha.numel(); ++i) alpha[i] *= norms[i % p];
}

double l1_penalty(const Tensor& alpha, double weight) {
  if (!(weight >= 0.0)) throw ConfigError("l1 weight must be >= 0");
  double s = 0.0;
  for (double v : alpha.values()) s += std::abs(v);
  return weight * s;
}

Var l1_penalty(const Var& alpha, double weight) {
  if (!(weight >= 0.0)) throw ConfigError("l1 weight must be >= 0");
  return ad::scale(ad::abs_sum(alpha), weight);
}

namespace {

Tensor as_matrix(const Tensor& alpha) {
  if (alpha.rank() == 2) return alpha;
  if (alpha.rank() != 3) throw ShapeError("nuclear penalty: expected [M, N, P], got " + alpha.shape().str());
  return alpha.reshaped(Shape{alpha.shape()[0] * alpha.shape()[1], alpha.shape()[2]});
}

}  // namespace

double nuclear_penalty(const Tensor& alpha, double weight) {
  if (!(weight >= 0.0)) throw ConfigError("nuclear weight must be >= 0");
  const Svd svd = jacobi_svd(as_matrix(alpha));
  double s = 0.0;
  for (double v : svd.singular_values) s += v;
  return weight * s;
}

Var nuclear_penalty(const Var& alpha, double weight) {
  if (!(weight >= 0.0)) throw ConfigError("nuclear weight must be >= 0");
  const Tensor m = as_matrix(alpha.value());
  const Svd svd = jacobi_svd(m);
  double s = 0.0;
  for (double v : svd.singular_values) s += v;
  // Subgradient U V^T; zero singular directions contribute nothing.
  const Tensor uvt = matmul(svd.u, transpose(svd.v)).reshaped(alpha.shape());
  return alpha.tape()->record(Tensor::scalar(weight * s), {alpha},
                              [alpha, uvt, weight](Tape& tp, const Tensor& g, const Tensor&) {
                                tp.accumulate(alpha, scale(uvt, weight * g[0]));
                              });
}

Tensor dropout_mask(const Shape& shape, double p, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must lie in [0, 1)");
  Tensor mask(shape, 1.0);
  if (p == 0.0) return mask;
  std::bernoulli_distribution drop(p);
  const double keep = 1.0 / (1.0 - p);
  for (double& v : mask.values()) v = drop(rng) ? 0.0 : keep;
  return mask;
}

Tensor feature_dropout(const Tensor& x, double p, std::mt19937_64& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  return mul(x, dropout_mask(x.shape(), p, rng));
}

Var feature_dropout(const Var& x, double p, std::mt19937_64& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  return ad::mul_const(x, dropout_mask(x.shape(), p, rng));
}

}  // namespace fsnet
