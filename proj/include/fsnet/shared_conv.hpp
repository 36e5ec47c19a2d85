#pragma once

// Filter-sharing convolution.
//
// A standard layer with N inputs and M outputs learns M*N filters v_ij of S
// elements each:
//     G_i = sum_j F_j * v_ij + b_i
// A shared layer instead learns P seed filters and an M x N x P array of
// mixing coefficients, and expands
//     v_ij = sum_p alpha_ij^p * seed_p
// on every forward pass. The expansion is recorded on the tape like any other
// op, so gradients reach the seeds and the coefficients directly.
//
// Weight counts (bias excluded): M*N*S standard, M*N*P + P*S shared.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "fsnet/autodiff.hpp"
#include "fsnet/tensor.hpp"

namespace fsnet {

struct ConvLayerSpec {
  std::size_t in_channels = 1;   // N
  std::size_t out_channels = 1;  // M
  std::vector<std::size_t> kernel{3};
  std::size_t shared_p = 0;  // 0 = no sharing, otherwise P
  Padding padding = Padding::kSame;

  std::size_t spatial_dims() const { return kernel.size(); }
  // S, the element count of one filter.
  std::size_t filter_size() const;
  bool shared() const { return shared_p > 0; }
  Shape kernel_shape() const { return Shape(kernel); }
  // [M, N, kernel...]
  Shape filter_shape() const;

  // Throws ConfigError on zero extents / counts.
  void validate() const;

  bool operator==(const ConvLayerSpec&) const = default;
};

void to_json(nlohmann::json& j, const ConvLayerSpec& spec);
void from_json(const nlohmann::json& j, ConvLayerSpec& spec);

// P seed filters, stored as one [P, kernel...] tensor.
struct FilterBank {
  Tensor seeds;

  std::size_t count() const { return seeds.shape()[0]; }
  Shape kernel() const { return seeds.shape().drop_front(); }
  Tensor seed(std::size_t p) const;
};

// alpha_ij^p as an [M, N, P] tensor.
struct MixingCoefficients {
  Tensor alpha;

  std::size_t out_channels() const { return alpha.shape()[0]; }
  std::size_t in_channels() const { return alpha.shape()[1]; }
  std::size_t count() const { return alpha.shape()[2]; }
};

struct ParamCount {
  std::size_t weights = 0;
  std::size_t bias = 0;
  std::size_t total() const { return weights + bias; }
};

ParamCount param_count(const ConvLayerSpec& spec);

// Largest P with M*N*P + P*S < M*N*S, or 0 when no P >= 1 saves anything.
std::size_t sharing_breakeven(std::size_t out_channels, std::size_t in_channels, std::size_t filter_size);
std::size_t sharing_breakeven(const ConvLayerSpec& spec);

// v_ij = sum_p alpha_ij^p seed_p -> [M, N, kernel...]
Tensor expand_filters(const FilterBank& bank, const MixingCoefficients& alpha);
// Same computation on the tape (seeds [P, kernel...], alpha [M, N, P]).
Var expand_filters(const Var& seeds, const Var& alpha);

// G = conv(F, v) + b with explicit filters [M, N, kernel...].
Tensor layer_forward(const ConvLayerSpec& spec, const Tensor& filters, const Tensor& bias,
                     const Tensor& input);
Var layer_forward(const ConvLayerSpec& spec, const Var& filters, const Var& bias, const Var& input);

// layer_forward(expand_filters(seeds, alpha), ...) on the tape.
Var shared_layer_forward(const ConvLayerSpec& spec, const Var& seeds, const Var& alpha,
                         const Var& bias, const Var& input);

// A layer instance: spec plus its parameters. Standard layers own
// {filters, bias}; shared layers own {seeds, alpha, bias}.
class ConvLayer {
 public:
  // Fan-based initialisation: seeds (or standard filters) uniform in
  // +-sqrt(6 / (S (N + M))), alpha ~ normal(0, 1/sqrt(P)), bias 0.
  static ConvLayer create(const ConvLayerSpec& spec, const std::string& name, std::mt19937_64& rng);

  const ConvLayerSpec& spec() const { return spec_; }
  const std::string& name() const { return name_; }

  Var forward(Tape& tape, const Var& input) const;

  // The M*N filters the layer currently applies (expanded if shared).
  Tensor effective_filters() const;

  // Replaces the layer with a standard one using the given filters.
  void set_filters(const Tensor& filters);

  std::vector<ParameterPtr> parameters() const;
  const ParameterPtr& bias() const { return bias_; }
  const ParameterPtr& filters() const { return filters_; }
  const ParameterPtr& seeds() const { return seeds_; }
  const ParameterPtr& alpha() const { return alpha_; }

  // Writes <dir>/<name>.{seeds,alpha,bias|filters,bias}.bin and <name>.json.
  void save(const std::filesystem::path& dir) const;
  // Loads values saved by save(); spec must match the sidecar.
  void load(const std::filesystem::path& dir);

 private:
  ConvLayerSpec spec_;
  std::string name_;
  ParameterPtr filters_, seeds_, alpha_, bias_;
};

}  // namespace fsnet
