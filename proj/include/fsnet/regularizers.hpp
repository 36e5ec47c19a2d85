#pragma once

// Regularisers for the seed/coefficient factorisation. Writing every filter as
// a combination of a few seeds is an ill-posed factorisation (seeds and
// coefficients can trade scale freely), so four options are offered:
// unit-norm seeds, L1 and nuclear-norm penalties on the coefficients, and
// dropout on the layer outputs. Dropout at a low rate is the default.

#include <cstdint>
#include <random>

#include "json.hpp"

#include "fsnet/autodiff.hpp"
#include "fsnet/shared_conv.hpp"

namespace fsnet {

struct RegularizerConfig {
  bool unit_norm_seeds = false;
  double l1_alpha_weight = 0.0;
  double nuclear_alpha_weight = 0.0;
  double feature_dropout_p = 0.1;

  // Throws ConfigError for negative weights or p outside [0, 1).
  void validate() const;

  bool operator==(const RegularizerConfig&) const = default;
};

// JSON keys: unit_norm_seeds, l1_alpha, nuclear_alpha, dropout_p.
void to_json(nlohmann::json& j, const RegularizerConfig& c);
void from_json(const nlohmann::json& j, RegularizerConfig& c);

// Each seed divided by its L2 norm. Seeds with norm < 1e-12 raise
// NumericError rather than being re-randomised.
FilterBank project_unit_norm(const FilterBank& bank);
// In-place variant on a [P, kernel...] seed tensor.
void project_unit_norm_inplace(Tensor& seeds);

// Rescales every seed to unit norm and multiplies alpha[..., p] by the old
// norm of seed p. Leaves expand_filters unchanged.
void normalize_gauge(Tensor& seeds, Tensor& alpha);

// weight * sum |alpha|
double l1_penalty(const Tensor& alpha, double weight);
Var l1_penalty(const Var& alpha, double weight);

// weight * sum of singular values of alpha viewed as an (M*N) x P matrix.
// The gradient is weight * U V^T from the thin SVD.
double nuclear_penalty(const Tensor& alpha, double weight);
Var nuclear_penalty(const Var& alpha, double weight);

// Inverted dropout: in training each element is zeroed with probability p
// and survivors are scaled by 1/(1-p); at inference this is the identity.
Tensor feature_dropout(const Tensor& x, double p, std::mt19937_64& rng, bool training);
Var feature_dropout(const Var& x, double p, std::mt19937_64& rng, bool training);

// The keep/zero mask feature_dropout would apply (values 0 or 1/(1-p)).
Tensor dropout_mask(const Shape& shape, double p, std::mt19937_64& rng);

}  // namespace fsnet
