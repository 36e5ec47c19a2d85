#pragma once

// Post-hoc factorisation baseline: take the full filters of an already
// trained layer and approximate them with P seeds plus mixing coefficients.
// The best rank-P approximation of the MN x S filter matrix comes from its
// truncated SVD.

#include <cstddef>
#include <iosfwd>
#include <vector>

#include "fsnet/data.hpp"
#include "fsnet/nets.hpp"
#include "fsnet/shared_conv.hpp"

namespace fsnet {

struct Factorization {
  FilterBank bank;           // seeds [P, kernel...]: leading right singular vectors
  MixingCoefficients alpha;  // [M, N, P] = U_P Sigma_P
  double reconstruction_rmse = 0.0;
  double retained_energy = 1.0;  // sum_{p<=P} s_p^2 / sum s_p^2, 1 for all-zero filters
};

// filters: [M, N, kernel...]. Requires 1 <= P <= min(MN, S).
Factorization decompose(const Tensor& filters, std::size_t p);

// expand_filters(bank, alpha).
Tensor reconstruct(const Factorization& f);

struct FactorizeRow {
  std::size_t layer = 0;  // index into the net spec
  std::size_t p = 0;      // effective P (clamped to min(MN, S))
  double rmse = 0.0;
  double retained_energy = 0.0;
  double posthoc_metric = 0.0;
  double direct_metric = 0.0;
};

// For every conv layer of `unshared` and every P in `p_grid`: factorise that
// layer alone, substitute it, and evaluate on `data` without retraining.
// `direct` is the matched shared network trained from scratch; its metric is
// repeated on every row. Throws ConfigError on P = 0 or when the two
// networks do not share an architecture.
std::vector<FactorizeRow> compare_posthoc_vs_direct(const Network& unshared, const Network& direct,
                                                    const Dataset& data, const std::vector<std::size_t>& p_grid);

// Header: layer,P,rmse,retained_energy,posthoc_metric,direct_metric
void write_factorize_csv(std::ostream& out, const std::vector<FactorizeRow>& rows);

}  // namespace fsnet
