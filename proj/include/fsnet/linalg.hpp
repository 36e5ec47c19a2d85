#pragma once

#include <vector>

#include "fsnet/tensor.hpp"

namespace fsnet {

// Thin SVD A = U diag(S) V^T of an m x n matrix, r = min(m, n).
//   u [m, r], singular_values descending (length r), v [n, r].
// Left vectors belonging to zero singular values are returned as zero
// columns.
struct Svd {
  Tensor u;
  std::vector<double> singular_values;
  Tensor v;
};

struct JacobiOptions {
  double tolerance = 1e-12;  // relative off-diagonal threshold
  int max_sweeps = 100;
};

// One-sided (Hestenes) Jacobi SVD. Throws NumericError with a condition
// estimate if it has not converged after max_sweeps.
Svd jacobi_svd(const Tensor& a, const JacobiOptions& options = {});

// U_r diag(S_r) V_r^T truncated to the leading `rank` triplets.
Tensor low_rank(const Svd& svd, std::size_t rank);

}  // namespace fsnet
