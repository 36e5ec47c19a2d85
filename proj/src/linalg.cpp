#include "fsnet/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "fsnet/error.hpp"

namespace fsnet {

namespace {

// Works on the columns of a tall (rows >= cols) matrix stored column-major.
struct Columns {
  std::size_t rows, cols;
  std::vector<double> data;
  double* col(std::size_t j) { return data.data() + j * rows; }
  const double* col(std::size_t j) const { return data.data() + j * rows; }
};

Svd svd_tall(const Tensor& a, bool transposed, const JacobiOptions& options) {
  const std::size_t m = transposed ? a.shape()[1] : a.shape()[0];
  const std::size_t n = transposed ? a.shape()[0] : a.shape()[1];
  const std::size_t src_cols = a.shape()[1];
  Columns w{m, n, std::vector<double>(m * n)};
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) w.col(j)[i] = transposed ? a[j * src_cols + i] : a[i * src_cols + j];

  Columns v{n, n, std::vector<double>(n * n, 0.0)};
  for (std::size_t j = 0; j < n; ++j) v.col(j)[j] = 1.0;

  bool converged = false;
  double worst = 0.0;
  for (int sweep = 0; sweep < options.max_sweeps && !converged; ++sweep) {
    converged = true;
    worst = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* cp = w.col(p);
        double* cq = w.col(q);
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += cp[i] * cp[i];
          beta += cq[i] * cq[i];
          gamma += cp[i] * cq[i];
        }
        if (gamma == 0.0) continue;
        const double off = std::abs(gamma) / std::sqrt(alpha * beta);
        worst = std::max(worst, off);
        if (off <= options.tolerance) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = cp[i], y = cq[i];
          cp[i] = c * x - s * y;
          cq[i] = s * x + c * y;
        }
        double* vp = v.col(p);
        double* vq = v.col(q);
        for (std::size_t i = 0; i < n; ++i) {
          const double x = vp[i], y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
    }
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double* c = w.col(j);
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += c[i] * c[i];
    sigma[j] = std::sqrt(s);
  }
  if (!converged) {
    const auto [lo, hi] = std::minmax_element(sigma.begin(), sigma.end());
    std::ostringstream msg;
    msg << "jacobi_svd: no convergence after " << options.max_sweeps << " sweeps on " << a.shape().str()
        << " matrix (largest off-diagonal cosine " << worst << ", condition estimate "
        << (*lo > 0.0 ? *hi / *lo : INFINITY) << ")";
    throw NumericError(msg.str());
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  const double scale_ref = sigma.empty() ? 0.0 : sigma[order[0]];
  const double zero_cut = scale_ref * 1e-15 * static_cast<double>(std::max(m, n));
  Tensor left(Shape{m, n});
  Tensor right(Shape{n, n});
  std::vector<double> s_sorted(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    s_sorted[k] = sigma[j];
    const double* c = w.col(j);
    const bool nonzero = sigma[j] > zero_cut && sigma[j] > 0.0;
    for (std::size_t i = 0; i < m; ++i) left[i * n + k] = nonzero ? c[i] / sigma[j] : 0.0;
    for (std::size_t i = 0; i < n; ++i) right[i * n + k] = v.col(j)[i];
  }
  if (transposed) return {std::move(right), std::move(s_sorted), std::move(left)};
  return {std::move(left), std::move(s_sorted), std::move(right)};
}

}  // namespace

Svd jacobi_svd(const Tensor& a, const JacobiOptions& options) {
  if (a.rank() != 2) throw ShapeError("jacobi_svd: expected a matrix, got " + a.shape().str());
  if (!a.all_finite()) throw NumericError("jacobi_svd: matrix has non-finite entries");
  return svd_tall(a, a.shape()[0] < a.shape()[1], options);
}

Tensor low_rank(const Svd& svd, std::size_t rank) {
  const std::size_t m = svd.u.shape()[0], n = svd.v.shape()[0], r = svd.singular_values.size();
  rank = std::min(rank, r);
  Tensor out(Shape{m, n});
  for (std::size_t k = 0; k < rank; ++k) {
    const double s = svd.singular_values[k];
    for (std::size_t i = 0; i < m; ++i) {
      const double us = svd.u[i * r + k] * s;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += us * svd.v[j * r + k];
    }
  }
  return out;
}

}  // namespace fsnet
