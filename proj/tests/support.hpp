#pragma once

// Helpers and independent oracles shared by the test binaries. Nothing here
// calls the library's own convolution or SVD code.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "fsnet/tensor.hpp"

namespace testing {

using fsnet::Shape;
using fsnet::Tensor;

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (double& v : t.values()) v = u(rng);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (std::memcmp(&a.data()[i], &b.data()[i], sizeof(double)) != 0) return false;
  return true;
}

// Advances a multi-index; false once it wraps around.
inline bool next_index(std::vector<std::size_t>& idx, const std::vector<std::size_t>& extent) {
  for (std::size_t d = idx.size(); d-- > 0;) {
    if (++idx[d] < extent[d]) return true;
    idx[d] = 0;
  }
  return false;
}

// Brute-force multi-channel cross-correlation, D spatial dims.
//   input [N, s...], filters [M, N, k...] -> [M, o...]
inline Tensor naive_conv(const Tensor& input, const Tensor& filters, const Tensor* bias, bool same) {
  const std::size_t m_out = filters.shape()[0], n_in = filters.shape()[1];
  const std::size_t dims = input.rank() - 1;
  std::vector<std::size_t> in_ext(dims), k_ext(dims), out_ext(dims);
  std::vector<long> pad(dims);
  for (std::size_t d = 0; d < dims; ++d) {
    in_ext[d] = input.shape()[d + 1];
    k_ext[d] = filters.shape()[d + 2];
    pad[d] = same ? static_cast<long>((k_ext[d] - 1) / 2) : 0;
    out_ext[d] = same ? in_ext[d] : in_ext[d] - k_ext[d] + 1;
  }
  std::size_t in_sp = 1, k_sp = 1, out_sp = 1;
  for (std::size_t d = 0; d < dims; ++d) {
    in_sp *= in_ext[d];
    k_sp *= k_ext[d];
    out_sp *= out_ext[d];
  }
  Tensor out(Shape(out_ext).prepend(m_out));
  for (std::size_t m = 0; m < m_out; ++m) {
    std::vector<std::size_t> o(dims, 0);
    std::size_t o_flat = 0;
    do {
      double acc = bias ? (*bias)[m] : 0.0;
      for (std::size_t n = 0; n < n_in; ++n) {
        std::vector<std::size_t> u(dims, 0);
        std::size_t u_flat = 0;
        do {
          bool inside = true;
          std::size_t flat = 0;
          for (std::size_t d = 0; d < dims; ++d) {
            const long p = static_cast<long>(o[d] + u[d]) - pad[d];
            if (p < 0 || p >= static_cast<long>(in_ext[d])) {
              inside = false;
              break;
            }
            flat = flat * in_ext[d] + static_cast<std::size_t>(p);
          }
          if (inside) acc += input[n * in_sp + flat] * filters[(m * n_in + n) * k_sp + u_flat];
          ++u_flat;
        } while (next_index(u, k_ext));
      }
      out[m * out_sp + o_flat] = acc;
      ++o_flat;
    } while (next_index(o, out_ext));
  }
  return out;
}

// Singular values of an m x n matrix from the eigenvalues of A^T A, computed
// by the classical two-sided cyclic Jacobi eigenvalue method. Descending.
inline std::vector<double> oracle_singular_values(const Tensor& a) {
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> g(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < m; ++k) g[i * n + j] += a[k * n + i] * a[k * n + j];
  for (int sweep = 0; sweep < 200; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) off += g[i * n + j] * g[i * n + j];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = g[p * n + q];
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (g[q * n + q] - g[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double gkp = g[k * n + p], gkq = g[k * n + q];
          g[k * n + p] = c * gkp - s * gkq;
          g[k * n + q] = s * gkp + c * gkq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double gpk = g[p * n + k], gqk = g[q * n + k];
          g[p * n + k] = c * gpk - s * gqk;
          g[q * n + k] = s * gpk + c * gqk;
        }
      }
    }
  }
  std::vector<double> sv(n);
  for (std::size_t i = 0; i < n; ++i) sv[i] = std::sqrt(std::max(0.0, g[i * n + i]));
  std::sort(sv.rbegin(), sv.rend());
  sv.resize(std::min(m, n));
  return sv;
}

// Scratch directory removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("fsnet-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
