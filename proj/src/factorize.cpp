#include "fsnet/factorize.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "fsnet/error.hpp"
#include "fsnet/linalg.hpp"
#include "fsnet/train.hpp"

namespace fsnet {

Factorization decompose(const Tensor& filters, std::size_t p) {
  if (filters.rank() < 3) throw ShapeError("decompose: filters must be [M, N, kernel...], got " + filters.shape().str());
  const std::size_t m = filters.shape()[0], n = filters.shape()[1];
  const Shape kernel = filters.shape().drop_front(2);
  const std::size_t mn = m * n, s = kernel.numel();
  if (p < 1 || p > std::min(mn, s)) {
    throw ConfigError("decompose: P=" + std::to_string(p) + " outside [1, " + std::to_string(std::min(mn, s)) + "]");
  }
  const Tensor mat = filters.reshaped(Shape{mn, s});
  const Svd svd = jacobi_svd(mat);

  Tensor seeds(kernel.prepend(p));
  Tensor alpha(Shape{m, n, p});
  const std::size_t r = svd.singular_values.size();
  for (std::size_t k = 0; k < p; ++k) {
    for (std::size_t j = 0; j < s; ++j) seeds[k * s + j] = svd.v[j * r + k];
    for (std::size_t i = 0; i < mn; ++i) alpha[i * p + k] = svd.u[i * r + k] * svd.singular_values[k];
  }

  Factorization f{FilterBank{seeds}, MixingCoefficients{alpha}, 0.0, 1.0};
  const Tensor diff = sub(reconstruct(f), filters);
  f.reconstruction_rmse = std::sqrt(squared_norm(diff) / static_cast<double>(filters.numel()));
  double kept = 0.0, total = 0.0;
  for (std::size_t k = 0; k < r; ++k) {
    const double e = svd.singular_values[k] * svd.singular_values[k];
    total += e;
    if (k < p) kept += e;
  }
  f.retained_energy = total > 0.0 ? std::min(1.0, kept / total) : 1.0;
  return f;
}

Tensor reconstruct(const Factorization& f) { return expand_filters(f.bank, f.alpha); }

std::vector<FactorizeRow> compare_posthoc_vs_direct(const Network& unshared, const Network& direct,
                                                    const Dataset& data, const std::vector<std::size_t>& p_grid) {
  if (p_grid.empty()) throw ConfigError("P grid is empty");
  for (std::size_t p : p_grid)
    if (p == 0) throw ConfigError("P=0 is not a valid factorisation rank");
  if (!unshared.spec().same_architecture(direct.spec())) {
    throw ConfigError("post-hoc comparison: the two checkpoints have different architectures");
  }
  for (std::size_t idx : unshared.conv_indices()) {
    if (unshared.conv_layer(idx).spec().shared()) {
      throw ConfigError("post-hoc comparison: layer " + std::to_string(idx) + " of the baseline is already shared");
    }
  }

  const double direct_metric = evaluate(direct, data).metric;
  std::vector<FactorizeRow> rows;
  for (std::size_t idx : unshared.conv_indices()) {
    const ConvLayerSpec& spec = unshared.conv_layer(idx).spec();
    const Tensor filters = unshared.conv_layer(idx).effective_filters();
    const std::size_t limit = std::min(spec.out_channels * spec.in_channels, spec.filter_size());
    for (std::size_t requested : p_grid) {
      const std::size_t p = std::min(requested, limit);
      const Factorization f = decompose(filters, p);
      Network probe = unshared.clone();
      probe.substitute_filters(idx, reconstruct(f));
      rows.push_back({idx, p, f.reconstruction_rmse, f.retained_energy, evaluate(probe, data).metric, direct_metric});
    }
  }
  return rows;
}

void write_factorize_csv(std::ostream& out, const std::vector<FactorizeRow>& rows) {
  out << "layer,P,rmse,retained_energy,posthoc_metric,direct_metric\n";
  for (const auto& r : rows) {
    out << r.layer << ',' << r.p << ',' << format_double(r.rmse) << ',' << format_double(r.retained_energy) << ','
        << format_double(r.posthoc_metric) << ',' << format_double(r.direct_metric) << '\n';
  }
}

}  // namespace fsnet
