#include "fsnet/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "fsnet/error.hpp"

namespace fsnet {

// ---------------------------------------------------------------------------
// Shape

Shape::Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
  if (dims_.empty()) throw ShapeError("shape must have at least one dimension");
  for (std::size_t d = 0; d < dims_.size(); ++d) {
    if (dims_[d] == 0) {
      throw ShapeError("shape " + str() + ": extent of dim " + std::to_string(d) + " is zero");
    }
  }
}

std::size_t Shape::numel() const {
  return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1}, std::multiplies<>());
}

std::vector<std::size_t> Shape::strides() const {
  std::vector<std::size_t> s(dims_.size(), 1);
  for (std::size_t d = dims_.size() - 1; d > 0; --d) s[d - 1] = s[d] * dims_[d];
  return s;
}

Shape Shape::drop_front(std::size_t n) const {
  if (n >= dims_.size()) throw ShapeError("cannot drop " + std::to_string(n) + " dims of " + str());
  return Shape(std::vector<std::size_t>(dims_.begin() + static_cast<std::ptrdiff_t>(n), dims_.end()));
}

Shape Shape::prepend(std::size_t extent) const {
  std::vector<std::size_t> d;
  d.reserve(dims_.size() + 1);
  d.push_back(extent);
  d.insert(d.end(), dims_.begin(), dims_.end());
  return Shape(std::move(d));
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t d = 0; d < dims_.size(); ++d) os << (d ? "," : "") << dims_[d];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_.numel(), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_.numel()) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_.str());
  }
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(data));
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.rank()) {
    throw ShapeError("index rank " + std::to_string(index.size()) + " for shape " + shape_.str());
  }
  std::size_t off = 0;
  std::size_t d = 0;
  for (std::size_t i : index) {
    if (i >= shape_[d]) throw ShapeError("index out of range in dim " + std::to_string(d));
    off = off * shape_[d] + i;
    ++d;
  }
  return off;
}

double Tensor::at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }
double& Tensor::at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape.numel() != numel()) {
    throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
  }
  return Tensor(std::move(shape), data_);
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_.str());
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
  }
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  const double* src = a.data();
  double* dst = out.data();
  for (std::size_t i = 0; i < a.numel(); ++i) dst[i] = f(src[i]);
  return out;
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, const char* op, F f) {
  require_same_shape(a, b, op);
  Tensor out(a.shape());
  const double* x = a.data();
  const double* y = b.data();
  double* dst = out.data();
  for (std::size_t i = 0; i < a.numel(); ++i) dst[i] = f(x[i], y[i]);
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return zip(a, b, "add", [](double x, double y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return zip(a, b, "sub", [](double x, double y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return zip(a, b, "mul", [](double x, double y) { return x * y; });
}
Tensor scale(const Tensor& a, double s) {
  return map(a, [s](double x) { return s * x; });
}
Tensor relu(const Tensor& a) {
  return map(a, [](double x) { return x > 0.0 ? x : 0.0; });
}
Tensor sigmoid(const Tensor& a) {
  return map(a, [](double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
}

double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return s;
}

double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

double squared_norm(const Tensor& a) { return dot(a, a); }

void axpy(double s, const Tensor& x, Tensor& y) {
  require_same_shape(x, y, "axpy");
  const double* src = x.data();
  double* dst = y.data();
  for (std::size_t i = 0; i < x.numel(); ++i) dst[i] += s * src[i];
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: incompatible shapes " + a.shape().str() + " x " + b.shape().str());
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = a[i * k + p];
      const double* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected matrix, got " + a.shape().str());
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return out;
}

Tensor concat_front(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || a.shape().drop_front() != b.shape().drop_front()) {
    throw ShapeError("concat: trailing shapes differ " + a.shape().str() + " vs " + b.shape().str());
  }
  std::vector<double> data(a.values().begin(), a.values().end());
  data.insert(data.end(), b.values().begin(), b.values().end());
  return Tensor(a.shape().drop_front().prepend(a.shape()[0] + b.shape()[0]), std::move(data));
}

std::pair<Tensor, Tensor> split_front(const Tensor& t, std::size_t first) {
  if (t.rank() < 2 || first == 0 || first >= t.shape()[0]) {
    throw ShapeError("split: cannot split " + t.shape().str() + " at " + std::to_string(first));
  }
  const Shape rest = t.shape().drop_front();
  const std::size_t cut = first * rest.numel();
  auto mid = t.values().begin() + static_cast<std::ptrdiff_t>(cut);
  return {Tensor(rest.prepend(first), std::vector<double>(t.values().begin(), mid)),
          Tensor(rest.prepend(t.shape()[0] - first), std::vector<double>(mid, t.values().end()))};
}

namespace {

// Calls f(out_flat, in_flat) for every element of the output of a
// nearest-neighbour upsampling.
template <typename F>
void for_each_upsample(const Shape& in, const std::vector<std::size_t>& factors, F f) {
  const std::size_t rank = in.rank();
  std::vector<std::size_t> out_dims(rank);
  for (std::size_t d = 0; d < rank; ++d) out_dims[d] = in[d] * factors[d];
  const Shape out(out_dims);
  const auto in_strides = in.strides();
  std::vector<std::size_t> idx(rank, 0);
  const std::size_t total = out.numel();
  for (std::size_t o = 0; o < total; ++o) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < rank; ++d) src += (idx[d] / factors[d]) * in_strides[d];
    f(o, src);
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_dims[d]) break;
      idx[d] = 0;
    }
  }
}

void check_factors(const Shape& s, const std::vector<std::size_t>& factors, const char* op) {
  if (factors.size() != s.rank()) {
    throw ShapeError(std::string(op) + ": factor count does not match rank of " + s.str());
  }
  for (std::size_t f : factors)
    if (f == 0) throw ShapeError(std::string(op) + ": zero factor");
}

}  // namespace

Tensor upsample_nearest(const Tensor& x, const std::vector<std::size_t>& factors) {
  check_factors(x.shape(), factors, "upsample_nearest");
  std::vector<std::size_t> out_dims(x.rank());
  for (std::size_t d = 0; d < x.rank(); ++d) out_dims[d] = x.shape()[d] * factors[d];
  Tensor out{Shape(out_dims)};
  for_each_upsample(x.shape(), factors, [&](std::size_t o, std::size_t i) { out[o] = x[i]; });
  return out;
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  return upsample_nearest(x, std::vector<std::size_t>(x.rank(), factor));
}

Tensor upsample_nearest_backward(const Tensor& grad, const std::vector<std::size_t>& factors) {
  check_factors(grad.shape(), factors, "upsample_nearest_backward");
  std::vector<std::size_t> in_dims(grad.rank());
  for (std::size_t d = 0; d < grad.rank(); ++d) {
    if (grad.shape()[d] % factors[d] != 0) {
      throw ShapeError("upsample_nearest_backward: extent not divisible in dim " + std::to_string(d));
    }
    in_dims[d] = grad.shape()[d] / factors[d];
  }
  Tensor out{Shape(in_dims)};
  for_each_upsample(out.shape(), factors, [&](std::size_t o, std::size_t i) { out[i] += grad[o]; });
  return out;
}

Tensor zero_pad(const Tensor& x, const std::vector<std::size_t>& pads) {
  if (pads.size() != x.rank()) throw ShapeError("zero_pad: pad count does not match rank");
  std::vector<std::size_t> out_dims(x.rank());
  for (std::size_t d = 0; d < x.rank(); ++d) out_dims[d] = x.shape()[d] + 2 * pads[d];
  Tensor out{Shape(out_dims)};
  const auto out_strides = out.shape().strides();
  std::vector<std::size_t> idx(x.rank(), 0);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    std::size_t o = 0;
    for (std::size_t d = 0; d < x.rank(); ++d) o += (idx[d] + pads[d]) * out_strides[d];
    out[o] = x[i];
    for (std::size_t d = x.rank(); d-- > 0;) {
      if (++idx[d] < x.shape()[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling

PoolResult max_pool(const Tensor& input, const std::vector<std::size_t>& window) {
  const Shape& in = input.shape();
  if (window.size() != in.rank()) {
    throw ShapeError("max_pool: window rank " + std::to_string(window.size()) + " vs input " +
                     in.str());
  }
  std::vector<std::size_t> out_dims(in.rank());
  for (std::size_t d = 0; d < in.rank(); ++d) {
    if (window[d] == 0 || in[d] % window[d] != 0) {
      throw ShapeError("max_pool: extent " + std::to_string(in[d]) + " of dim " + std::to_string(d) +
                       " not divisible by window " + std::to_string(window[d]));
    }
    out_dims[d] = in[d] / window[d];
  }
  PoolResult result{Tensor(Shape(out_dims)), {}};
  const std::size_t n_out = result.values.numel();
  std::vector<double> best(n_out, -std::numeric_limits<double>::infinity());
  result.argmax.assign(n_out, 0);
  std::vector<bool> seen(n_out, false);
  const auto out_strides = result.values.shape().strides();
  std::vector<std::size_t> idx(in.rank(), 0);
  // Scanning the input in order keeps the first maximal element on ties.
  for (std::size_t i = 0; i < input.numel(); ++i) {
    std::size_t o = 0;
    for (std::size_t d = 0; d < in.rank(); ++d) o += (idx[d] / window[d]) * out_strides[d];
    if (!seen[o] || input[i] > best[o]) {
      best[o] = input[i];
      result.argmax[o] = i;
      seen[o] = true;
    }
    for (std::size_t d = in.rank(); d-- > 0;) {
      if (++idx[d] < in[d]) break;
      idx[d] = 0;
    }
  }
  std::copy(best.begin(), best.end(), result.values.data());
  return result;
}

Tensor max_pool_backward(const Tensor& grad, const std::vector<std::size_t>& argmax,
                         const Shape& input_shape) {
  if (argmax.size() != grad.numel()) throw ShapeError("max_pool_backward: argmax size mismatch");
  Tensor out(input_shape);
  for (std::size_t o = 0; o < grad.numel(); ++o) out[argmax[o]] += grad[o];
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

std::vector<std::size_t> padding_for(const Shape& kernel, Padding padding) {
  std::vector<std::size_t> pads(kernel.rank(), 0);
  if (padding == Padding::kSame) {
    for (std::size_t d = 0; d < kernel.rank(); ++d) {
      if (kernel[d] % 2 == 0) {
        throw UnsupportedError("same padding requires odd kernel extents; dim " +
                               std::to_string(d) + " has extent " + std::to_string(kernel[d]));
      }
      pads[d] = (kernel[d] - 1) / 2;
    }
  }
  return pads;
}

// Convolution in "padded-stride" form. The input is zero-padded once; the
// output is computed in a buffer that uses the padded input's strides, so a
// kernel tap u becomes a constant flat offset and every tap is one long
// contiguous axpy. Buffer entries whose trailing coordinates fall past the
// true output extent are junk and are dropped (or zeroed for the adjoints).
struct ConvPlan {
  Shape in, padded, out, kernel;
  std::vector<std::size_t> pads;
  std::vector<std::size_t> tap_offsets;  // flat offset into padded input per kernel element
  std::vector<std::size_t> out_offsets;  // flat offset into the strided buffer per output element
  std::size_t span = 0;                  // strided buffer length
};

ConvPlan make_plan(const Shape& in, const Shape& kernel, Padding padding) {
  ConvPlan plan;
  plan.in = in;
  plan.kernel = kernel;
  plan.pads = padding_for(kernel, padding);
  plan.out = conv_output_spatial(in, kernel, padding);
  const std::size_t rank = in.rank();
  std::vector<std::size_t> pdims(rank);
  for (std::size_t d = 0; d < rank; ++d) pdims[d] = in[d] + 2 * plan.pads[d];
  plan.padded = Shape(pdims);
  const auto strides = plan.padded.strides();

  auto flat_offsets = [&](const Shape& s) {
    std::vector<std::size_t> offs(s.numel());
    std::vector<std::size_t> idx(rank, 0);
    for (auto& o : offs) {
      o = 0;
      for (std::size_t d = 0; d < rank; ++d) o += idx[d] * strides[d];
      for (std::size_t d = rank; d-- > 0;) {
        if (++idx[d] < s[d]) break;
        idx[d] = 0;
      }
    }
    return offs;
  };
  plan.tap_offsets = flat_offsets(kernel);
  plan.out_offsets = flat_offsets(plan.out);
  plan.span = plan.out_offsets.back() + 1;
  return plan;
}

constexpr std::size_t kChunk = 1024;

// Blocked multi-channel correlation over flat runs:
//   dst[d][i] += sum_s sum_t weight(d, s, t) * src[s][i + offsets[t]],  i < length
// Output channels are processed four at a time and taps four at a time so
// every loaded source value feeds several FMAs.
struct CorrelateArgs {
  const double* src;
  std::size_t src_stride;
  std::size_t n_src;
  double* dst;
  std::size_t dst_stride;
  std::size_t n_dst;
  std::size_t length;
  const double* weights;
  std::size_t w_dst_stride;
  std::size_t w_src_stride;
  const std::size_t* offsets;
  std::size_t taps;
};

#if defined(__AVX512F__)
constexpr std::size_t kLanes = 8;
#else
constexpr std::size_t kLanes = 4;
#endif
typedef double Lanes __attribute__((vector_size(kLanes * sizeof(double))));

inline Lanes load_lanes(const double* p) {
  Lanes v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}
inline void store_lanes(double* p, Lanes v) { std::memcpy(p, &v, sizeof(v)); }

template <int B, int T>
void correlate_tile(const double (&w)[4][4], const double* x, const std::size_t* offs,
                    double* const* y, std::size_t n) {
  const double* xs[T];
  for (int t = 0; t < T; ++t) xs[t] = x + offs[t];
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    Lanes v[T];
    for (int t = 0; t < T; ++t) v[t] = load_lanes(xs[t] + i);
    for (int b = 0; b < B; ++b) {
      Lanes acc = w[b][0] * v[0];
      for (int t = 1; t < T; ++t) acc += w[b][t] * v[t];
      store_lanes(y[b] + i, load_lanes(y[b] + i) + acc);
    }
  }
  for (; i < n; ++i) {
    for (int b = 0; b < B; ++b) {
      double acc = w[b][0] * xs[0][i];
      for (int t = 1; t < T; ++t) acc += w[b][t] * xs[t][i];
      y[b][i] += acc;
    }
  }
}

template <int B>
void correlate_taps(const CorrelateArgs& a, std::size_t d0, std::size_t s, std::size_t c0,
                    std::size_t len) {
  double* y[4] = {};
  for (int b = 0; b < B; ++b) y[b] = a.dst + (d0 + static_cast<std::size_t>(b)) * a.dst_stride + c0;
  const double* x = a.src + s * a.src_stride + c0;
  std::size_t t0 = 0;
  while (t0 < a.taps) {
    const std::size_t tn = std::min<std::size_t>(4, a.taps - t0);
    double w[4][4] = {};
    for (int b = 0; b < B; ++b) {
      const double* wr = a.weights + (d0 + static_cast<std::size_t>(b)) * a.w_dst_stride + s * a.w_src_stride + t0;
      for (std::size_t t = 0; t < tn; ++t) w[b][t] = wr[t];
    }
    const std::size_t* offs = a.offsets + t0;
    switch (tn) {
      case 4: correlate_tile<B, 4>(w, x, offs, y, len); break;
      case 3: correlate_tile<B, 3>(w, x, offs, y, len); break;
      case 2: correlate_tile<B, 2>(w, x, offs, y, len); break;
      default: correlate_tile<B, 1>(w, x, offs, y, len); break;
    }
    t0 += tn;
  }
}

void correlate(const CorrelateArgs& a) {
  for (std::size_t d0 = 0; d0 < a.n_dst; d0 += 4) {
    const std::size_t block = std::min<std::size_t>(4, a.n_dst - d0);
    for (std::size_t c0 = 0; c0 < a.length; c0 += kChunk) {
      const std::size_t len = std::min(kChunk, a.length - c0);
      for (std::size_t s = 0; s < a.n_src; ++s) {
        switch (block) {
          case 4: correlate_taps<4>(a, d0, s, c0, len); break;
          case 3: correlate_taps<3>(a, d0, s, c0, len); break;
          case 2: correlate_taps<2>(a, d0, s, c0, len); break;
          default: correlate_taps<1>(a, d0, s, c0, len); break;
        }
      }
    }
  }
}

// dw[b][t] += sum_i g[b][i] * x[i + offs[t]] over a run, four output
// channels and four taps per pass. Reductions use a fixed lane order.
template <int B, int T>
void dot_tile(const double* const* g, const double* x, const std::size_t* offs, double* const* dw,
              std::size_t n) {
  const double* xs[T];
  for (int t = 0; t < T; ++t) xs[t] = x + offs[t];
  Lanes acc[B][T] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    Lanes v[T];
    for (int t = 0; t < T; ++t) v[t] = load_lanes(xs[t] + i);
    for (int b = 0; b < B; ++b) {
      const Lanes gv = load_lanes(g[b] + i);
      for (int t = 0; t < T; ++t) acc[b][t] += gv * v[t];
    }
  }
  for (int b = 0; b < B; ++b) {
    for (int t = 0; t < T; ++t) {
      double s = 0.0;
      for (std::size_t l = 0; l < kLanes; ++l) s += acc[b][t][l];
      for (std::size_t j = i; j < n; ++j) s += g[b][j] * xs[t][j];
      dw[b][t] += s;
    }
  }
}

template <int B>
void dot_taps(const double* const* g, const double* x, const std::size_t* offsets, std::size_t taps,
              double* const* dw, std::size_t n) {
  for (std::size_t t0 = 0; t0 < taps; t0 += 4) {
    const std::size_t tn = std::min<std::size_t>(4, taps - t0);
    double* d[4] = {};
    for (int b = 0; b < B; ++b) d[b] = dw[b] + t0;
    switch (tn) {
      case 4: dot_tile<B, 4>(g, x, offsets + t0, d, n); break;
      case 3: dot_tile<B, 3>(g, x, offsets + t0, d, n); break;
      case 2: dot_tile<B, 2>(g, x, offsets + t0, d, n); break;
      default: dot_tile<B, 1>(g, x, offsets + t0, d, n); break;
    }
  }
}

// [C, spatial] -> [C, padded] with zeros around.
std::vector<double> pad_channels(const ConvPlan& plan, const double* src, std::size_t channels) {
  const std::size_t in_numel = plan.in.numel();
  const std::size_t p_numel = plan.padded.numel();
  std::vector<double> out(channels * p_numel, 0.0);
  const std::size_t rank = plan.in.rank();
  const auto strides = plan.padded.strides();
  std::size_t base = 0;
  for (std::size_t d = 0; d < rank; ++d) base += plan.pads[d] * strides[d];
  const std::size_t row = plan.in[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t r = 0; r < in_numel; r += row) {
    std::size_t off = base;
    for (std::size_t d = 0; d + 1 < rank; ++d) off += idx[d] * strides[d];
    for (std::size_t c = 0; c < channels; ++c) {
      std::copy(src + c * in_numel + r, src + c * in_numel + r + row, out.data() + c * p_numel + off);
    }
    for (std::size_t d = rank - 1; d-- > 0;) {
      if (++idx[d] < plan.in[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

struct LayerDims {
  std::size_t n_in, n_out;
  Shape spatial, kernel;
};

LayerDims layer_dims(const Shape& input, const Shape& filters) {
  if (input.rank() < 2) throw ShapeError("conv layer: input " + input.str() + " needs [N, spatial...]");
  if (filters.rank() != input.rank() + 1) {
    throw ShapeError("conv layer: filters " + filters.str() + " do not match input " + input.str() +
                     " (expected [M, N, kernel...] with " + std::to_string(input.rank() - 1) +
                     " spatial dims)");
  }
  if (filters[1] != input[0]) {
    throw ShapeError("conv layer: filters expect " + std::to_string(filters[1]) +
                     " input channels, input has " + std::to_string(input[0]));
  }
  return {input[0], filters[0], input.drop_front(), filters.drop_front(2)};
}

}  // namespace

Shape conv_output_spatial(const Shape& input_spatial, const Shape& kernel, Padding padding) {
  if (input_spatial.rank() != kernel.rank()) {
    throw ShapeError("convolution: input has " + std::to_string(input_spatial.rank()) +
                     " dims but kernel has " + std::to_string(kernel.rank()));
  }
  const auto pads = padding_for(kernel, padding);
  std::vector<std::size_t> out(kernel.rank());
  for (std::size_t d = 0; d < kernel.rank(); ++d) {
    const std::size_t padded = input_spatial[d] + 2 * pads[d];
    if (kernel[d] > padded) {
      throw ShapeError("convolution: kernel extent " + std::to_string(kernel[d]) +
                       " exceeds input extent " + std::to_string(input_spatial[d]) + " in dim " +
                       std::to_string(d));
    }
    out[d] = padded - kernel[d] + 1;
  }
  return Shape(out);
}

Tensor conv_layer(const Tensor& input, const Tensor& filters, const Tensor* bias, Padding padding) {
  const LayerDims dims = layer_dims(input.shape(), filters.shape());
  if (bias && bias->numel() != dims.n_out) {
    throw ShapeError("conv layer: bias has " + std::to_string(bias->numel()) + " entries, expected " +
                     std::to_string(dims.n_out));
  }
  const ConvPlan plan = make_plan(dims.spatial, dims.kernel, padding);
  const std::vector<double> padded = pad_channels(plan, input.data(), dims.n_in);
  const std::size_t p_numel = plan.padded.numel();
  const std::size_t k_numel = plan.kernel.numel();
  const std::size_t o_numel = plan.out.numel();

  Tensor out(plan.out.prepend(dims.n_out));
  std::vector<double> acc(dims.n_out * plan.span);
  for (std::size_t m = 0; m < dims.n_out; ++m) {
    std::fill_n(acc.data() + m * plan.span, plan.span, bias ? (*bias)[m] : 0.0);
  }
  correlate({padded.data(), p_numel, dims.n_in, acc.data(), plan.span, dims.n_out, plan.span,
             filters.data(), dims.n_in * k_numel, k_numel, plan.tap_offsets.data(), k_numel});
  for (std::size_t m = 0; m < dims.n_out; ++m) {
    const double* src = acc.data() + m * plan.span;
    double* dst = out.data() + m * o_numel;
    for (std::size_t o = 0; o < o_numel; ++o) dst[o] = src[plan.out_offsets[o]];
  }
  return out;
}

Tensor conv_valid(const Tensor& input, const Tensor& kernel) {
  Tensor out = conv_layer(input.reshaped(input.shape().prepend(1)),
                          kernel.reshaped(kernel.shape().prepend(1).prepend(1)), nullptr,
                          Padding::kValid);
  return out.reshaped(out.shape().drop_front());
}

Tensor conv_same(const Tensor& input, const Tensor& kernel) {
  Tensor out = conv_layer(input.reshaped(input.shape().prepend(1)),
                          kernel.reshaped(kernel.shape().prepend(1).prepend(1)), nullptr,
                          Padding::kSame);
  return out.reshaped(out.shape().drop_front());
}

namespace {

// dL/dG scattered into the strided layout, junk entries zero. With a nonzero
// margin each channel gets that many zeros before and after its run.
std::vector<double> strided_grad(const ConvPlan& plan, const Tensor& grad_out, std::size_t n_out,
                                 std::size_t margin = 0) {
  const std::size_t o_numel = plan.out.numel();
  if (grad_out.numel() != n_out * o_numel) {
    throw ShapeError("conv layer backward: gradient shape " + grad_out.shape().str() +
                     " does not match output " + plan.out.prepend(n_out).str());
  }
  const std::size_t stride = plan.span + 2 * margin;
  std::vector<double> g(n_out * stride, 0.0);
  for (std::size_t m = 0; m < n_out; ++m)
    for (std::size_t o = 0; o < o_numel; ++o)
      g[m * stride + margin + plan.out_offsets[o]] = grad_out[m * o_numel + o];
  return g;
}

}  // namespace

Tensor conv_layer_grad_input(const Tensor& grad_out, const Tensor& filters, const Shape& input_shape,
                             Padding padding) {
  const LayerDims dims = layer_dims(input_shape, filters.shape());
  const ConvPlan plan = make_plan(dims.spatial, dims.kernel, padding);
  const std::size_t p_numel = plan.padded.numel();
  const std::size_t k_numel = plan.kernel.numel();
  // The adjoint is a correlation of the zero-extended output gradient with
  // the flipped taps: padded_grad[j] += sum_t w[t] * g[j - off[t]].
  const std::size_t max_off = plan.tap_offsets.back();
  const std::vector<double> g = strided_grad(plan, grad_out, dims.n_out, max_off);
  std::vector<std::size_t> flipped(k_numel);
  for (std::size_t t = 0; t < k_numel; ++t) flipped[t] = max_off - plan.tap_offsets[t];

  std::vector<double> padded_grad(dims.n_in * p_numel, 0.0);
  correlate({g.data(), p_numel + max_off, dims.n_out, padded_grad.data(), p_numel, dims.n_in, p_numel,
             filters.data(), k_numel, dims.n_in * k_numel, flipped.data(), k_numel});

  Tensor grad_in(input_shape);
  const std::size_t rank = plan.in.rank();
  const auto pstrides = plan.padded.strides();
  for (std::size_t n = 0; n < dims.n_in; ++n) {
    // Crop the padding back off.
    const double* src = padded_grad.data() + n * p_numel;
    double* dst = grad_in.data() + n * plan.in.numel();
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t i = 0; i < plan.in.numel(); ++i) {
      std::size_t off = 0;
      for (std::size_t d = 0; d < rank; ++d) off += (idx[d] + plan.pads[d]) * pstrides[d];
      dst[i] = src[off];
      for (std::size_t d = rank; d-- > 0;) {
        if (++idx[d] < plan.in[d]) break;
        idx[d] = 0;
      }
    }
  }
  return grad_in;
}

Tensor conv_layer_grad_filters(const Tensor& grad_out, const Tensor& input, const Shape& filter_shape,
                               Padding padding) {
  const LayerDims dims = layer_dims(input.shape(), filter_shape);
  const ConvPlan plan = make_plan(dims.spatial, dims.kernel, padding);
  const std::vector<double> g = strided_grad(plan, grad_out, dims.n_out);
  const std::vector<double> padded = pad_channels(plan, input.data(), dims.n_in);
  const std::size_t p_numel = plan.padded.numel();
  const std::size_t k_numel = plan.kernel.numel();

  Tensor grad_filters(filter_shape);
  for (std::size_t m0 = 0; m0 < dims.n_out; m0 += 4) {
    const std::size_t block = std::min<std::size_t>(4, dims.n_out - m0);
    for (std::size_t c0 = 0; c0 < plan.span; c0 += kChunk) {
      const std::size_t len = std::min(kChunk, plan.span - c0);
      const double* gm[4] = {};
      for (std::size_t b = 0; b < block; ++b) gm[b] = g.data() + (m0 + b) * plan.span + c0;
      for (std::size_t n = 0; n < dims.n_in; ++n) {
        const double* x = padded.data() + n * p_numel + c0;
        double* dw[4] = {};
        for (std::size_t b = 0; b < block; ++b) {
          dw[b] = grad_filters.data() + ((m0 + b) * dims.n_in + n) * k_numel;
        }
        const std::size_t* offs = plan.tap_offsets.data();
        switch (block) {
          case 4: dot_taps<4>(gm, x, offs, k_numel, dw, len); break;
          case 3: dot_taps<3>(gm, x, offs, k_numel, dw, len); break;
          case 2: dot_taps<2>(gm, x, offs, k_numel, dw, len); break;
          default: dot_taps<1>(gm, x, offs, k_numel, dw, len); break;
        }
      }
    }
  }
  return grad_filters;
}

// ---------------------------------------------------------------------------
// Dump format

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  out.write(b, 4);
}

void put_f64(std::ostream& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xFFu);
  out.write(b, 8);
}

std::uint64_t get_le(std::istream& in, int bytes) {
  unsigned char b[8] = {};
  in.read(reinterpret_cast<char*>(b), bytes);
  if (!in) throw FormatError("tensor dump: unexpected end of stream");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape().dims()) put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : t.values()) put_f64(out, v);
}

Tensor read_tensor(std::istream& in) {
  const auto rank = static_cast<std::size_t>(get_le(in, 4));
  if (rank == 0 || rank > 16) throw FormatError("tensor dump: implausible rank " + std::to_string(rank));
  std::vector<std::size_t> dims(rank);
  for (auto& d : dims) {
    d = static_cast<std::size_t>(get_le(in, 4));
    if (d == 0) throw FormatError("tensor dump: zero extent");
  }
  Shape shape(dims);
  std::vector<double> data(shape.numel());
  for (auto& v : data) v = std::bit_cast<double>(get_le(in, 8));
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return read_tensor(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace fsnet
