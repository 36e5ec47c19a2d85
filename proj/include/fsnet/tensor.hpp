#pragma once

// Dense row-major N-dimensional tensors of doubles and the numeric kernels the
// rest of the library is built on.
//
// NOTE: every "convolution" in this library is a cross-correlation,
//   out[x] = sum_u in[x + u] * kernel[u]
// with no kernel flip. Learned filters absorb the flip, so this is the usual
// CNN convention.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace fsnet {

class Shape {
 public:
  Shape() : dims_{1} {}
  explicit Shape(std::vector<std::size_t> dims);
  Shape(std::initializer_list<std::size_t> dims)
      : Shape(std::vector<std::size_t>(dims)) {}

  std::size_t rank() const { return dims_.size(); }
  std::size_t operator[](std::size_t i) const { return dims_[i]; }
  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t numel() const;

  // Row-major strides, last dimension contiguous.
  std::vector<std::size_t> strides() const;

  // Shape without the first `n` dims (e.g. spatial part of [C, ...]).
  Shape drop_front(std::size_t n = 1) const;
  // Shape with `extent` prepended.
  Shape prepend(std::size_t extent) const;

  std::string str() const;

  bool operator==(const Shape&) const = default;

 private:
  std::vector<std::size_t> dims_;
};

class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  // 1-D tensor from literal values.
  static Tensor vector(std::initializer_list<double> values);
  // 2-D tensor from nested literal rows.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.rank(); }
  std::size_t numel() const { return data_.size(); }

  std::span<const double> values() const { return data_; }
  std::span<double> values() { return data_; }
  const double* data() const { return data_.data(); }
  double* data() { return data_.data(); }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  // Multi-index access.
  double at(std::initializer_list<std::size_t> index) const;
  double& at(std::initializer_list<std::size_t> index);

  // Same data, new shape of equal element count.
  Tensor reshaped(Shape shape) const;

  double item() const;
  bool all_finite() const;

  bool operator==(const Tensor&) const = default;

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Elementwise and reductions

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
double sum(const Tensor& a);
double dot(const Tensor& a, const Tensor& b);
double squared_norm(const Tensor& a);

// In-place y += s * x.
void axpy(double s, const Tensor& x, Tensor& y);

// Dense matrix product of [m, k] by [k, n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Concatenate / split along the first dimension.
Tensor concat_front(const Tensor& a, const Tensor& b);
std::pair<Tensor, Tensor> split_front(const Tensor& t, std::size_t first);

// Nearest-neighbour upsampling; factors.size() == rank. Each element is
// repeated factors[d] times along dimension d.
Tensor upsample_nearest(const Tensor& x, const std::vector<std::size_t>& factors);
Tensor upsample_nearest(const Tensor& x, std::size_t factor);
// Adjoint of upsample_nearest: sums each block.
Tensor upsample_nearest_backward(const Tensor& grad, const std::vector<std::size_t>& factors);

// Zero padding by pads[d] on both sides of every dimension.
Tensor zero_pad(const Tensor& x, const std::vector<std::size_t>& pads);

// ---------------------------------------------------------------------------
// Pooling

struct PoolResult {
  Tensor values;
  // Flat input index of the max for every output element.
  std::vector<std::size_t> argmax;
};

// Non-overlapping max pooling; window.size() == rank, extents divisible.
PoolResult max_pool(const Tensor& input, const std::vector<std::size_t>& window);
// Routes each output gradient to its recorded argmax.
Tensor max_pool_backward(const Tensor& grad, const std::vector<std::size_t>& argmax,
                         const Shape& input_shape);

// ---------------------------------------------------------------------------
// Convolution (cross-correlation)

// Unpadded: out extent = in - k + 1 in every dim.
Tensor conv_valid(const Tensor& input, const Tensor& kernel);
// Zero-padded by (k - 1) / 2 per side; odd kernels only. Output shape = input.
Tensor conv_same(const Tensor& input, const Tensor& kernel);

enum class Padding { kValid, kSame };

// Multi-channel layer convolution.
//   input   [N, s_1..s_D]
//   filters [M, N, k_1..k_D]
//   bias    [M] (may be empty for no bias)
//   output  [M, o_1..o_D],  G_i = sum_j F_j * v_ij + b_i
Tensor conv_layer(const Tensor& input, const Tensor& filters, const Tensor* bias,
                  Padding padding);
// Gradient w.r.t. the input given dL/dG.
Tensor conv_layer_grad_input(const Tensor& grad_out, const Tensor& filters,
                             const Shape& input_shape, Padding padding);
// Gradient w.r.t. the filters given dL/dG.
Tensor conv_layer_grad_filters(const Tensor& grad_out, const Tensor& input,
                               const Shape& filter_shape, Padding padding);

// Output spatial shape of a conv layer; throws ShapeError / UnsupportedError.
Shape conv_output_spatial(const Shape& input_spatial, const Shape& kernel, Padding padding);

// ---------------------------------------------------------------------------
// Tensor dump format: little-endian u32 rank, u32 extents, f64 data.

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace fsnet
