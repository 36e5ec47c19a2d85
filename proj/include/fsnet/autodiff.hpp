#pragma once

// Define-by-run reverse-mode automatic differentiation over tensor-core ops.
//
// A Tape records every primitive op executed through the functions in
// namespace fsnet::ad. Tape::backward walks the record once in reverse and
// accumulates dL/dθ into every Parameter that took part.

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "fsnet/tensor.hpp"

namespace fsnet {

// What a trainable tensor is used for; the optimizer and regularizers key
// off this (e.g. unit-norm projection only touches seed banks).
enum class ParamRole { kFilters, kSeeds, kMixing, kBias, kDenseWeight };

const char* to_string(ParamRole role);

struct Parameter {
  Parameter(std::string name, ParamRole role, Tensor value);

  std::string name;
  ParamRole role;
  Tensor value;
  Tensor grad;  // same shape as value

  void zero_grad();
};

using ParameterPtr = std::shared_ptr<Parameter>;

void zero_grads(const std::vector<ParameterPtr>& params);

class Tape;

// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape* tape() const { return tape_; }
  std::size_t index() const { return index_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

class Tape {
 public:
  // Called with the gradient flowing into the op's output and the output
  // value itself.
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out, const Tensor& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var parameter(const ParameterPtr& p);

  // Records a primitive. `backward` may be empty for ops that need no
  // gradient (then the node is treated as a constant).
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward);

  const Tensor& value(const Var& v) const;
  bool requires_grad(const Var& v) const;

  // Adds `g` into the gradient of `v` (no-op for constants).
  void accumulate(const Var& v, const Tensor& g);

  // Seeds dL/d(output) and propagates to every Parameter. Node gradients are
  // reset at the start, Parameter::grad keeps accumulating.
  void backward(const Var& output, const Tensor& seed);
  // Scalar output, seed 1.
  void backward(const Var& output);

  // Gradient reaching `v` during the last backward pass (zero if none).
  Tensor grad(const Var& v) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var check(const Var& v) const;

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable ops

namespace ad {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
// Elementwise product with a constant tensor (dropout masks, fixed weights).
Var mul_const(const Var& a, const Tensor& c);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var sum(const Var& a);                  // -> [1]
Var mean(const Var& a);                 // -> [1]
Var dot(const Var& a, const Var& b);    // -> [1]
Var matmul(const Var& a, const Var& b);
Var reshape(const Var& a, const Shape& shape);
Var concat_front(const Var& a, const Var& b);
Var add_scalar(const Var& a, double s);

// Sum of |a|, subgradient sign(a) with 0 at 0.
Var abs_sum(const Var& a);

// Multi-channel layer convolution, see fsnet::conv_layer.
Var conv(const Var& input, const Var& filters, const Var& bias, Padding padding);
Var conv(const Var& input, const Var& filters, Padding padding);

// Pools / upsamples every spatial dim of a [C, spatial...] tensor.
Var max_pool(const Var& input, std::size_t window);
Var upsample_nearest(const Var& input, std::size_t factor);
// [C, spatial...] -> [C]
Var global_avg_pool(const Var& input);

}  // namespace ad

// ---------------------------------------------------------------------------
// Gradient checking

// Builds a scalar loss on the given tape from the current parameter values.
using LossProgram = std::function<Var(Tape&)>;

struct GradCheckOptions {
  double tolerance = 1e-4;
  // Above this many coordinates in total, each tensor checks a seeded random
  // subset of at most ceil(max_coords / tensors) coordinates.
  std::size_t max_coords = 10000;
  std::uint64_t seed = 0;
};

struct GradCheckRow {
  std::string param_id;
  std::size_t coord;
  double analytic;
  double numeric;
  double rel_err;
};

struct GradCheckParamSummary {
  std::string param_id;
  std::size_t coords_checked;
  double max_rel_err;
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;
  std::vector<GradCheckParamSummary> per_param;
  double max_rel_err = 0.0;
  bool passed = false;

  // CSV: param_id,coord,analytic,numeric,rel_err
  void write_csv(std::ostream& out, bool header = true) const;
};

// |a - n| / (|a| + |n| + 1e-12)
double gradient_rel_error(double analytic, double numeric);

// Compares tape gradients with central differences, step
// h = 1e-5 * max(1, |θ_i|). Throws ContractError when the program's output is
// not a scalar. Parameter values are restored afterwards; their grads are
// left zeroed.
GradCheckReport grad_check(const LossProgram& program, const std::vector<ParameterPtr>& params,
                           const GradCheckOptions& options = {});

}  // namespace fsnet
