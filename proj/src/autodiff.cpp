#include "fsnet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "fsnet/error.hpp"

namespace fsnet {

const char* to_string(ParamRole role) {
  switch (role) {
    case ParamRole::kFilters: return "filters";
    case ParamRole::kSeeds: return "seeds";
    case ParamRole::kMixing: return "alpha";
    case ParamRole::kBias: return "bias";
    case ParamRole::kDenseWeight: return "weight";
  }
  return "?";
}

Parameter::Parameter(std::string name_, ParamRole role_, Tensor value_)
    : name(std::move(name_)), role(role_), value(std::move(value_)), grad(value.shape()) {}

void Parameter::zero_grad() { std::fill(grad.values().begin(), grad.values().end(), 0.0); }

void zero_grads(const std::vector<ParameterPtr>& params) {
  for (const auto& p : params) p->zero_grad();
}

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->value(*this);
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::check(const Var& v) const {
  if (v.tape_ != this || v.index_ >= nodes_.size()) {
    throw ContractError("Var does not belong to this tape");
  }
  return v;
}

Var Tape::constant(Tensor value) {
  nodes_.push_back({std::move(value), Tensor(), false, false, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const ParameterPtr& p) {
  if (!p) throw ContractError("null parameter");
  Node node{p->value, Tensor(), false, true, {}};
  node.backward = [p](Tape&, const Tensor& g, const Tensor&) {
    axpy(1.0, g, p->grad);
  };
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
  bool needs = false;
  for (const Var& in : inputs) needs = needs || nodes_[check(in).index_].requires_grad;
  needs = needs && static_cast<bool>(backward);
  nodes_.push_back({std::move(value), Tensor(), false, needs, needs ? std::move(backward) : BackwardFn{}});
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(const Var& v) const { return nodes_[check(v).index_].value; }

bool Tape::requires_grad(const Var& v) const { return nodes_[check(v).index_].requires_grad; }

void Tape::accumulate(const Var& v, const Tensor& g) {
  Node& node = nodes_[check(v).index_];
  if (!node.requires_grad) return;
  if (g.shape() != node.value.shape()) {
    throw ShapeError("gradient shape " + g.shape().str() + " does not match value " +
                     node.value.shape().str());
  }
  if (!node.has_grad) {
    node.grad = g;
    node.has_grad = true;
  } else {
    axpy(1.0, g, node.grad);
  }
}

void Tape::backward(const Var& output, const Tensor& seed) {
  const std::size_t out = check(output).index_;
  if (seed.shape() != nodes_[out].value.shape()) {
    throw ShapeError("backward seed shape " + seed.shape().str() + " does not match output " +
                     nodes_[out].value.shape().str());
  }
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  if (!nodes_[out].requires_grad) return;
  nodes_[out].grad = seed;
  nodes_[out].has_grad = true;
  for (std::size_t i = out + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.has_grad && node.backward) node.backward(*this, node.grad, node.value);
  }
}

void Tape::backward(const Var& output) {
  const Tensor& v = value(output);
  if (v.numel() != 1) {
    throw ContractError("backward without seed needs a scalar output, got " + v.shape().str());
  }
  backward(output, Tensor(v.shape(), 1.0));
}

Tensor Tape::grad(const Var& v) const {
  const Node& node = nodes_[check(v).index_];
  return node.has_grad ? node.grad : Tensor(node.value.shape());
}

// ---------------------------------------------------------------------------
// Ops

namespace ad {

namespace {

Tape& tape_of(const Var& a) {
  if (!a.tape()) throw ContractError("op on an unbound Var");
  return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw ContractError("op mixes Vars from different tapes");
  return tape_of(a);
}

std::vector<std::size_t> spatial_window(const Shape& s, std::size_t w) {
  std::vector<std::size_t> window(s.rank(), w);
  window[0] = 1;
  return window;
}

}  // namespace

Var add(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  return t.record(fsnet::add(a.value(), b.value()), {a, b}, [a, b](Tape& tp, const Tensor& g, const Tensor&) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  return t.record(fsnet::sub(a.value(), b.value()), {a, b}, [a, b](Tape& tp, const Tensor& g, const Tensor&) {
    tp.accumulate(a, g);
    if (tp.requires_grad(b)) tp.accumulate(b, fsnet::scale(g, -1.0));
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  return t.record(fsnet::mul(a.value(), b.value()), {a, b}, [a, b](Tape& tp, const Tensor& g, const Tensor&) {
    if (tp.requires_grad(a)) tp.accumulate(a, fsnet::mul(g, b.value()));
    if (tp.requires_grad(b)) tp.accumulate(b, fsnet::mul(g, a.value()));
  });
}

Var scale(const Var& a, double s) {
  return tape_of(a).record(fsnet::scale(a.value(), s), {a}, [a, s](Tape& tp, const Tensor& g, const Tensor&) {
    tp.accumulate(a, fsnet::scale(g, s));
  });
}

Var mul_const(const Var& a, const Tensor& c) {
  return tape_of(a).record(fsnet::mul(a.value(), c), {a}, [a, c](Tape& tp, const Tensor& g, const Tensor&) {
    tp.accumulate(a, fsnet::mul(g, c));
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v += s;
  return tape_of(a).record(std::move(out), {a}, [a](Tape& tp, const Tensor& g, const Tensor&) {
    tp.accumulate(a, g);
  });
}

Var relu(const Var& a) {
  return tape_of(a).record(fsnet::relu(a.value()), {a}, [a](Tape& tp, const Tensor& g, const Tensor& out) {
    Tensor d = g;
    for (std::size_t i = 0; i < d.numel(); ++i)
      if (!(out[i] > 0.0)) d[i] = 0.0;
    tp.accumulate(a, d);
  });
}

Var sigmoid(const Var& a) {
  return tape_of(a).record(fsnet::sigmoid(a.value()), {a}, [a](Tape& tp, const Tensor& g, const Tensor& out) {
    Tensor d = g;
    for (std::size_t i = 0; i < d.numel(); ++i) d[i] *= out[i] * (1.0 - out[i]);
    tp.accumulate(a, d);
  });
}

Var sum(const Var& a) {
  return tape_of(a).record(Tensor::scalar(fsnet::sum(a.value())), {a},
                           [a](Tape& tp, const Tensor& g, const Tensor&) {
                             tp.accumulate(a, Tensor(a.shape(), g[0]));
                           });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().numel());
  return tape_of(a).record(Tensor::scalar(fsnet::sum(a.value()) / n), {a},
                           [a, n](Tape& tp, const Tensor& g, const Tensor&) {
                             tp.accumulate(a, Tensor(a.shape(), g[0] / n));
                           });
}

Var dot(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  return t.record(Tensor::scalar(fsnet::dot(a.value(), b.value())), {a, b},
                  [a, b](Tape& tp, const Tensor& g, const Tensor&) {
                    if (tp.requires_grad(a)) tp.accumulate(a, fsnet::scale(b.value(), g[0]));
                    if (tp.requires_grad(b)) tp.accumulate(b, fsnet::scale(a.value(), g[0]));
                  });
}

Var matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  return t.record(fsnet::matmul(a.value(), b.value()), {a, b}, [a, b](Tape& tp, const Tensor& g, const Tensor&) {
    if (tp.requires_grad(a)) tp.accumulate(a, fsnet::matmul(g, transpose(b.value())));
    if (tp.requires_grad(b)) tp.accumulate(b, fsnet::matmul(transpose(a.value()), g));
  });
}

Var reshape(const Var& a, const Shape& shape) {
  const Shape original = a.shape();
  return tape_of(a).record(a.value().reshaped(shape), {a}, [a, original](Tape& tp, const Tensor& g, const Tensor&) {
    tp.accumulate(a, g.reshaped(original));
  });
}

Var concat_front(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  const std::size_t first = a.shape()[0];
  return t.record(fsnet::concat_front(a.value(), b.value()), {a, b},
                  [a, b, first](Tape& tp, const Tensor& g, const Tensor&) {
                    auto [ga, gb] = split_front(g, first);
                    tp.accumulate(a, ga);
                    tp.accumulate(b, gb);
                  });
}

Var abs_sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += std::abs(v);
  return tape_of(a).record(Tensor::scalar(s), {a}, [a](Tape& tp, const Tensor& g, const Tensor&) {
    Tensor d(a.shape());
    const Tensor& x = a.value();
    for (std::size_t i = 0; i < d.numel(); ++i) d[i] = x[i] > 0.0 ? g[0] : (x[i] < 0.0 ? -g[0] : 0.0);
    tp.accumulate(a, d);
  });
}

Var conv(const Var& input, const Var& filters, const Var& bias, Padding padding) {
  Tape& t = tape_of(input, filters);
  tape_of(input, bias);
  Tensor out = conv_layer(input.value(), filters.value(), &bias.value(), padding);
  return t.record(std::move(out), {input, filters, bias},
                  [input, filters, bias, padding](Tape& tp, const Tensor& g, const Tensor&) {
                    if (tp.requires_grad(input)) {
                      tp.accumulate(input, conv_layer_grad_input(g, filters.value(), input.shape(), padding));
                    }
                    if (tp.requires_grad(filters)) {
                      tp.accumulate(filters, conv_layer_grad_filters(g, input.value(), filters.shape(), padding));
                    }
                    if (tp.requires_grad(bias)) {
                      const std::size_t m = g.shape()[0];
                      const std::size_t per = g.numel() / m;
                      Tensor gb(bias.shape());
                      for (std::size_t i = 0; i < m; ++i) {
                        double s = 0.0;
                        for (std::size_t k = 0; k < per; ++k) s += g[i * per + k];
                        gb[i] = s;
                      }
                      tp.accumulate(bias, gb);
                    }
                  });
}

Var conv(const Var& input, const Var& filters, Padding padding) {
  Tape& t = tape_of(input, filters);
  Tensor out = conv_layer(input.value(), filters.value(), nullptr, padding);
  return t.record(std::move(out), {input, filters}, [input, filters, padding](Tape& tp, const Tensor& g, const Tensor&) {
    if (tp.requires_grad(input)) {
      tp.accumulate(input, conv_layer_grad_input(g, filters.value(), input.shape(), padding));
    }
    if (tp.requires_grad(filters)) {
      tp.accumulate(filters, conv_layer_grad_filters(g, input.value(), filters.shape(), padding));
    }
  });
}

Var max_pool(const Var& input, std::size_t window) {
  PoolResult pooled = fsnet::max_pool(input.value(), spatial_window(input.shape(), window));
  const Shape in_shape = input.shape();
  auto argmax = std::make_shared<std::vector<std::size_t>>(std::move(pooled.argmax));
  return tape_of(input).record(std::move(pooled.values), {input},
                               [input, in_shape, argmax](Tape& tp, const Tensor& g, const Tensor&) {
                                 tp.accumulate(input, max_pool_backward(g, *argmax, in_shape));
                               });
}

Var upsample_nearest(const Var& input, std::size_t factor) {
  const auto factors = spatial_window(input.shape(), factor);
  return tape_of(input).record(fsnet::upsample_nearest(input.value(), factors), {input},
                               [input, factors](Tape& tp, const Tensor& g, const Tensor&) {
                                 tp.accumulate(input, upsample_nearest_backward(g, factors));
                               });
}

Var global_avg_pool(const Var& input) {
  const Tensor& x = input.value();
  if (x.rank() < 2) throw ShapeError("global_avg_pool: expected [C, spatial...], got " + x.shape().str());
  const std::size_t c = x.shape()[0];
  const std::size_t per = x.numel() / c;
  Tensor out(Shape{c});
  for (std::size_t i = 0; i < c; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < per; ++k) s += x[i * per + k];
    out[i] = s / static_cast<double>(per);
  }
  return tape_of(input).record(std::move(out), {input}, [input, c, per](Tape& tp, const Tensor& g, const Tensor&) {
    Tensor d(input.shape());
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t k = 0; k < per; ++k) d[i * per + k] = g[i] / static_cast<double>(per);
    tp.accumulate(input, d);
  });
}

}  // namespace ad

// ---------------------------------------------------------------------------
// Gradient checking

double gradient_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
}

void GradCheckReport::write_csv(std::ostream& out, bool header) const {
  if (header) out << "param_id,coord,analytic,numeric,rel_err\n";
  const auto old_precision = out.precision(17);
  for (const auto& r : rows) {
    out << r.param_id << ',' << r.coord << ',' << r.analytic << ',' << r.numeric << ',' << r.rel_err << '\n';
  }
  out.precision(old_precision);
}

namespace {

double evaluate_scalar(const LossProgram& program) {
  Tape tape;
  const Var out = program(tape);
  if (out.value().numel() != 1) {
    throw ContractError("grad_check: program output must be scalar, got " + out.shape().str());
  }
  return out.value()[0];
}

}  // namespace

GradCheckReport grad_check(const LossProgram& program, const std::vector<ParameterPtr>& params,
                           const GradCheckOptions& options) {
  zero_grads(params);
  {
    Tape tape;
    const Var out = program(tape);
    if (out.value().numel() != 1) {
      throw ContractError("grad_check: program output must be scalar, got " + out.shape().str());
    }
    tape.backward(out);
  }
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p->grad);
  zero_grads(params);

  // Every coordinate, or above max_coords an equal seeded share per tensor so
  // small tensors (biases) are never skipped.
  std::size_t total = 0;
  for (const auto& p : params) total += p->value.numel();
  std::vector<std::vector<std::size_t>> coords(params.size());
  std::mt19937_64 rng(options.seed);
  const std::size_t quota = params.empty() ? 0 : (options.max_coords + params.size() - 1) / params.size();
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& c = coords[k];
    c.resize(params[k]->value.numel());
    std::iota(c.begin(), c.end(), std::size_t{0});
    if (total > options.max_coords && c.size() > quota) {
      std::shuffle(c.begin(), c.end(), rng);
      c.resize(quota);
      std::sort(c.begin(), c.end());
    }
  }

  GradCheckReport report;
  for (const auto& p : params) report.per_param.push_back({p->name, 0, 0.0});
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    for (std::size_t i : coords[k]) {
      const double original = p.value[i];
      const double h = 1e-5 * std::max(1.0, std::abs(original));
      p.value[i] = original + h;
      const double plus = evaluate_scalar(program);
      p.value[i] = original - h;
      const double minus = evaluate_scalar(program);
      p.value[i] = original;
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic[k][i];
      const double err = gradient_rel_error(a, numeric);
      report.rows.push_back({p.name, i, a, numeric, err});
      auto& summary = report.per_param[k];
      ++summary.coords_checked;
      summary.max_rel_err = std::max(summary.max_rel_err, err);
      report.max_rel_err = std::max(report.max_rel_err, err);
    }
  }
  report.passed = report.max_rel_err < options.tolerance;
  return report;
}

}  // namespace fsnet
