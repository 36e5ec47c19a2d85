#include "fsnet/shared_conv.hpp"

#include <cmath>
#include <fstream>

#include "fsnet/error.hpp"

namespace fsnet {

std::size_t ConvLayerSpec::filter_size() const {
  std::size_t s = 1;
  for (std::size_t k : kernel) s *= k;
  return s;
}

Shape ConvLayerSpec::filter_shape() const { return kernel_shape().prepend(in_channels).prepend(out_channels); }

void ConvLayerSpec::validate() const {
  if (in_channels == 0 || out_channels == 0) throw ConfigError("conv layer: channel counts must be >= 1");
  if (kernel.empty()) throw ConfigError("conv layer: kernel needs at least one dimension");
  for (std::size_t k : kernel)
    if (k == 0) throw ConfigError("conv layer: kernel extents must be >= 1");
}

void to_json(nlohmann::json& j, const ConvLayerSpec& spec) {
  j = nlohmann::json{{"in_channels", spec.in_channels},
                     {"out_channels", spec.out_channels},
                     {"kernel", spec.kernel},
                     {"P", spec.shared_p},
                     {"padding", spec.padding == Padding::kSame ? "same" : "valid"}};
}

void from_json(const nlohmann::json& j, ConvLayerSpec& spec) {
  spec.in_channels = j.at("in_channels").get<std::size_t>();
  spec.out_channels = j.at("out_channels").get<std::size_t>();
  spec.kernel = j.at("kernel").get<std::vector<std::size_t>>();
  spec.shared_p = j.at("P").get<std::size_t>();
  const auto padding = j.at("padding").get<std::string>();
  if (padding != "same" && padding != "valid") throw ConfigError("conv layer: unknown padding " + padding);
  spec.padding = padding == "same" ? Padding::kSame : Padding::kValid;
}

Tensor FilterBank::seed(std::size_t p) const {
  const Shape k = kernel();
  const auto begin = seeds.values().begin() + static_cast<std::ptrdiff_t>(p * k.numel());
  return Tensor(k, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(k.numel())));
}

ParamCount param_count(const ConvLayerSpec& spec) {
  const std::size_t mn = spec.out_channels * spec.in_channels;
  const std::size_t s = spec.filter_size();
  if (spec.shared()) return {mn * spec.shared_p + spec.shared_p * s, spec.out_channels};
  return {mn * s, spec.out_channels};
}

std::size_t sharing_breakeven(std::size_t out_channels, std::size_t in_channels, std::size_t filter_size) {
  const std::size_t mn = out_channels * in_channels;
  // P (MN + S) < MN S  <=>  P <= (MN S - 1) / (MN + S)
  return (mn * filter_size - 1) / (mn + filter_size);
}

std::size_t sharing_breakeven(const ConvLayerSpec& spec) {
  return sharing_breakeven(spec.out_channels, spec.in_channels, spec.filter_size());
}

namespace {

void check_expansion_shapes(const Shape& seeds, const Shape& alpha) {
  if (alpha.rank() != 3) throw ShapeError("mixing coefficients must be [M, N, P], got " + alpha.str());
  if (seeds.rank() < 2) throw ShapeError("filter bank must be [P, kernel...], got " + seeds.str());
  if (seeds[0] != alpha[2]) {
    throw ShapeError("filter bank has P=" + std::to_string(seeds[0]) + " seeds but coefficients have P=" +
                     std::to_string(alpha[2]));
  }
}

}  // namespace

// Both overloads go through the same matmul so tape and plain results agree
// bitwise.
Tensor expand_filters(const FilterBank& bank, const MixingCoefficients& alpha) {
  check_expansion_shapes(bank.seeds.shape(), alpha.alpha.shape());
  const std::size_t m = alpha.out_channels(), n = alpha.in_channels(), p = alpha.count();
  const Shape kernel = bank.kernel();
  const Tensor a = alpha.alpha.reshaped(Shape{m * n, p});
  const Tensor v = bank.seeds.reshaped(Shape{p, kernel.numel()});
  return matmul(a, v).reshaped(kernel.prepend(n).prepend(m));
}

Var expand_filters(const Var& seeds, const Var& alpha) {
  check_expansion_shapes(seeds.shape(), alpha.shape());
  const std::size_t m = alpha.shape()[0], n = alpha.shape()[1], p = alpha.shape()[2];
  const Shape kernel = seeds.shape().drop_front();
  const Var a = ad::reshape(alpha, Shape{m * n, p});
  const Var v = ad::reshape(seeds, Shape{p, kernel.numel()});
  return ad::reshape(ad::matmul(a, v), kernel.prepend(n).prepend(m));
}

namespace {

void check_layer_shapes(const ConvLayerSpec& spec, const Shape& filters, const Shape& bias, const Shape& input) {
  if (filters != spec.filter_shape()) {
    throw ShapeError("layer filters " + filters.str() + " do not match spec " + spec.filter_shape().str());
  }
  if (bias != Shape{spec.out_channels}) {
    throw ShapeError("layer bias " + bias.str() + " does not match M=" + std::to_string(spec.out_channels));
  }
  if (input.rank() != spec.spatial_dims() + 1 || input[0] != spec.in_channels) {
    throw ShapeError("layer input " + input.str() + " does not match N=" + std::to_string(spec.in_channels) +
                     " with " + std::to_string(spec.spatial_dims()) + " spatial dims");
  }
}

}  // namespace

Tensor layer_forward(const ConvLayerSpec& spec, const Tensor& filters, const Tensor& bias, const Tensor& input) {
  check_layer_shapes(spec, filters.shape(), bias.shape(), input.shape());
  return conv_layer(input, filters, &bias, spec.padding);
}

Var layer_forward(const ConvLayerSpec& spec, const Var& filters, const Var& bias, const Var& input) {
  check_layer_shapes(spec, filters.shape(), bias.shape(), input.shape());
  return ad::conv(input, filters, bias, spec.padding);
}

Var shared_layer_forward(const ConvLayerSpec& spec, const Var& seeds, const Var& alpha, const Var& bias,
                         const Var& input) {
  if (!spec.shared()) throw ConfigError("shared_layer_forward on a layer without sharing");
  if (seeds.shape()[0] != spec.shared_p) {
    throw ShapeError("filter bank has " + std::to_string(seeds.shape()[0]) + " seeds, spec says P=" +
                     std::to_string(spec.shared_p));
  }
  return layer_forward(spec, expand_filters(seeds, alpha), bias, input);
}

// ---------------------------------------------------------------------------
// ConvLayer

ConvLayer ConvLayer::create(const ConvLayerSpec& spec, const std::string& name, std::mt19937_64& rng) {
  spec.validate();
  ConvLayer layer;
  layer.spec_ = spec;
  layer.name_ = name;
  const double s = static_cast<double>(spec.filter_size());
  const double fan = static_cast<double>(spec.in_channels + spec.out_channels);
  const double limit = std::sqrt(6.0 / (s * fan));
  std::uniform_real_distribution<double> uniform(-limit, limit);

  if (spec.shared()) {
    Tensor seeds(spec.kernel_shape().prepend(spec.shared_p));
    for (double& v : seeds.values()) v = uniform(rng);
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(spec.shared_p)));
    Tensor alpha(Shape{spec.out_channels, spec.in_channels, spec.shared_p});
    for (double& v : alpha.values()) v = normal(rng);
    layer.seeds_ = std::make_shared<Parameter>(name + ".seeds", ParamRole::kSeeds, std::move(seeds));
    layer.alpha_ = std::make_shared<Parameter>(name + ".alpha", ParamRole::kMixing, std::move(alpha));
  } else {
    Tensor filters(spec.filter_shape());
    for (double& v : filters.values()) v = uniform(rng);
    layer.filters_ = std::make_shared<Parameter>(name + ".filters", ParamRole::kFilters, std::move(filters));
  }
  layer.bias_ = std::make_shared<Parameter>(name + ".bias", ParamRole::kBias, Tensor(Shape{spec.out_channels}));
  return layer;
}

Var ConvLayer::forward(Tape& tape, const Var& input) const {
  const Var bias = tape.parameter(bias_);
  if (spec_.shared()) {
    return shared_layer_forward(spec_, tape.parameter(seeds_), tape.parameter(alpha_), bias, input);
  }
  return layer_forward(spec_, tape.parameter(filters_), bias, input);
}

Tensor ConvLayer::effective_filters() const {
  if (spec_.shared()) return expand_filters(FilterBank{seeds_->value}, MixingCoefficients{alpha_->value});
  return filters_->value;
}

void ConvLayer::set_filters(const Tensor& filters) {
  ConvLayerSpec unshared = spec_;
  unshared.shared_p = 0;
  if (filters.shape() != unshared.filter_shape()) {
    throw ShapeError("set_filters: " + filters.shape().str() + " does not match " + unshared.filter_shape().str());
  }
  spec_ = unshared;
  seeds_.reset();
  alpha_.reset();
  filters_ = std::make_shared<Parameter>(name_ + ".filters", ParamRole::kFilters, filters);
}

std::vector<ParameterPtr> ConvLayer::parameters() const {
  if (spec_.shared()) return {seeds_, alpha_, bias_};
  return {filters_, bias_};
}

void ConvLayer::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  for (const auto& p : parameters()) save_tensor(dir / (p->name + ".bin"), p->value);
  std::ofstream sidecar(dir / (name_ + ".json"));
  sidecar << nlohmann::json{{"name", name_}, {"spec", spec_}}.dump(2) << '\n';
}

void ConvLayer::load(const std::filesystem::path& dir) {
  std::ifstream sidecar(dir / (name_ + ".json"));
  if (!sidecar) throw FormatError("missing layer sidecar " + (dir / (name_ + ".json")).string());
  const auto j = nlohmann::json::parse(sidecar);
  const ConvLayerSpec saved = j.at("spec").get<ConvLayerSpec>();
  if (saved != spec_) throw ConfigError("layer " + name_ + ": checkpoint spec does not match");
  for (const auto& p : parameters()) {
    Tensor value = load_tensor(dir / (p->name + ".bin"));
    if (value.shape() != p->value.shape()) {
      throw FormatError("layer " + name_ + ": " + p->name + " has shape " + value.shape().str());
    }
    p->value = std::move(value);
  }
}

}  // namespace fsnet
