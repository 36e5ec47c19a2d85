#include "fsnet/nets.hpp"

#include <cmath>
#include <fstream>

#include "fsnet/error.hpp"
#include "fsnet/regularizers.hpp"

namespace fsnet {

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kSigmoid: return "sigmoid";
    case LayerKind::kDropout: return "dropout";
    case LayerKind::kMaxPool: return "max_pool";
    case LayerKind::kUpsample: return "upsample";
    case LayerKind::kPushSkip: return "push_skip";
    case LayerKind::kConcatSkip: return "concat_skip";
    case LayerKind::kGlobalAvgPool: return "global_avg_pool";
    case LayerKind::kDense: return "dense";
  }
  return "?";
}

namespace {

LayerKind kind_from_string(const std::string& s) {
  for (auto k : {LayerKind::kConv, LayerKind::kRelu, LayerKind::kSigmoid, LayerKind::kDropout, LayerKind::kMaxPool,
                 LayerKind::kUpsample, LayerKind::kPushSkip, LayerKind::kConcatSkip, LayerKind::kGlobalAvgPool,
                 LayerKind::kDense}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown layer kind '" + s + "'");
}

LayerDesc simple(LayerKind kind) {
  LayerDesc d;
  d.kind = kind;
  return d;
}

LayerDesc conv_desc(std::size_t in, std::size_t out, std::size_t kernel, std::size_t dims) {
  LayerDesc d;
  d.kind = LayerKind::kConv;
  d.conv.in_channels = in;
  d.conv.out_channels = out;
  d.conv.kernel.assign(dims, kernel);
  d.conv.padding = Padding::kSame;
  return d;
}

LayerDesc pool_desc(LayerKind kind, std::size_t factor) {
  LayerDesc d = simple(kind);
  d.factor = factor;
  return d;
}

}  // namespace

bool NetSpec::same_architecture(const NetSpec& other) const {
  if (input_shape != other.input_shape || layers.size() != other.layers.size()) return false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    LayerDesc a = layers[i], b = other.layers[i];
    a.conv.shared_p = 0;
    b.conv.shared_p = 0;
    if (!(a == b)) return false;
  }
  return true;
}

void to_json(nlohmann::json& j, const NetSpec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : spec.layers) {
    nlohmann::json e{{"kind", to_string(l.kind)}};
    switch (l.kind) {
      case LayerKind::kConv:
        e["conv"] = l.conv;
        e["head"] = l.head;
        break;
      case LayerKind::kMaxPool:
      case LayerKind::kUpsample:
        e["factor"] = l.factor;
        break;
      case LayerKind::kDense:
        e["in_features"] = l.in_features;
        e["out_features"] = l.out_features;
        break;
      default:
        break;
    }
    layers.push_back(std::move(e));
  }
  j = nlohmann::json{{"name", spec.name},
                     {"input_shape", spec.input_shape},
                     {"sharing", spec.sharing},
                     {"P", spec.requested_p},
                     {"layers", std::move(layers)}};
}

void from_json(const nlohmann::json& j, NetSpec& spec) {
  spec = NetSpec{};
  spec.name = j.at("name").get<std::string>();
  spec.input_shape = j.at("input_shape").get<std::vector<std::size_t>>();
  spec.sharing = j.at("sharing").get<bool>();
  spec.requested_p = j.at("P").get<std::size_t>();
  for (const auto& e : j.at("layers")) {
    LayerDesc d = simple(kind_from_string(e.at("kind").get<std::string>()));
    if (d.kind == LayerKind::kConv) {
      d.conv = e.at("conv").get<ConvLayerSpec>();
      d.head = e.value("head", false);
    } else if (d.kind == LayerKind::kMaxPool || d.kind == LayerKind::kUpsample) {
      d.factor = e.at("factor").get<std::size_t>();
    } else if (d.kind == LayerKind::kDense) {
      d.in_features = e.at("in_features").get<std::size_t>();
      d.out_features = e.at("out_features").get<std::size_t>();
    }
    spec.layers.push_back(d);
  }
}

ConvLayerSpec with_sharing(ConvLayerSpec spec, std::size_t p, std::vector<std::string>* warnings,
                           const std::string& where) {
  if (p == 0) throw ConfigError("P must be >= 1 when sharing is enabled");
  const std::size_t limit = sharing_breakeven(spec);
  auto warn = [&](const std::string& msg) {
    if (warnings) warnings->push_back(where + ": " + msg);
  };
  if (limit == 0) {
    warn("no P saves parameters (M=" + std::to_string(spec.out_channels) + ", N=" +
         std::to_string(spec.in_channels) + ", S=" + std::to_string(spec.filter_size()) + "); layer left unshared");
    spec.shared_p = 0;
  } else if (p > limit) {
    warn("P=" + std::to_string(p) + " exceeds breakeven " + std::to_string(limit) + "; clamped");
    spec.shared_p = limit;
  } else {
    spec.shared_p = p;
  }
  return spec;
}

namespace {

void share_all(NetSpec& spec, std::size_t p) {
  spec.sharing = true;
  spec.requested_p = p;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    LayerDesc& l = spec.layers[i];
    if (l.kind == LayerKind::kConv && !l.head) {
      l.conv = with_sharing(l.conv, p, &spec.warnings, "layer " + std::to_string(i));
    }
  }
}

}  // namespace

NetSpec build_cifcnn(bool shared, std::size_t p, std::size_t input_extent, bool dropout) {
  if (shared && p == 0) throw ConfigError("CIF-CNN: P must be >= 1 when sharing is enabled");
  NetSpec spec;
  spec.name = shared ? "cifcnn-fs" : "cifcnn";
  spec.input_shape = {3, input_extent, input_extent};
  auto block = [&](std::size_t in, std::size_t out, std::size_t k) {
    spec.layers.push_back(conv_desc(in, out, k, 2));
    spec.layers.push_back(simple(LayerKind::kRelu));
  };
  block(3, 32, 5);
  if (dropout) spec.layers.push_back(simple(LayerKind::kDropout));
  spec.layers.push_back(pool_desc(LayerKind::kMaxPool, 2));
  block(32, 64, 5);
  if (dropout) spec.layers.push_back(simple(LayerKind::kDropout));
  spec.layers.push_back(pool_desc(LayerKind::kMaxPool, 2));
  block(64, 64, 3);
  spec.layers.push_back(simple(LayerKind::kGlobalAvgPool));
  LayerDesc dense = simple(LayerKind::kDense);
  dense.in_features = 64;
  dense.out_features = 10;
  spec.layers.push_back(dense);
  if (shared) share_all(spec, p);
  return spec;
}

NetSpec build_unet3d(const UNetOptions& o, bool shared, std::size_t p) {
  if (o.levels < 2) throw ConfigError("U-Net needs at least 2 levels");
  if (o.base_channels == 0) throw ConfigError("U-Net base_channels must be >= 1");
  if (o.kernel_extent % 2 == 0) throw ConfigError("U-Net kernel extent must be odd");
  if (shared && p == 0) throw ConfigError("U-Net: P must be >= 1 when sharing is enabled");
  NetSpec spec;
  spec.name = shared ? "unet3d-fs" : "unet3d";
  spec.input_shape = {1, o.input_extent, o.input_extent, o.input_extent};
  const std::size_t k = o.kernel_extent;
  auto block = [&](std::size_t in, std::size_t out) {
    spec.layers.push_back(conv_desc(in, out, k, 3));
    spec.layers.push_back(simple(LayerKind::kRelu));
    spec.layers.push_back(conv_desc(out, out, k, 3));
    spec.layers.push_back(simple(LayerKind::kRelu));
    if (o.dropout) spec.layers.push_back(simple(LayerKind::kDropout));
  };
  auto channels = [&](std::size_t level) { return o.base_channels << level; };

  std::size_t in = 1;
  for (std::size_t level = 0; level < o.levels; ++level) {
    block(in, channels(level));
    in = channels(level);
    if (level + 1 < o.levels) {
      spec.layers.push_back(simple(LayerKind::kPushSkip));
      spec.layers.push_back(pool_desc(LayerKind::kMaxPool, 2));
    }
  }
  for (std::size_t level = o.levels - 1; level-- > 0;) {
    spec.layers.push_back(pool_desc(LayerKind::kUpsample, 2));
    spec.layers.push_back(simple(LayerKind::kConcatSkip));
    block(in + channels(level), channels(level));
    in = channels(level);
  }
  LayerDesc head = conv_desc(in, 1, 1, 3);
  head.head = true;
  spec.layers.push_back(head);
  spec.layers.push_back(simple(LayerKind::kSigmoid));
  if (shared) share_all(spec, p);
  return spec;
}

NetSpec build_linear(std::size_t in_features, std::size_t classes) {
  NetSpec spec;
  spec.name = "linear";
  spec.input_shape = {in_features};
  LayerDesc dense = simple(LayerKind::kDense);
  dense.in_features = in_features;
  dense.out_features = classes;
  spec.layers.push_back(dense);
  return spec;
}

// ---------------------------------------------------------------------------
// Validation

ShapeTrace validate(const NetSpec& spec, const Shape& input) {
  ShapeTrace trace;
  Shape current = input;
  std::vector<Shape> skips;
  std::size_t pool_level = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerDesc& l = spec.layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + to_string(l.kind) + ")";
    auto fail = [&](const std::string& msg) { throw ShapeError(where + ": " + msg); };
    ParamCount params;
    switch (l.kind) {
      case LayerKind::kConv: {
        try {
          l.conv.validate();
        } catch (const ConfigError& e) {
          fail(e.what());
        }
        if (current.rank() != l.conv.spatial_dims() + 1 || current[0] != l.conv.in_channels) {
          fail("expected [" + std::to_string(l.conv.in_channels) + ", " + std::to_string(l.conv.spatial_dims()) +
               " spatial dims], got " + current.str());
        }
        try {
          current = conv_output_spatial(current.drop_front(), l.conv.kernel_shape(), l.conv.padding)
                        .prepend(l.conv.out_channels);
        } catch (const Error& e) {
          fail(e.what());
        }
        params = param_count(l.conv);
        break;
      }
      case LayerKind::kRelu:
      case LayerKind::kSigmoid:
      case LayerKind::kDropout:
        break;
      case LayerKind::kMaxPool: {
        ++pool_level;
        if (current.rank() < 2) fail("needs [C, spatial...], got " + current.str());
        std::vector<std::size_t> dims = current.dims();
        for (std::size_t d = 1; d < dims.size(); ++d) {
          if (dims[d] % l.factor != 0) {
            fail("pool level " + std::to_string(pool_level) + ": extent " + std::to_string(dims[d]) +
                 " not divisible by " + std::to_string(l.factor) + " (input " + current.str() + ")");
          }
          dims[d] /= l.factor;
        }
        current = Shape(dims);
        break;
      }
      case LayerKind::kUpsample: {
        if (current.rank() < 2) fail("needs [C, spatial...], got " + current.str());
        std::vector<std::size_t> dims = current.dims();
        for (std::size_t d = 1; d < dims.size(); ++d) dims[d] *= l.factor;
        current = Shape(dims);
        break;
      }
      case LayerKind::kPushSkip:
        skips.push_back(current);
        break;
      case LayerKind::kConcatSkip: {
        if (skips.empty()) fail("no remembered activation to concatenate");
        const Shape skip = skips.back();
        skips.pop_back();
        if (skip.drop_front() != current.drop_front()) {
          fail("spatial mismatch: expected " + skip.drop_front().str() + ", got " + current.drop_front().str());
        }
        current = current.drop_front().prepend(current[0] + skip[0]);
        break;
      }
      case LayerKind::kGlobalAvgPool:
        if (current.rank() < 2) fail("needs [C, spatial...], got " + current.str());
        current = Shape{current[0]};
        break;
      case LayerKind::kDense:
        if (current != Shape{l.in_features}) {
          fail("expected [" + std::to_string(l.in_features) + "], got " + current.str());
        }
        current = Shape{l.out_features};
        params = {l.in_features * l.out_features, l.out_features};
        break;
    }
    trace.total.weights += params.weights;
    trace.total.bias += params.bias;
    trace.layers.push_back({i, l.kind, current, params});
  }
  trace.output = current;
  return trace;
}

ShapeTrace validate(const NetSpec& spec) {
  if (spec.input_shape.empty()) throw ShapeError("net spec has no input shape");
  return validate(spec, Shape(spec.input_shape));
}

// ---------------------------------------------------------------------------
// Network

Network Network::create(const NetSpec& spec, std::uint64_t seed) {
  validate(spec);
  Network net;
  net.spec_ = spec;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerDesc& l = spec.layers[i];
    Slot slot;
    const std::string name = "L" + std::to_string(i);
    if (l.kind == LayerKind::kConv) {
      slot.conv = ConvLayer::create(l.conv, name, rng);
    } else if (l.kind == LayerKind::kDense) {
      const double limit = std::sqrt(6.0 / static_cast<double>(l.in_features + l.out_features));
      std::uniform_real_distribution<double> uniform(-limit, limit);
      Tensor w(Shape{l.out_features, l.in_features});
      for (double& v : w.values()) v = uniform(rng);
      slot.weight = std::make_shared<Parameter>(name + ".weight", ParamRole::kDenseWeight, std::move(w));
      slot.bias = std::make_shared<Parameter>(name + ".bias", ParamRole::kBias, Tensor(Shape{l.out_features}));
    }
    net.slots_.push_back(std::move(slot));
  }
  return net;
}

Var Network::forward(Tape& tape, const Var& input, const ForwardOptions& options) const {
  if (input.shape() != Shape(spec_.input_shape)) {
    throw ShapeError(spec_.name + ": input " + input.shape().str() + " does not match " +
                     Shape(spec_.input_shape).str());
  }
  Var x = input;
  std::vector<Var> skips;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const LayerDesc& l = spec_.layers[i];
    switch (l.kind) {
      case LayerKind::kConv:
        x = slots_[i].conv->forward(tape, x);
        break;
      case LayerKind::kRelu:
        x = ad::relu(x);
        break;
      case LayerKind::kSigmoid:
        x = ad::sigmoid(x);
        break;
      case LayerKind::kDropout:
        if (options.training && options.dropout_p > 0.0) {
          if (!options.rng) throw ContractError("dropout in training mode needs an rng");
          x = feature_dropout(x, options.dropout_p, *options.rng, true);
        }
        break;
      case LayerKind::kMaxPool:
        x = ad::max_pool(x, l.factor);
        break;
      case LayerKind::kUpsample:
        x = ad::upsample_nearest(x, l.factor);
        break;
      case LayerKind::kPushSkip:
        skips.push_back(x);
        break;
      case LayerKind::kConcatSkip:
        x = ad::concat_front(x, skips.back());
        skips.pop_back();
        break;
      case LayerKind::kGlobalAvgPool:
        x = ad::global_avg_pool(x);
        break;
      case LayerKind::kDense: {
        const Var w = tape.parameter(slots_[i].weight);
        const Var col = ad::reshape(x, Shape{l.in_features, 1});
        x = ad::add(ad::reshape(ad::matmul(w, col), Shape{l.out_features}), tape.parameter(slots_[i].bias));
        break;
      }
    }
  }
  return x;
}

Tensor Network::predict(const Tensor& input) const {
  Tape tape;
  return forward(tape, tape.constant(input)).value();
}

std::vector<ParameterPtr> Network::parameters() const {
  std::vector<ParameterPtr> out;
  for (const auto& s : slots_) {
    if (s.conv) {
      for (auto& p : s.conv->parameters()) out.push_back(p);
    }
    if (s.weight) out.push_back(s.weight);
    if (s.bias) out.push_back(s.bias);
  }
  return out;
}

ParamCount Network::count_parameters() const {
  ParamCount c;
  for (const auto& p : parameters()) {
    if (p->role == ParamRole::kBias) {
      c.bias += p->value.numel();
    } else {
      c.weights += p->value.numel();
    }
  }
  return c;
}

std::vector<std::size_t> Network::conv_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i)
    if (spec_.layers[i].kind == LayerKind::kConv) out.push_back(i);
  return out;
}

ConvLayer& Network::conv_layer(std::size_t layer_index) {
  if (layer_index >= slots_.size() || !slots_[layer_index].conv) {
    throw ContractError("layer " + std::to_string(layer_index) + " is not a conv layer");
  }
  return *slots_[layer_index].conv;
}

const ConvLayer& Network::conv_layer(std::size_t layer_index) const {
  return const_cast<Network*>(this)->conv_layer(layer_index);
}

void Network::substitute_filters(std::size_t layer_index, const Tensor& filters) {
  ConvLayer& layer = conv_layer(layer_index);
  layer.set_filters(filters);
  spec_.layers[layer_index].conv = layer.spec();
}

Network Network::clone() const {
  Network copy = Network::create(spec_, 0);
  const auto src = parameters();
  const auto dst = copy.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
  return copy;
}

void Network::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "net.json");
    if (!out) throw FormatError("cannot write " + (dir / "net.json").string());
    out << nlohmann::json(spec_).dump(2) << '\n';
  }
  for (const auto& s : slots_) {
    if (s.conv) s.conv->save(dir);
    if (s.weight) save_tensor(dir / (s.weight->name + ".bin"), s.weight->value);
    if (s.bias) save_tensor(dir / (s.bias->name + ".bin"), s.bias->value);
  }
}

Network Network::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "net.json");
  if (!in) throw FormatError("no network checkpoint at " + dir.string());
  NetSpec spec = nlohmann::json::parse(in).get<NetSpec>();
  Network net = Network::create(spec, 0);
  for (auto& s : net.slots_) {
    if (s.conv) s.conv->load(dir);
    for (const auto& p : {s.weight, s.bias}) {
      if (!p) continue;
      Tensor v = load_tensor(dir / (p->name + ".bin"));
      if (v.shape() != p->value.shape()) throw FormatError(p->name + ": shape " + v.shape().str());
      p->value = std::move(v);
    }
  }
  return net;
}

}  // namespace fsnet
