#pragma once

// Declarative architectures and their instantiation.
//
// Two stand-in builders are provided:
//
// CIF-CNN (classification), input 3 x 32 x 32:
//   conv 5x5 -> 32, relu, dropout, maxpool 2
//   conv 5x5 -> 64, relu, dropout, maxpool 2
//   conv 3x3 -> 64, relu
//   global average pool, dense 64 -> 10 logits
//
// 3D U-Net (segmentation), input 1 x 40^3 by default:
//   analysis: per level two 3^3 convs + relu, channels base * 2^level,
//             maxpool 2 between levels
//   synthesis: nearest upsample x2, concat skip, two 3^3 convs + relu
//   head: 1^3 conv -> 1 channel, sigmoid
// All convolutions use same padding. Dropout follows each conv block.
//
// With sharing requested, every non-head conv layer gets P seeds, clamped to
// the layer's breakeven; layers where sharing cannot save anything stay
// standard. Each adjustment is recorded in NetSpec::warnings.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "fsnet/autodiff.hpp"
#include "fsnet/shared_conv.hpp"

namespace fsnet {

enum class LayerKind {
  kConv,
  kRelu,
  kSigmoid,
  kDropout,
  kMaxPool,
  kUpsample,
  kPushSkip,    // remember the current activation
  kConcatSkip,  // concat(current, most recent remembered activation)
  kGlobalAvgPool,
  kDense,
};

const char* to_string(LayerKind kind);

struct LayerDesc {
  LayerKind kind = LayerKind::kRelu;
  ConvLayerSpec conv;        // kConv
  bool head = false;         // kConv: output head, never shared
  std::size_t factor = 2;    // kMaxPool / kUpsample
  std::size_t in_features = 0, out_features = 0;  // kDense

  bool operator==(const LayerDesc&) const = default;
};

struct NetSpec {
  std::string name;
  std::vector<std::size_t> input_shape;  // [C, spatial...] or [features]
  std::vector<LayerDesc> layers;
  bool sharing = false;
  std::size_t requested_p = 0;
  std::vector<std::string> warnings;

  // Same layer structure ignoring sharing (used to pair shared/unshared nets).
  bool same_architecture(const NetSpec& other) const;
};

void to_json(nlohmann::json& j, const NetSpec& spec);
void from_json(const nlohmann::json& j, NetSpec& spec);

NetSpec build_cifcnn(bool shared, std::size_t p = 15, std::size_t input_extent = 32, bool dropout = true);

struct UNetOptions {
  std::size_t levels = 3;
  std::size_t base_channels = 8;
  std::size_t input_extent = 40;
  std::size_t kernel_extent = 3;
  bool dropout = true;
};
NetSpec build_unet3d(const UNetOptions& options, bool shared, std::size_t p = 15);

// Single dense layer, for linear-model experiments.
NetSpec build_linear(std::size_t in_features, std::size_t classes);

// Applies sharing with P to a standard spec, clamping to breakeven.
ConvLayerSpec with_sharing(ConvLayerSpec spec, std::size_t p, std::vector<std::string>* warnings,
                           const std::string& where);

struct LayerTrace {
  std::size_t index;
  LayerKind kind;
  Shape output;
  ParamCount params;
};

struct ShapeTrace {
  std::vector<LayerTrace> layers;
  Shape output;
  ParamCount total;
};

// Symbolic shape propagation. Throws ShapeError naming the first bad layer.
ShapeTrace validate(const NetSpec& spec, const Shape& input);
ShapeTrace validate(const NetSpec& spec);

struct ForwardOptions {
  bool training = false;
  double dropout_p = 0.0;
  std::mt19937_64* rng = nullptr;  // required when training with dropout
};

class Network {
 public:
  // Validates the spec and initialises all parameters from `seed`.
  static Network create(const NetSpec& spec, std::uint64_t seed);

  const NetSpec& spec() const { return spec_; }

  Var forward(Tape& tape, const Var& input, const ForwardOptions& options = {}) const;
  // Inference-mode forward pass without keeping a tape around.
  Tensor predict(const Tensor& input) const;

  std::vector<ParameterPtr> parameters() const;
  // Scalars the optimiser sees, split into weights and biases.
  ParamCount count_parameters() const;

  // Indices (into spec().layers) of conv layers.
  std::vector<std::size_t> conv_indices() const;
  ConvLayer& conv_layer(std::size_t layer_index);
  const ConvLayer& conv_layer(std::size_t layer_index) const;

  // Turns conv layer `layer_index` into a standard layer applying `filters`.
  void substitute_filters(std::size_t layer_index, const Tensor& filters);

  Network clone() const;

  // Directory with net.json plus one tensor dump per parameter.
  void save(const std::filesystem::path& dir) const;
  static Network load(const std::filesystem::path& dir);

 private:
  struct Slot {
    std::optional<ConvLayer> conv;
    ParameterPtr weight, bias;  // dense
  };

  NetSpec spec_;
  std::vector<Slot> slots_;
};

}  // namespace fsnet
