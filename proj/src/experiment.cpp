#include "fsnet/experiment.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <random>

#include "fsnet/error.hpp"
#include "fsnet/factorize.hpp"
#include "fsnet/regularizers.hpp"

namespace fsnet::cli {

using nlohmann::json;

namespace {

// Kept in sync with docs/config.schema.json (written by `fsnet schema`).
constexpr const char* kSchema = R"json({
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "fsnet experiment config",
  "type": "object",
  "additionalProperties": false,
  "properties": {
    "task": {"enum": ["synth3d", "cifar", "toy"]},
    "seed": {"type": "integer", "minimum": 0},
    "output_dir": {"type": "string"},
    "resume": {"type": "boolean"},
    "data": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "root": {"type": ["string", "null"]},
        "count": {"type": "integer", "minimum": 1},
        "split": {
          "type": "object",
          "additionalProperties": false,
          "properties": {
            "train": {"type": "number", "minimum": 0, "maximum": 1},
            "val": {"type": "number", "minimum": 0, "maximum": 1},
            "test": {"type": "number", "minimum": 0, "maximum": 1}
          }
        },
        "synth": {
          "type": "object",
          "additionalProperties": false,
          "properties": {
            "min_semi_axis": {"type": "number", "exclusiveMinimum": 0},
            "max_semi_axis": {"type": "number", "exclusiveMinimum": 0},
            "background_sigma": {"type": "number", "minimum": 0},
            "background_amplitude": {"type": "number", "minimum": 0},
            "contrast": {"type": "number"},
            "noise": {"type": "number", "minimum": 0}
          }
        },
        "cifar_train": {"type": "integer", "minimum": 1},
        "cifar_val": {"type": "integer", "minimum": 1},
        "toy_train": {"type": "integer", "minimum": 1},
        "toy_val": {"type": "integer", "minimum": 1},
        "toy_extent": {"type": "integer", "minimum": 4},
        "toy_noise": {"type": "number", "minimum": 0}
      }
    },
    "arch": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "levels": {"type": "integer", "minimum": 2},
        "base_channels": {"type": "integer", "minimum": 1},
        "input_extent": {"type": "integer", "minimum": 1},
        "kernel": {"type": "integer", "minimum": 1},
        "dropout": {"type": "boolean"}
      }
    },
    "sharing": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "enabled": {"type": "boolean"},
        "P": {"type": "integer", "minimum": 1}
      }
    },
    "train": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "optimizer": {"enum": ["adam", "sgd"]},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "epochs": {"type": "integer", "minimum": 0},
        "eval_every": {"type": "integer", "minimum": 1},
        "subset_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "target_metric": {"type": ["number", "null"]},
        "max_steps": {"type": "integer", "minimum": 0},
        "wall_time": {"type": "boolean"}
      }
    },
    "regularizers": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "unit_norm_seeds": {"type": "boolean"},
        "l1_alpha": {"type": "number", "minimum": 0},
        "nuclear_alpha": {"type": "number", "minimum": 0},
        "dropout_p": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}
      }
    },
    "subset": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "fractions": {"type": "array", "minItems": 1,
                      "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}}
      }
    },
    "factorize": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "unshared": {"type": ["string", "null"]},
        "shared": {"type": ["string", "null"]},
        "P": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        "split": {"enum": ["val", "test"]}
      }
    },
    "eval": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "model": {"type": ["string", "null"]},
        "split": {"enum": ["train", "val", "test"]}
      }
    },
    "params": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "kernels": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
        "P": {"type": "integer", "minimum": 1},
        "single_layer": {
          "type": ["object", "null"],
          "additionalProperties": false,
          "required": ["M", "N", "kernel"],
          "properties": {
            "M": {"type": "integer", "minimum": 1},
            "N": {"type": "integer", "minimum": 1},
            "kernel": {"type": "integer", "minimum": 1},
            "dims": {"type": "integer", "minimum": 1}
          }
        }
      }
    },
    "gradcheck": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "tolerance": {"type": "number", "exclusiveMinimum": 0},
        "max_coords": {"type": "integer", "minimum": 1}
      }
    }
  }
})json";

constexpr const char* kDefaults = R"json({
  "task": "synth3d",
  "seed": 0,
  "output_dir": "fsnet-out",
  "resume": false,
  "data": {
    "root": null,
    "count": 280,
    "split": {"train": 0.5, "val": 0.25, "test": 0.25},
    "synth": {"min_semi_axis": 3.0, "max_semi_axis": 8.0, "background_sigma": 2.0,
              "background_amplitude": 0.3, "contrast": 1.0, "noise": 0.2},
    "cifar_train": 5000,
    "cifar_val": 1000,
    "toy_train": 2000,
    "toy_val": 1000,
    "toy_extent": 16,
    "toy_noise": 0.35
  },
  "arch": {"levels": 3, "base_channels": 8, "input_extent": 40, "kernel": 3, "dropout": true},
  "sharing": {"enabled": true, "P": 15},
  "train": {"optimizer": "adam", "lr": 0.001, "batch_size": 4, "epochs": 10, "eval_every": 1,
            "subset_fraction": 1.0, "target_metric": null, "max_steps": 0, "wall_time": false},
  "regularizers": {"unit_norm_seeds": false, "l1_alpha": 0.0, "nuclear_alpha": 0.0, "dropout_p": 0.1},
  "subset": {"fractions": [0.1, 0.2, 0.35]},
  "factorize": {"unshared": null, "shared": null, "P": [1, 2, 4, 8, 16], "split": "val"},
  "eval": {"model": null, "split": "test"},
  "params": {"kernels": [3, 5, 7, 9], "P": 15, "single_layer": null},
  "gradcheck": {"tolerance": 1e-4, "max_coords": 400}
})json";

std::string path_str(const std::string& path) { return path.empty() ? "<root>" : path; }

bool type_matches(const json& v, const std::string& type) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "boolean") return v.is_boolean();
  if (type == "null") return v.is_null();
  if (type == "integer") return v.is_number_integer() || (v.is_number_float() && std::floor(v.get<double>()) == v.get<double>());
  if (type == "number") return v.is_number();
  return false;
}

void validate_node(const json& v, const json& schema, const std::string& path) {
  auto fail = [&](const std::string& msg) { throw ConfigError("config " + path_str(path) + ": " + msg); };
  if (schema.contains("type")) {
    const json& t = schema["type"];
    bool ok = false;
    if (t.is_array()) {
      for (const auto& alt : t) ok = ok || type_matches(v, alt.get<std::string>());
    } else {
      ok = type_matches(v, t.get<std::string>());
    }
    if (!ok) fail("expected type " + t.dump() + ", got " + v.dump());
  }
  if (schema.contains("enum")) {
    bool ok = false;
    for (const auto& e : schema["enum"]) ok = ok || e == v;
    if (!ok) fail("value " + v.dump() + " not one of " + schema["enum"].dump());
  }
  if (v.is_number()) {
    const double x = v.get<double>();
    if (schema.contains("minimum") && x < schema["minimum"].get<double>()) fail("must be >= " + schema["minimum"].dump());
    if (schema.contains("maximum") && x > schema["maximum"].get<double>()) fail("must be <= " + schema["maximum"].dump());
    if (schema.contains("exclusiveMinimum") && !(x > schema["exclusiveMinimum"].get<double>()))
      fail("must be > " + schema["exclusiveMinimum"].dump());
    if (schema.contains("exclusiveMaximum") && !(x < schema["exclusiveMaximum"].get<double>()))
      fail("must be < " + schema["exclusiveMaximum"].dump());
  }
  if (v.is_object()) {
    const json props = schema.value("properties", json::object());
    for (const auto& key : schema.value("required", json::array())) {
      if (!v.contains(key.get<std::string>())) fail("missing required key '" + key.get<std::string>() + "'");
    }
    for (const auto& [key, child] : v.items()) {
      if (props.contains(key)) {
        validate_node(child, props[key], path + "/" + key);
      } else if (schema.value("additionalProperties", true) == false) {
        fail("unknown key '" + key + "'");
      }
    }
  }
  if (v.is_array()) {
    if (schema.contains("minItems") && v.size() < schema["minItems"].get<std::size_t>()) {
      fail("needs at least " + schema["minItems"].dump() + " items");
    }
    if (schema.contains("items")) {
      for (std::size_t i = 0; i < v.size(); ++i) validate_node(v[i], schema["items"], path + "/" + std::to_string(i));
    }
  }
}

void merge_into(json& base, const json& patch) {
  for (const auto& [key, value] : patch.items()) {
    if (value.is_object() && base.contains(key) && base[key].is_object()) {
      merge_into(base[key], value);
    } else {
      base[key] = value;
    }
  }
}

std::filesystem::path output_dir(const json& cfg) {
  std::filesystem::path out = cfg.at("output_dir").get<std::string>();
  std::filesystem::create_directories(out);
  return out;
}

void write_resolved(const json& cfg) {
  std::ofstream out(output_dir(cfg) / "config.resolved.json");
  out << cfg.dump(2) << '\n';
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  return out;
}

std::optional<std::filesystem::path> data_root(const json& cfg) {
  const json& root = cfg["data"]["root"];
  if (root.is_string()) return std::filesystem::path(root.get<std::string>());
  if (const char* env = std::getenv(kDataRootEnv); env && *env) return std::filesystem::path(env);
  return std::nullopt;
}

std::ostream& null_stream() {
  static std::ofstream sink;
  return sink;
}

std::ostream& log_of(const CommandOptions& o) { return o.log ? *o.log : null_stream(); }

}  // namespace

const json& config_schema() {
  static const json schema = json::parse(kSchema);
  return schema;
}

const json& default_config() {
  static const json defaults = json::parse(kDefaults);
  return defaults;
}

void validate_config(const json& doc, const json& schema) { validate_node(doc, schema, ""); }

json resolve_config(const json& user, const std::vector<std::string>& overrides) {
  if (!user.is_object()) throw ConfigError("config must be a JSON object");
  validate_config(user, config_schema());
  json cfg = default_config();
  merge_into(cfg, user);
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not key=value");
    std::string pointer = "/" + o.substr(0, eq);
    for (char& c : pointer)
      if (c == '.') c = '/';
    const std::string text = o.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    const json::json_pointer ptr(pointer);
    if (!cfg.contains(ptr.parent_pointer())) throw ConfigError("override '" + o + "': unknown key");
    cfg[ptr] = value;
  }
  validate_config(cfg, config_schema());
  const auto& sp = cfg["data"]["split"];
  if (std::abs(sp["train"].get<double>() + sp["val"].get<double>() + sp["test"].get<double>() - 1.0) > 1e-9) {
    throw ConfigError("config /data/split: fractions must sum to 1");
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Tasks

TaskData load_task(const json& cfg) {
  const std::string task = cfg["task"];
  const json& d = cfg["data"];
  const std::uint64_t seed = cfg["seed"];
  TaskData t;
  if (task == "synth3d") {
    t.input_extent = cfg["arch"]["input_extent"];
    std::vector<VolumeSample> volumes;
    const auto root = data_root(cfg);
    if (root && std::filesystem::exists(*root / "manifest.json")) {
      volumes = load_volumes(*root);
    } else if (root && cfg["data"]["root"].is_string()) {
      throw ConfigError("data root " + root->string() + " has no manifest.json");
    } else {
      SynthOptions so = d["synth"].get<SynthOptions>();
      so.extent = t.input_extent;
      volumes = synth_nodule_dataset(d["count"], seed, so);
    }
    const Dataset all = to_dataset(volumes);
    const SplitIndices s =
        split_indices(all.size(), {d["split"]["train"], d["split"]["val"], d["split"]["test"]}, seed);
    t.train = all.select(s.train);
    t.val = all.select(s.val);
    t.test = all.select(s.test);
    if (!t.train.empty()) t.input_extent = t.train.items[0].input.shape()[1];
  } else if (task == "cifar") {
    const auto root = data_root(cfg);
    if (!root) throw ConfigError("task cifar needs data.root or $" + std::string(kDataRootEnv));
    if (!std::filesystem::is_directory(*root)) throw ConfigError("CIFAR directory " + root->string() + " not found");
    const CifarData cifar = load_cifar10(*root);
    auto labels_of = [](const std::vector<LabeledImage>& v) {
      std::vector<std::size_t> l;
      for (const auto& x : v) l.push_back(x.label);
      return l;
    };
    const Dataset train = to_dataset(cifar.train), test = to_dataset(cifar.test);
    const double ft = std::min(1.0, d["cifar_train"].get<double>() / static_cast<double>(train.size()));
    const double fv = std::min(1.0, d["cifar_val"].get<double>() / static_cast<double>(test.size()));
    t.train = train.select(stratified_subset(labels_of(cifar.train), ft, seed));
    t.val = test.select(stratified_subset(labels_of(cifar.test), fv, seed));
    t.test = t.val;
    t.input_extent = 32;
  } else {
    ToyOptions to;
    to.extent = d["toy_extent"];
    to.noise = d["toy_noise"];
    t.train = to_dataset(toy_gratings(d["toy_train"], seed, to));
    t.val = to_dataset(toy_gratings(d["toy_val"], seed + 1, to));
    t.test = to_dataset(toy_gratings(d["toy_val"], seed + 2, to));
    t.input_extent = to.extent;
  }
  return t;
}

NetSpec make_net_spec(const json& cfg, std::size_t input_extent, bool shared) {
  const json& a = cfg["arch"];
  const std::size_t p = cfg["sharing"]["P"];
  if (cfg["task"] == "synth3d") {
    UNetOptions o;
    o.levels = a["levels"];
    o.base_channels = a["base_channels"];
    o.input_extent = input_extent;
    o.kernel_extent = a["kernel"];
    o.dropout = a["dropout"];
    return build_unet3d(o, shared, p);
  }
  return build_cifcnn(shared, p, input_extent, a["dropout"].get<bool>());
}

TrainConfig make_train_config(const json& cfg) {
  TrainConfig tc = cfg["train"].get<TrainConfig>();
  tc.seed = cfg["seed"];
  tc.regularizers = cfg["regularizers"].get<RegularizerConfig>();
  tc.validate();
  return tc;
}

namespace {

void report_warnings(const NetSpec& spec, std::ostream& log) {
  for (const auto& w : spec.warnings) log << "warning: " << spec.name << " " << w << '\n';
}

const Dataset& pick_split(const TaskData& t, const std::string& split) {
  if (split == "train") return t.train;
  if (split == "val") return t.val;
  return t.test;
}

}  // namespace

// ---------------------------------------------------------------------------
// gradcheck

int cmd_gradcheck(const json& cfg, const CommandOptions& options) {
  std::ostream& log = log_of(options);
  write_resolved(cfg);
  const auto out_dir = output_dir(cfg);
  const std::uint64_t seed = cfg["seed"];
  GradCheckOptions gco;
  gco.tolerance = cfg["gradcheck"]["tolerance"];
  gco.max_coords = cfg["gradcheck"]["max_coords"];
  gco.seed = seed;

  struct Check {
    std::string name;
    std::vector<ParameterPtr> params;
    LossProgram program;
  };
  std::vector<Check> checks;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random_tensor = [&](const Shape& s) {
    Tensor t(s);
    for (double& v : t.values()) v = normal(rng);
    return t;
  };

  // Single shared layers, D = 1, 2, 3. Loss: random projection of the output.
  struct LayerCase {
    std::string name;
    ConvLayerSpec spec;
    Shape input;
  };
  const std::vector<LayerCase> layer_cases = {
      {"conv1d", {2, 3, {5}, 4, Padding::kValid}, Shape{2, 12}},
      {"conv2d", {2, 3, {3, 3}, 4, Padding::kSame}, Shape{2, 6, 6}},
      {"conv3d", {2, 3, {3, 3, 3}, 5, Padding::kSame}, Shape{2, 5, 5, 5}},
  };
  for (const auto& lc : layer_cases) {
    auto layer = std::make_shared<ConvLayer>(ConvLayer::create(lc.spec, lc.name, rng));
    for (double& b : layer->bias()->value.values()) b = 0.1 * normal(rng);
    const Tensor input = random_tensor(lc.input);
    const Shape out_shape = conv_output_spatial(lc.input.drop_front(), lc.spec.kernel_shape(), lc.spec.padding)
                                .prepend(lc.spec.out_channels);
    const Tensor proj = random_tensor(out_shape);
    const bool fault = options.inject_fault && lc.name == "conv1d";
    checks.push_back({lc.name, layer->parameters(), [layer, input, proj, fault](Tape& tape) {
                        Var out = layer->forward(tape, tape.constant(input));
                        if (fault) {
                          // y = x^2 with the derivative deliberately off by half.
                          out = tape.record(mul(out.value(), out.value()), {out},
                                            [out](Tape& tp, const Tensor& g, const Tensor&) {
                                              tp.accumulate(out, mul(g, scale(out.value(), 3.0)));
                                            });
                        }
                        return ad::dot(out, tape.constant(proj));
                      }});
  }

  // Whole networks at reduced input sizes, dropout off.
  auto add_net = [&](const std::string& name, const NetSpec& spec) {
    report_warnings(spec, log);
    auto net = std::make_shared<Network>(Network::create(spec, seed));
    for (const auto& p : net->parameters())
      if (p->role == ParamRole::kBias) p->value = random_tensor(p->value.shape());
    const Tensor input = random_tensor(Shape(spec.input_shape));
    const Tensor proj = random_tensor(validate(spec).output);
    checks.push_back({name, net->parameters(), [net, input, proj](Tape& tape) {
                        return ad::dot(net->forward(tape, tape.constant(input)), tape.constant(proj));
                      }});
  };
  add_net("cifcnn", build_cifcnn(true, cfg["sharing"]["P"], 8, false));
  UNetOptions small;
  small.levels = 2;
  small.base_channels = 2;
  small.input_extent = 6;
  small.dropout = false;
  add_net("unet3d", build_unet3d(small, true, cfg["sharing"]["P"]));

  auto coords = open_out(out_dir / "gradcheck.csv");
  auto summary = open_out(out_dir / "gradcheck_summary.csv");
  coords << "check,param_id,coord,analytic,numeric,rel_err\n";
  summary << "check,param_id,role,coords,max_rel_err,passed\n";
  bool all_passed = true;
  for (const auto& c : checks) {
    const GradCheckReport r = grad_check(c.program, c.params, gco);
    for (const auto& row : r.rows) {
      coords << c.name << ',' << row.param_id << ',' << row.coord << ',' << format_double(row.analytic) << ','
             << format_double(row.numeric) << ',' << format_double(row.rel_err) << '\n';
    }
    for (const auto& s : r.per_param) {
      ParamRole role = ParamRole::kFilters;
      for (const auto& p : c.params)
        if (p->name == s.param_id) role = p->role;
      const bool ok = s.max_rel_err < gco.tolerance;
      summary << c.name << ',' << s.param_id << ',' << to_string(role) << ',' << s.coords_checked << ','
              << format_double(s.max_rel_err) << ',' << (ok ? 1 : 0) << '\n';
    }
    log << c.name << ": max rel err " << r.max_rel_err << (r.passed ? " ok" : " FAILED") << '\n';
    all_passed = all_passed && r.passed;
  }
  return all_passed ? kExitOk : kExitCheckFailed;
}

// ---------------------------------------------------------------------------
// params

std::vector<ParamsRow> unet_params_sweep(const UNetOptions& base, const std::vector<std::size_t>& kernels,
                                         std::size_t p) {
  std::vector<ParamsRow> rows;
  for (std::size_t k : kernels) {
    UNetOptions o = base;
    o.kernel_extent = k;
    if (k % 2 == 0) throw ConfigError("params sweep: kernel extent " + std::to_string(k) + " must be odd");
    const NetSpec spec = build_unet3d(o, false);
    ParamsRow total{k, "total"};
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
      const LayerDesc& l = spec.layers[i];
      if (l.kind != LayerKind::kConv) continue;
      ConvLayerSpec shared = l.conv;
      if (!l.head) shared.shared_p = p;
      ParamsRow r{k, l.head ? "L" + std::to_string(i) + "(head)" : "L" + std::to_string(i)};
      r.m = l.conv.out_channels;
      r.n = l.conv.in_channels;
      r.s = l.conv.filter_size();
      r.unshared = param_count(l.conv).weights;
      r.shared = param_count(shared).weights;
      r.above_breakeven = !l.head && p > sharing_breakeven(l.conv) ? 1 : 0;
      total.unshared += r.unshared;
      total.shared += r.shared;
      total.above_breakeven += r.above_breakeven;
      rows.push_back(r);
    }
    rows.push_back(total);
  }
  return rows;
}

int cmd_params(const json& cfg, const CommandOptions& options) {
  std::ostream& log = log_of(options);
  write_resolved(cfg);
  const auto out_dir = output_dir(cfg);
  const json& pc = cfg["params"];
  const std::size_t p = pc["P"];
  auto totals = open_out(out_dir / "params.csv");
  totals << "kernel_extent,unshared_count,shared_count,ratio,above_breakeven\n";
  auto emit = [&](std::ostream& out, const ParamsRow& r) {
    out << r.unshared << ',' << r.shared << ',' << format_double(r.ratio()) << ',' << r.above_breakeven << '\n';
  };

  if (!pc["single_layer"].is_null()) {
    const json& sl = pc["single_layer"];
    ConvLayerSpec spec;
    spec.out_channels = sl["M"];
    spec.in_channels = sl["N"];
    spec.kernel.assign(sl.value("dims", std::size_t{3}), sl["kernel"].get<std::size_t>());
    ConvLayerSpec shared = spec;
    shared.shared_p = p;
    ParamsRow r{sl["kernel"], "single", spec.out_channels, spec.in_channels, spec.filter_size(),
                param_count(spec).weights, param_count(shared).weights, p > sharing_breakeven(spec) ? 1u : 0u};
    totals << r.kernel_extent << ',';
    emit(totals, r);
    log << "M=" << r.m << " N=" << r.n << " S=" << r.s << " P=" << p << ": " << r.unshared << " -> " << r.shared
        << (r.above_breakeven ? " (P above breakeven)" : "") << '\n';
    return kExitOk;
  }

  UNetOptions base;
  base.levels = cfg["arch"]["levels"];
  base.base_channels = cfg["arch"]["base_channels"];
  base.input_extent = cfg["arch"]["input_extent"];
  const auto rows = unet_params_sweep(base, pc["kernels"].get<std::vector<std::size_t>>(), p);
  auto layers = open_out(out_dir / "params_layers.csv");
  layers << "kernel_extent,layer,M,N,S,unshared_count,shared_count,ratio,above_breakeven\n";
  for (const auto& r : rows) {
    if (r.layer == "total") {
      totals << r.kernel_extent << ',';
      emit(totals, r);
      log << "kernel " << r.kernel_extent << ": " << r.unshared << " -> " << r.shared << " (ratio " << r.ratio()
          << ")\n";
    } else {
      layers << r.kernel_extent << ',' << r.layer << ',' << r.m << ',' << r.n << ',' << r.s << ',';
      emit(layers, r);
    }
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train / eval

int cmd_train(const json& cfg, const CommandOptions& options) {
  std::ostream& log = log_of(options);
  const TrainConfig tc = make_train_config(cfg);
  write_resolved(cfg);
  const auto out_dir = output_dir(cfg);
  const TaskData data = load_task(cfg);
  const NetSpec spec = make_net_spec(cfg, data.input_extent, cfg["sharing"]["enabled"]);
  report_warnings(spec, log);
  Network net = Network::create(spec, cfg["seed"]);
  log << spec.name << ": " << net.count_parameters().weights << " weights, " << net.count_parameters().bias
      << " biases; " << data.train.size() << " train / " << data.val.size() << " val / " << data.test.size()
      << " test\n";

  TrainOptions to;
  to.validation = data.val.empty() ? nullptr : &data.val;
  to.checkpoint_dir = out_dir / "checkpoints";
  to.resume = cfg["resume"];
  to.log = options.log;
  const TrainResult result = train(net, data.train, tc, to);
  result.metrics.save_csv(out_dir / "metrics.csv");
  std::filesystem::remove_all(out_dir / "model");
  net.save(out_dir / "model");

  json summary{{"network", spec.name},
               {"weights", net.count_parameters().weights},
               {"biases", net.count_parameters().bias},
               {"epochs_run", result.epochs_run},
               {"steps", result.steps},
               {"reached_target", result.reached_target},
               {"warnings", spec.warnings}};
  if (!data.test.empty()) {
    const EvalResult te = evaluate(net, data.test);
    summary["test_loss"] = te.loss;
    summary["test_metric"] = te.metric;
    log << "test loss " << te.loss << " metric " << te.metric << '\n';
  }
  open_out(out_dir / "summary.json") << summary.dump(2) << '\n';
  return kExitOk;
}

int cmd_eval(const json& cfg, const CommandOptions& options) {
  std::ostream& log = log_of(options);
  write_resolved(cfg);
  const auto out_dir = output_dir(cfg);
  const std::filesystem::path model =
      cfg["eval"]["model"].is_string() ? std::filesystem::path(cfg["eval"]["model"].get<std::string>())
                                       : out_dir / "model";
  if (!std::filesystem::exists(model / "net.json")) throw ConfigError("no model checkpoint at " + model.string());
  const Network net = Network::load(model);
  const TaskData data = load_task(cfg);
  const std::string split = cfg["eval"]["split"];
  const Dataset& ds = pick_split(data, split);
  const EvalResult r = evaluate(net, ds);
  auto out = open_out(out_dir / "eval.csv");
  out << "split,count,loss,metric\n" << split << ',' << ds.size() << ',' << format_double(r.loss) << ','
      << format_double(r.metric) << '\n';
  log << split << ": loss " << r.loss << " metric " << r.metric << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// subset experiment

int cmd_subset(const json& cfg, const CommandOptions& options) {
  std::ostream& log = log_of(options);
  const TrainConfig base = make_train_config(cfg);
  write_resolved(cfg);
  const auto out_dir = output_dir(cfg);
  const TaskData data = load_task(cfg);
  auto out = open_out(out_dir / "subset.csv");
  out << "fraction,shared,weights,val_loss,val_metric\n";
  for (double f : cfg["subset"]["fractions"].get<std::vector<double>>()) {
    for (bool shared : {false, true}) {
      const NetSpec spec = make_net_spec(cfg, data.input_extent, shared);
      report_warnings(spec, log);
      Network net = Network::create(spec, cfg["seed"]);
      TrainConfig tc = base;
      tc.subset_fraction = f;
      tc.target_metric.reset();
      train(net, data.train, tc);
      const EvalResult r = evaluate(net, data.val);
      out << format_double(f) << ',' << (shared ? 1 : 0) << ',' << net.count_parameters().weights << ','
          << format_double(r.loss) << ',' << format_double(r.metric) << '\n';
      out.flush();
      log << "fraction " << f << (shared ? " shared" : " standard") << ": val metric " << r.metric << '\n';
    }
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// factorize

int cmd_factorize(const json& cfg, const CommandOptions& options) {
  std::ostream& log = log_of(options);
  write_resolved(cfg);
  const auto out_dir = output_dir(cfg);
  const json& fc = cfg["factorize"];
  auto checkpoint = [&](const char* key) {
    if (!fc[key].is_string()) throw ConfigError(std::string("factorize.") + key + " checkpoint not given");
    const std::filesystem::path p = fc[key].get<std::string>();
    if (!std::filesystem::exists(p / "net.json")) throw ConfigError("missing checkpoint " + p.string());
    return p;
  };
  const Network unshared = Network::load(checkpoint("unshared"));
  const Network direct = Network::load(checkpoint("shared"));
  const TaskData data = load_task(cfg);
  const auto grid = fc["P"].get<std::vector<std::size_t>>();
  const auto rows = compare_posthoc_vs_direct(unshared, direct, pick_split(data, fc["split"]), grid);
  auto out = open_out(out_dir / "factorize.csv");
  write_factorize_csv(out, rows);
  log << rows.size() << " rows written (no fine-tuning after substitution)\n";
  return kExitOk;
}

}  // namespace fsnet::cli
