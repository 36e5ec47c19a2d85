#include "fsnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "fsnet/error.hpp"

namespace fsnet {

Dataset Dataset::select(const std::vector<std::size_t>& indices) const {
  Dataset out;
  out.task = task;
  out.items.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= items.size()) throw ContractError("dataset index " + std::to_string(i) + " out of range");
    out.items.push_back(items[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// CIFAR-10

std::vector<LabeledImage> read_cifar_batch(const std::filesystem::path& path, std::size_t records) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open CIFAR batch " + path.string());
  const std::size_t expected = records * kCifarRecordBytes;
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != expected) {
    throw FormatError(path.string() + ": expected " + std::to_string(expected) + " bytes, found " +
                      std::to_string(bytes.size()));
  }
  std::vector<LabeledImage> out;
  out.reserve(records);
  for (std::size_t r = 0; r < records; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw FormatError(path.string() + ": record " + std::to_string(r) + " has label byte " +
                        std::to_string(rec[0]) + " (corrupt file?)");
    }
    LabeledImage img{Tensor(Shape{3, 32, 32}), rec[0]};
    for (std::size_t i = 0; i < kCifarImageBytes; ++i) img.image[i] = rec[1 + i] / 255.0;
    out.push_back(std::move(img));
  }
  return out;
}

void write_cifar_records(std::ostream& out, const std::vector<LabeledImage>& images) {
  std::vector<char> rec(kCifarRecordBytes);
  for (const auto& img : images) {
    if (img.image.shape() != Shape{3, 32, 32}) throw ShapeError("CIFAR image must be [3, 32, 32]");
    if (img.label > 9) throw ContractError("CIFAR label must be < 10");
    rec[0] = static_cast<char>(img.label);
    for (std::size_t i = 0; i < kCifarImageBytes; ++i) {
      const double v = std::clamp(img.image[i], 0.0, 1.0);
      rec[1 + i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
    }
    out.write(rec.data(), static_cast<std::streamsize>(rec.size()));
  }
}

CifarData load_cifar10(const std::filesystem::path& dir) {
  CifarData data;
  for (int b = 1; b <= 5; ++b) {
    auto part = read_cifar_batch(dir / ("data_batch_" + std::to_string(b) + ".bin"));
    data.train.insert(data.train.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  data.test = read_cifar_batch(dir / "test_batch.bin");
  return data;
}

// ---------------------------------------------------------------------------
// Subsets and splits

std::vector<std::size_t> stratified_subset(const std::vector<std::size_t>& labels, double fraction,
                                           std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigError("subset fraction must be in (0, 1], got " + std::to_string(fraction));
  }
  const std::size_t n = labels.size();
  std::size_t classes = 0;
  for (std::size_t l : labels) classes = std::max(classes, l + 1);
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < n; ++i) by_class[labels[i]].push_back(i);

  struct Keyed {
    double key;
    std::size_t label, index;
  };
  std::vector<Keyed> keyed;
  keyed.reserve(n);
  std::mt19937_64 rng(seed);
  for (std::size_t c = 0; c < classes; ++c) {
    auto& members = by_class[c];
    std::shuffle(members.begin(), members.end(), rng);
    const double nc = static_cast<double>(members.size());
    for (std::size_t r = 0; r < members.size(); ++r) {
      keyed.push_back({(static_cast<double>(r) + 0.5) / nc, c, members[r]});
    }
  }
  std::sort(keyed.begin(), keyed.end(), [](const Keyed& a, const Keyed& b) {
    return a.key != b.key ? a.key < b.key : a.label < b.label;
  });
  // The small slack keeps e.g. 0.35 * 50000 at 17500.
  const auto take = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  std::vector<std::size_t> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.push_back(keyed[i].index);
  return out;
}

SplitIndices split_indices(std::size_t n, const SplitFractions& f, std::uint64_t seed) {
  if (f.train < 0 || f.val < 0 || f.test < 0 || std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be non-negative and sum to 1");
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(f.train * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(f.val * static_cast<double>(n))));
  SplitIndices s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
               order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic nodules

double ellipsoid_form(const NoduleParams& e, double z, double y, double x) {
  const double d[3] = {z - e.center[0], y - e.center[1], x - e.center[2]};
  double q = 0.0;
  for (int k = 0; k < 3; ++k) {
    // coordinate along axis k = column k of R
    const double t = d[0] * e.rotation[0 * 3 + k] + d[1] * e.rotation[1 * 3 + k] + d[2] * e.rotation[2 * 3 + k];
    q += t * t / (e.semi_axes[k] * e.semi_axes[k]);
  }
  return q;
}

void to_json(nlohmann::json& j, const SynthOptions& o) {
  j = nlohmann::json{{"extent", o.extent},
                     {"min_semi_axis", o.min_semi_axis},
                     {"max_semi_axis", o.max_semi_axis},
                     {"background_sigma", o.background_sigma},
                     {"background_amplitude", o.background_amplitude},
                     {"contrast", o.contrast},
                     {"noise", o.noise}};
}

void from_json(const nlohmann::json& j, SynthOptions& o) {
  o = SynthOptions{};
  o.extent = j.value("extent", o.extent);
  o.min_semi_axis = j.value("min_semi_axis", o.min_semi_axis);
  o.max_semi_axis = j.value("max_semi_axis", o.max_semi_axis);
  o.background_sigma = j.value("background_sigma", o.background_sigma);
  o.background_amplitude = j.value("background_amplitude", o.background_amplitude);
  o.contrast = j.value("contrast", o.contrast);
  o.noise = j.value("noise", o.noise);
}

namespace {

// Separable Gaussian blur of a cube, zero outside.
std::vector<double> blur3(const std::vector<double>& in, std::size_t e, double sigma) {
  if (sigma <= 0.0) return in;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> w(2 * radius + 1);
  double total = 0.0;
  for (int k = -radius; k <= radius; ++k) total += w[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
  for (double& v : w) v /= total;

  std::vector<double> a = in, b(in.size());
  const std::size_t strides[3] = {e * e, e, 1};
  for (std::size_t stride : strides) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      const auto pos = static_cast<int>((i / stride) % e);
      double s = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        const int q = pos + k;
        if (q < 0 || q >= static_cast<int>(e)) continue;
        s += w[k + radius] * a[i + static_cast<std::ptrdiff_t>(k) * static_cast<std::ptrdiff_t>(stride)];
      }
      b[i] = s;
    }
    std::swap(a, b);
  }
  return a;
}

void standardize(std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / static_cast<double>(v.size()));
  for (double& x : v) x = sd > 0.0 ? (x - mean) / sd : 0.0;
}

// Uniform random rotation from a uniform unit quaternion.
std::array<double, 9> random_rotation(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double u1 = u(rng), u2 = u(rng), u3 = u(rng);
  const double two_pi = 2.0 * std::numbers::pi;
  const double w = std::sqrt(1 - u1) * std::sin(two_pi * u2), x = std::sqrt(1 - u1) * std::cos(two_pi * u2);
  const double y = std::sqrt(u1) * std::sin(two_pi * u3), z = std::sqrt(u1) * std::cos(two_pi * u3);
  return {1 - 2 * (y * y + z * z), 2 * (x * y - z * w),     2 * (x * z + y * w),
          2 * (x * y + z * w),     1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
          2 * (x * z - y * w),     2 * (y * z + x * w),     1 - 2 * (x * x + y * y)};
}

}  // namespace

VolumeSample synth_nodule(std::uint64_t seed, std::size_t index, const SynthOptions& o) {
  if (o.extent < 2 * static_cast<std::size_t>(std::ceil(o.max_semi_axis)) + 4) {
    throw ConfigError("synthetic volume extent too small for the largest nodule");
  }
  if (!(o.min_semi_axis > 0.0 && o.min_semi_axis <= o.max_semi_axis)) {
    throw ConfigError("synthetic nodule semi-axis range is invalid");
  }
  std::seed_seq seq{seed, static_cast<std::uint64_t>(index)};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t e = o.extent, n = e * e * e;

  NoduleParams nodule;
  std::uniform_real_distribution<double> axis(o.min_semi_axis, o.max_semi_axis);
  for (double& a : nodule.semi_axes) a = axis(rng);
  nodule.rotation = random_rotation(rng);
  // Keep the whole ellipsoid (bounded by its largest semi-axis) inside.
  const double reach = *std::max_element(nodule.semi_axes.begin(), nodule.semi_axes.end()) + 1.0;
  std::uniform_real_distribution<double> centre(reach, static_cast<double>(e) - 1.0 - reach);
  for (double& c : nodule.center) c = centre(rng);

  std::vector<double> background(n);
  for (double& v : background) v = normal(rng);
  background = blur3(background, e, o.background_sigma);
  standardize(background);

  VolumeSample s{Tensor(Shape{1, e, e, e}), Tensor(Shape{1, e, e, e}), nodule};
  for (std::size_t z = 0, i = 0; z < e; ++z) {
    for (std::size_t y = 0; y < e; ++y) {
      for (std::size_t x = 0; x < e; ++x, ++i) {
        const bool inside = ellipsoid_form(nodule, static_cast<double>(z), static_cast<double>(y),
                                           static_cast<double>(x)) <= 1.0;
        s.mask[i] = inside ? 1.0 : 0.0;
        s.volume[i] = o.background_amplitude * background[i] + (inside ? o.contrast : 0.0) + o.noise * normal(rng);
      }
    }
  }
  std::vector<double> v(s.volume.values().begin(), s.volume.values().end());
  standardize(v);
  std::copy(v.begin(), v.end(), s.volume.values().begin());
  return s;
}

std::vector<VolumeSample> synth_nodule_dataset(std::size_t count, std::uint64_t seed, const SynthOptions& o) {
  if (count == 0) throw ConfigError("synthetic dataset needs count >= 1");
  std::vector<VolumeSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(synth_nodule(seed, i, o));
  return out;
}

namespace {

std::string numbered(const char* stem, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04zu.bin", stem, i);
  return buf;
}

}  // namespace

void save_volumes(const std::filesystem::path& dir, const std::vector<VolumeSample>& samples, std::uint64_t seed,
                  const SynthOptions& options) {
  std::filesystem::create_directories(dir);
  nlohmann::json nodules = nlohmann::json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    save_tensor(dir / numbered("volume", i), samples[i].volume);
    save_tensor(dir / numbered("mask", i), samples[i].mask);
    const auto& p = samples[i].nodule;
    nodules.push_back({{"center", p.center}, {"semi_axes", p.semi_axes}, {"rotation", p.rotation}});
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw FormatError("cannot write " + (dir / "manifest.json").string());
  out << nlohmann::json{{"count", samples.size()}, {"seed", seed}, {"options", options}, {"nodules", nodules}}.dump(1)
      << '\n';
}

std::vector<VolumeSample> load_volumes(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("no manifest.json in " + dir.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(dir.string() + "/manifest.json: " + e.what());
  }
  const auto count = m.at("count").get<std::size_t>();
  std::vector<VolumeSample> out;
  for (std::size_t i = 0; i < count; ++i) {
    VolumeSample s{load_tensor(dir / numbered("volume", i)), load_tensor(dir / numbered("mask", i)), {}};
    if (s.volume.shape() != s.mask.shape()) {
      throw FormatError("sample " + std::to_string(i) + ": volume " + s.volume.shape().str() + " vs mask " +
                        s.mask.shape().str());
    }
    for (double v : s.mask.values())
      if (v != 0.0 && v != 1.0) throw FormatError("sample " + std::to_string(i) + ": mask is not binary");
    if (m.contains("nodules")) {
      const auto& p = m["nodules"].at(i);
      s.nodule.center = p.at("center").get<std::array<double, 3>>();
      s.nodule.semi_axes = p.at("semi_axes").get<std::array<double, 3>>();
      s.nodule.rotation = p.at("rotation").get<std::array<double, 9>>();
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Toy gratings

std::vector<LabeledImage> toy_gratings(std::size_t count, std::uint64_t seed, const ToyOptions& o) {
  if (o.classes < 2 || o.extent < 4) throw ConfigError("toy task needs >= 2 classes and extent >= 4");
  std::vector<LabeledImage> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::seed_seq seq{seed, static_cast<std::uint64_t>(i), std::uint64_t{0x7047}};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t label = i % o.classes;
    const double theta = std::numbers::pi * static_cast<double>(label) / static_cast<double>(o.classes);
    const double freq = 0.12 + 0.1 * u(rng);
    const double phase = 2.0 * std::numbers::pi * u(rng);
    const double c = std::cos(theta), s = std::sin(theta);
    LabeledImage img{Tensor(Shape{3, o.extent, o.extent}), label};
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double gain = 0.6 + 0.4 * u(rng);
      for (std::size_t y = 0; y < o.extent; ++y) {
        for (std::size_t x = 0; x < o.extent; ++x) {
          const double t = static_cast<double>(x) * c + static_cast<double>(y) * s;
          const double v = 0.5 + 0.3 * gain * std::sin(2.0 * std::numbers::pi * freq * t + phase) +
                           o.noise * normal(rng);
          img.image[(ch * o.extent + y) * o.extent + x] = std::clamp(v, 0.0, 1.0);
        }
      }
    }
    out.push_back(std::move(img));
  }
  return out;
}

Dataset to_dataset(const std::vector<LabeledImage>& images) {
  Dataset d;
  d.task = TaskKind::kClassification;
  d.items.reserve(images.size());
  for (const auto& img : images) d.items.push_back({img.image, img.label, Tensor()});
  return d;
}

Dataset to_dataset(const std::vector<VolumeSample>& volumes) {
  Dataset d;
  d.task = TaskKind::kSegmentation;
  d.items.reserve(volumes.size());
  for (const auto& v : volumes) d.items.push_back({v.volume, 0, v.mask});
  return d;
}

}  // namespace fsnet
