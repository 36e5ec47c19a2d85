#pragma once

// Datasets: CIFAR-10 binary batches, a synthetic 3D nodule generator standing
// in for clinical CT volumes, and a small synthetic image classification task.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "json.hpp"

#include "fsnet/tensor.hpp"

namespace fsnet {

enum class TaskKind { kClassification, kSegmentation };

// One training example; `mask` is only used for segmentation.
struct Example {
  Tensor input;
  std::size_t label = 0;
  Tensor mask;
};

struct Dataset {
  TaskKind task = TaskKind::kClassification;
  std::vector<Example> items;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
  Dataset select(const std::vector<std::size_t>& indices) const;
};

// ---------------------------------------------------------------------------
// CIFAR-10

struct LabeledImage {
  Tensor image;  // [3, 32, 32], values in [0, 1]
  std::size_t label = 0;
};

inline constexpr std::size_t kCifarImageBytes = 3 * 32 * 32;
inline constexpr std::size_t kCifarRecordBytes = 1 + kCifarImageBytes;
inline constexpr std::size_t kCifarRecordsPerFile = 10000;
inline constexpr std::size_t kCifarFileBytes = kCifarRecordBytes * kCifarRecordsPerFile;  // 30,730,000

// Parses a batch file that must hold exactly `records` records.
std::vector<LabeledImage> read_cifar_batch(const std::filesystem::path& path,
                                           std::size_t records = kCifarRecordsPerFile);
// Inverse of the parser; pixels are rounded to the nearest byte.
void write_cifar_records(std::ostream& out, const std::vector<LabeledImage>& images);

struct CifarData {
  std::vector<LabeledImage> train;  // data_batch_1..5.bin
  std::vector<LabeledImage> test;   // test_batch.bin
};

CifarData load_cifar10(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Subsets and splits

// Class-stratified seeded sample of ceil(fraction * n) indices. Within a class
// the order is a seeded shuffle; classes are interleaved by relative rank, so
// a smaller fraction always yields a prefix of a larger one.
std::vector<std::size_t> stratified_subset(const std::vector<std::size_t>& labels, double fraction,
                                           std::uint64_t seed);

struct SplitFractions {
  double train = 0.5, val = 0.25, test = 0.25;
};

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

// Seeded disjoint partition of [0, n). Train and val counts are rounded, test
// takes the remainder.
SplitIndices split_indices(std::size_t n, const SplitFractions& fractions, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic nodules

struct NoduleParams {
  std::array<double, 3> center{};     // voxel coordinates (z, y, x)
  std::array<double, 3> semi_axes{};  // along the rotated axes
  std::array<double, 9> rotation{};   // row-major, columns are the ellipsoid axes
};

// (p - c)^T R diag(1/a^2) R^T (p - c); <= 1 inside.
double ellipsoid_form(const NoduleParams& nodule, double z, double y, double x);

struct SynthOptions {
  std::size_t extent = 40;
  double min_semi_axis = 3.0, max_semi_axis = 8.0;
  double background_sigma = 2.0;  // smoothing of the background noise, voxels
  double background_amplitude = 0.3;
  double contrast = 1.0;
  double noise = 0.2;
};

void to_json(nlohmann::json& j, const SynthOptions& o);
void from_json(const nlohmann::json& j, SynthOptions& o);

struct VolumeSample {
  Tensor volume;  // [1, E, E, E], zero mean and unit variance
  Tensor mask;    // [1, E, E, E], 0/1
  NoduleParams nodule;
};

// Sample i depends only on (seed, i).
VolumeSample synth_nodule(std::uint64_t seed, std::size_t index, const SynthOptions& options = {});
std::vector<VolumeSample> synth_nodule_dataset(std::size_t count, std::uint64_t seed,
                                               const SynthOptions& options = {});

// manifest.json plus volume_XXXX.bin / mask_XXXX.bin tensor dumps.
void save_volumes(const std::filesystem::path& dir, const std::vector<VolumeSample>& samples,
                  std::uint64_t seed, const SynthOptions& options);
// Also accepts hand-made directories (manifest with only a "count" entry).
std::vector<VolumeSample> load_volumes(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Toy classification: noisy oriented gratings, one orientation per class.

struct ToyOptions {
  std::size_t extent = 16;
  std::size_t classes = 10;
  double noise = 0.35;
};

std::vector<LabeledImage> toy_gratings(std::size_t count, std::uint64_t seed, const ToyOptions& options = {});

Dataset to_dataset(const std::vector<LabeledImage>& images);
Dataset to_dataset(const std::vector<VolumeSample>& volumes);

}  // namespace fsnet
