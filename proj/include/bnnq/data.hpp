#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bnnq/tensor.hpp"

namespace bnnq {

namespace fs = std::filesystem;

/// Raw 8-bit images stored record by record in CHW order.
struct Dataset {
  Index channels = 0;
  Index height = 0;
  Index width = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint8_t> labels;

  Index size() const { return static_cast<Index>(labels.size()); }
  Index image_size() const { return channels * height * width; }
  std::span<const std::uint8_t> image(Index i) const {
    return {pixels.data() + i * image_size(), static_cast<std::size_t>(image_size())};
  }
  /// First min(n, size()) records.
  Dataset head(Index n) const;
};

struct DatasetSplit {
  Dataset train;
  Dataset test;
};

inline constexpr Index kCifarRecordBytes = 3073;
inline constexpr Index kCifarRecordsPerFile = 10000;
inline constexpr int kNumClasses = 10;

/// One CIFAR-10 binary batch: exactly 10000 records of 1 label byte followed
/// by 1024 R, 1024 G and 1024 B bytes.
Dataset load_cifar10_batch(const fs::path& file);
/// data_batch_1..5.bin and test_batch.bin from `dir` (or its
/// cifar-10-batches-bin subdirectory).
DatasetSplit load_cifar10(const fs::path& dir);
void write_cifar10_batch(const fs::path& file, const Dataset& d);

/// IDX pair: images magic 0x00000803 (N, rows, cols), labels magic 0x00000801.
Dataset load_mnist_pair(const fs::path& images, const fs::path& labels);
/// train-images-idx3-ubyte etc. from `dir`.
DatasetSplit load_mnist(const fs::path& dir);
void write_mnist_pair(const fs::path& images, const fs::path& labels, const Dataset& d);

struct SyntheticOptions {
  std::uint64_t seed = 2019;
  Index train = 50000;
  Index test = 10000;
};

/// Class-conditional 3x32x32 images (per-class textured prototypes with random
/// shifts, gains, cross-class blending and pixel noise). A stand-in with the
/// CIFAR-10 geometry for environments without the real dataset.
DatasetSplit make_synthetic_cifar(const SyntheticOptions& opts);
/// Write a synthetic set in CIFAR-10 binary layout (train must be 50000 and
/// test 10000 so every batch file has the standard size).
void write_synthetic_cifar10(const fs::path& dir, const SyntheticOptions& opts);

// ---------------------------------------------------------------------------

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
  friend bool operator==(const ChannelStats&, const ChannelStats&) = default;
};

/// Per-channel mean and standard deviation of raw [0, 1] pixels.
ChannelStats compute_stats(const Dataset& d);
/// Plain text: one line of means, one line of standard deviations.
void save_stats(const fs::path& file, const ChannelStats& s);
ChannelStats load_stats(const fs::path& file);
/// Read the sidecar when present and matching the channel count; otherwise
/// compute from `train` and write it.
ChannelStats load_or_compute_stats(const Dataset& train, const fs::path& sidecar);

// ---------------------------------------------------------------------------

inline constexpr int kAugmentPad = 4;

/// Crop offset into the zero-padded image (0..2*pad per axis) and flip flag.
struct AugmentDraw {
  int offset_y = kAugmentPad;
  int offset_x = kAugmentPad;
  bool flip = false;
};

AugmentDraw draw_augment(std::mt19937_64& rng);

/// Zero-pad by kAugmentPad, crop back to H x W at the drawn offset, mirror
/// columns when flipped, then normalize each channel with `stats`.
void augment_into(std::span<const std::uint8_t> image, Index channels, Index height, Index width,
                  const AugmentDraw& draw, const ChannelStats& stats, float* out);
void normalize_into(std::span<const std::uint8_t> image, Index channels, Index height, Index width,
                    const ChannelStats& stats, float* out);

Tensor<float> augment(const Dataset& d, Index i, std::mt19937_64& rng, const ChannelStats& stats);
Tensor<float> normalize(const Dataset& d, Index i, const ChannelStats& stats);

/// Deterministic generator for (seed, epoch, stream); every random draw in a
/// run comes from one of these.
std::mt19937_64 stream_rng(std::uint64_t seed, int epoch, std::uint32_t stream);

/// Training: a (seed, epoch)-seeded permutation cut into full batches (the
/// short tail is dropped). Eval: sequential order, short tail kept.
std::vector<std::vector<Index>> batch_stream(Index count, Index batch, std::uint64_t seed, int epoch, bool training);

struct Batch {
  Tensor<float> images;  // (N, C, H, W)
  std::vector<int> labels;
};

/// Assemble a batch; augments when `aug_rng` is non-null, else only normalizes.
Batch make_batch(const Dataset& d, std::span<const Index> indices, const ChannelStats& stats,
                 std::mt19937_64* aug_rng);

}  // namespace bnnq
