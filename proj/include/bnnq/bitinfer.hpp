#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "bnnq/data.hpp"
#include "bnnq/network.hpp"

namespace bnnq {

inline constexpr Index kWordBits = 64;
inline constexpr Index words_for(Index bits) { return (bits + kWordBits - 1) / kWordBits; }

/// Bit i of word i/64 (LSB first) is 1 for +1 and 0 for -1. Bits past
/// `bits` are always 0.
struct BitRow {
  std::vector<std::uint64_t> words;
  Index bits = 0;
  friend bool operator==(const BitRow&, const BitRow&) = default;
};

/// Entries must be exactly -1 or +1 (DomainError otherwise).
BitRow pack(std::span<const float> signs);
std::vector<float> unpack(const BitRow& row);
/// One row per index of the leading axis.
std::vector<BitRow> pack_rows(const Tensor<float>& signs);

/// Sum of a_i * b_i over the +-1 vectors: n - 2 * popcount(a ^ b).
int xnor_dot(const BitRow& a, const BitRow& b);
/// Raw form over the first n bits of words_for(n) words.
int xnor_dot(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b, Index n);

// ---------------------------------------------------------------------------

enum class PackedKind : std::uint8_t {
  FloatConvSign = 1,   // float conv, batchnorm, sign -> bits
  MaxPoolBits = 2,     // OR over the window
  BinConvSign = 3,     // xnor conv, integer threshold -> bits
  BinLinearSign = 4,   // xnor fully connected, integer threshold -> bits
  FloatLinearOut = 5,  // +-1 features -> float logits
};

/// Output bit as a function of the integer pre-activation y = sum q * x.
enum class ThresholdMode : std::uint8_t { Never = 0, Always = 1, AtLeast = 2, AtMost = 3 };

struct Threshold {
  ThresholdMode mode = ThresholdMode::Never;
  std::int32_t t = 0;
  bool fire(std::int32_t y) const {
    switch (mode) {
      case ThresholdMode::Never: return false;
      case ThresholdMode::Always: return true;
      case ThresholdMode::AtLeast: return y >= t;
      case ThresholdMode::AtMost: return y <= t;
    }
    return false;
  }
  friend bool operator==(const Threshold&, const Threshold&) = default;
};

struct PackedLayer {
  PackedKind kind = PackedKind::MaxPoolBits;
  Index in_c = 0, in_h = 1, in_w = 1;
  Index out_c = 0, out_h = 1, out_w = 1;
  Index kernel = 0, stride = 1, pad = 0;

  // Float edge layers: (out, in, k, k) or (out, in) weights and a bias.
  Tensor<float> weight, bias;
  // Eval-mode batchnorm affine (identity when the layer had none).
  std::vector<float> bn_scale, bn_shift;

  // Binary layers. Weight word k of output f lives at wbits[k * out_c + f];
  // patch bits are ordered (ky, kx, c), flattened features (h, w, c).
  Index fan_bits = 0, fan_words = 0;
  std::vector<std::uint64_t> wbits;
  std::vector<float> alpha;
  /// t(y) = a * y + b with a = alpha * gamma / sqrt(var + eps) and
  /// b = beta_bn - gamma * mean / sqrt(var + eps).
  std::vector<float> fused_a, fused_b;
  std::vector<Threshold> thresholds;

  friend bool operator==(const PackedLayer&, const PackedLayer&) = default;
};

struct PackedModel {
  Shape input_shape;  // (C, H, W)
  Index num_classes = 0;
  std::vector<PackedLayer> layers;

  std::vector<std::uint8_t> to_bytes() const;
  /// Validates every header, geometry and payload; FormatError with offset.
  static PackedModel from_bytes(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& file) const;
  static PackedModel load(const std::filesystem::path& file);
  friend bool operator==(const PackedModel&, const PackedModel&) = default;
};

inline constexpr std::uint16_t kPackedVersion = 1;

/// Fold scales and batchnorm into integer thresholds and pack the binary
/// weights. Accepted chains: fconv [bn] act, bconv [bn] act, blin [bn] act,
/// pool after act, flat, and a final flin. Anything else, unbinarized
/// activations, or batchnorm without running statistics raises StateError.
PackedModel fold_and_export(const Network<float>& net);

/// (N, C, H, W) normalized images -> (N, classes) logits.
Tensor<float> infer(const PackedModel& pm, const Tensor<float>& images);
/// Argmax labels over `d` in sequential batches of `batch`.
std::vector<int> predict(const PackedModel& pm, const Dataset& d, const ChannelStats& stats, Index batch = 100);

// ---------------------------------------------------------------------------
// Dense float reference for the binary layers, rebuilt from a PackedModel

struct BenchResult {
  Index batch = 0;
  int reps = 0;
  double packed_ms = 0;  // per batch, binary layers only
  double dense_ms = 0;
  double speedup = 0;
  bool outputs_match = false;
};

/// Time the binary layers of `pm` in both engines on random +-1 inputs of
/// the right shapes and check that both produce the same bits.
BenchResult bench_binary_layers(const PackedModel& pm, Index batch, int reps, std::uint64_t seed);

}  // namespace bnnq
