#include "bnnq/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>

#include "bnnq/errors.hpp"

namespace bnnq {

Dataset Dataset::head(Index n) const {
  Dataset d;
  d.channels = channels;
  d.height = height;
  d.width = width;
  const Index k = std::min(n, size());
  d.pixels.assign(pixels.begin(), pixels.begin() + k * image_size());
  d.labels.assign(labels.begin(), labels.begin() + k);
  return d;
}

namespace {

std::vector<std::uint8_t> read_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("cannot open " + file.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& file, std::span<const std::uint8_t> bytes) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("cannot write " + file.string());
}

void append(Dataset& dst, const Dataset& src) {
  dst.channels = src.channels;
  dst.height = src.height;
  dst.width = src.width;
  dst.pixels.insert(dst.pixels.end(), src.pixels.begin(), src.pixels.end());
  dst.labels.insert(dst.labels.end(), src.labels.begin(), src.labels.end());
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

}  // namespace

// ---------------------------------------------------------------------------
// CIFAR-10

Dataset load_cifar10_batch(const fs::path& file) {
  const auto bytes = read_file(file);
  const auto expected = static_cast<std::size_t>(kCifarRecordBytes * kCifarRecordsPerFile);
  if (bytes.size() != expected)
    throw FormatError(file.string() + ": expected " + std::to_string(expected) + " bytes, found " +
                      std::to_string(bytes.size()));
  Dataset d;
  d.channels = 3;
  d.height = 32;
  d.width = 32;
  d.pixels.resize(static_cast<std::size_t>(kCifarRecordsPerFile * 3072));
  d.labels.resize(static_cast<std::size_t>(kCifarRecordsPerFile));
  for (Index r = 0; r < kCifarRecordsPerFile; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] >= kNumClasses)
      throw FormatError(file.string() + ": corrupt record " + std::to_string(r) + " with label " +
                            std::to_string(rec[0]),
                        r * kCifarRecordBytes);
    d.labels[static_cast<std::size_t>(r)] = rec[0];
    std::copy_n(rec + 1, 3072, d.pixels.data() + r * 3072);
  }
  return d;
}

DatasetSplit load_cifar10(const fs::path& dir) {
  fs::path root = dir;
  if (!fs::exists(root / "data_batch_1.bin") && fs::exists(root / "cifar-10-batches-bin"))
    root /= "cifar-10-batches-bin";
  DatasetSplit split;
  for (int i = 1; i <= 5; ++i) append(split.train, load_cifar10_batch(root / ("data_batch_" + std::to_string(i) + ".bin")));
  split.test = load_cifar10_batch(root / "test_batch.bin");
  return split;
}

void write_cifar10_batch(const fs::path& file, const Dataset& d) {
  if (d.channels != 3 || d.height != 32 || d.width != 32)
    throw ShapeError("CIFAR-10 records are 3x32x32");
  std::vector<std::uint8_t> bytes;
  bytes.reserve(static_cast<std::size_t>(d.size() * kCifarRecordBytes));
  for (Index r = 0; r < d.size(); ++r) {
    bytes.push_back(d.labels[static_cast<std::size_t>(r)]);
    const auto img = d.image(r);
    bytes.insert(bytes.end(), img.begin(), img.end());
  }
  write_file(file, bytes);
}

// ---------------------------------------------------------------------------
// MNIST IDX

Dataset load_mnist_pair(const fs::path& images, const fs::path& labels) {
  const auto ib = read_file(images);
  const auto lb = read_file(labels);
  if (ib.size() < 16) throw FormatError(images.string() + ": truncated header", static_cast<long long>(ib.size()));
  if (lb.size() < 8) throw FormatError(labels.string() + ": truncated header", static_cast<long long>(lb.size()));
  if (read_be32(ib, 0) != 0x00000803u) throw FormatError(images.string() + ": bad image magic", 0);
  if (read_be32(lb, 0) != 0x00000801u) throw FormatError(labels.string() + ": bad label magic", 0);
  const std::uint32_t n = read_be32(ib, 4), rows = read_be32(ib, 8), cols = read_be32(ib, 12);
  const std::uint32_t nl = read_be32(lb, 4);
  if (n != nl) throw FormatError("image count " + std::to_string(n) + " != label count " + std::to_string(nl));
  if (rows == 0 || cols == 0) throw FormatError(images.string() + ": zero image dimension", 8);
  const std::size_t need = 16 + std::size_t{n} * rows * cols;
  if (ib.size() != need)
    throw FormatError(images.string() + ": expected " + std::to_string(need) + " bytes, found " +
                      std::to_string(ib.size()));
  if (lb.size() != 8 + std::size_t{n})
    throw FormatError(labels.string() + ": expected " + std::to_string(8 + std::size_t{n}) + " bytes");
  Dataset d;
  d.channels = 1;
  d.height = rows;
  d.width = cols;
  d.pixels.assign(ib.begin() + 16, ib.end());
  d.labels.assign(lb.begin() + 8, lb.end());
  for (std::size_t i = 0; i < d.labels.size(); ++i)
    if (d.labels[i] >= kNumClasses)
      throw FormatError(labels.string() + ": corrupt label at record " + std::to_string(i),
                        static_cast<long long>(8 + i));
  return d;
}

DatasetSplit load_mnist(const fs::path& dir) {
  return {load_mnist_pair(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte"),
          load_mnist_pair(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte")};
}

void write_mnist_pair(const fs::path& images, const fs::path& labels, const Dataset& d) {
  if (d.channels != 1) throw ShapeError("IDX images are single channel");
  std::vector<std::uint8_t> ib, lb;
  put_be32(ib, 0x00000803u);
  put_be32(ib, static_cast<std::uint32_t>(d.size()));
  put_be32(ib, static_cast<std::uint32_t>(d.height));
  put_be32(ib, static_cast<std::uint32_t>(d.width));
  ib.insert(ib.end(), d.pixels.begin(), d.pixels.end());
  put_be32(lb, 0x00000801u);
  put_be32(lb, static_cast<std::uint32_t>(d.size()));
  lb.insert(lb.end(), d.labels.begin(), d.labels.end());
  write_file(images, ib);
  write_file(labels, lb);
}

// ---------------------------------------------------------------------------
// Synthetic CIFAR-shaped data

namespace {

constexpr Index kSynC = 3, kSynH = 32, kSynW = 32, kSynPlane = kSynH * kSynW;

using Prototype = std::array<float, kSynC * kSynPlane>;

std::vector<Prototype> make_prototypes(std::uint64_t seed) {
  std::mt19937_64 rng = stream_rng(seed, 0, 0x5150);
  std::uniform_int_distribution<int> freq(1, 4);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> amp(0.4, 1.0);
  std::uniform_real_distribution<double> pos(6.0, 26.0);
  std::vector<Prototype> protos(kNumClasses);
  for (auto& p : protos) {
    const double by = pos(rng), bx = pos(rng);
    for (Index c = 0; c < kSynC; ++c) {
      double fy[3], fx[3], ph[3], a[3];
      for (int j = 0; j < 3; ++j) {
        fy[j] = freq(rng);
        fx[j] = freq(rng) * (j % 2 ? -1 : 1);
        ph[j] = phase(rng);
        a[j] = amp(rng);
      }
      const double blob = amp(rng) * (c == 1 ? -1.5 : 1.5);
      for (Index y = 0; y < kSynH; ++y)
        for (Index x = 0; x < kSynW; ++x) {
          double v = 0;
          for (int j = 0; j < 3; ++j)
            v += a[j] * std::sin(2.0 * std::numbers::pi * (fy[j] * y + fx[j] * x) / 32.0 + ph[j]);
          const double r2 = (y - by) * (y - by) + (x - bx) * (x - bx);
          v += blob * std::exp(-r2 / 18.0);
          p[static_cast<std::size_t>(c * kSynPlane + y * kSynW + x)] = static_cast<float>(v / 2.0);
        }
    }
  }
  return protos;
}

Dataset synthesize(const std::vector<Prototype>& protos, std::uint64_t seed, std::uint32_t stream, Index count) {
  Dataset d;
  d.channels = kSynC;
  d.height = kSynH;
  d.width = kSynW;
  d.pixels.resize(static_cast<std::size_t>(count * kSynC * kSynPlane));
  d.labels.resize(static_cast<std::size_t>(count));
  std::mt19937_64 rng = stream_rng(seed, 0, stream);
  std::uniform_int_distribution<int> shift(-3, 3);
  std::uniform_int_distribution<int> other(0, kNumClasses - 1);
  std::uniform_real_distribution<double> gain(0.7, 1.3);
  std::uniform_real_distribution<double> blend(0.0, 0.6);
  std::normal_distribution<float> noise(0.0f, 0.45f);
  for (Index i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % kNumClasses);
    const int mix = other(rng);
    const int dy = shift(rng), dx = shift(rng);
    const bool mirror = (rng() & 1u) != 0;
    const double w = blend(rng);
    d.labels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(label);
    std::uint8_t* out = d.pixels.data() + i * kSynC * kSynPlane;
    const auto& a = protos[static_cast<std::size_t>(label)];
    const auto& b = protos[static_cast<std::size_t>(mix)];
    for (Index c = 0; c < kSynC; ++c) {
      const double g = gain(rng);
      for (Index y = 0; y < kSynH; ++y)
        for (Index x = 0; x < kSynW; ++x) {
          const Index sy = (y + dy + kSynH) % kSynH;
          Index sx = (x + dx + kSynW) % kSynW;
          if (mirror) sx = kSynW - 1 - sx;
          const std::size_t k = static_cast<std::size_t>(c * kSynPlane + sy * kSynW + sx);
          const double v = g * ((1.0 - w) * a[k] + w * b[k]) + noise(rng);
          out[c * kSynPlane + y * kSynW + x] =
              static_cast<std::uint8_t>(std::clamp(std::lround(128.0 + 70.0 * v), 0L, 255L));
        }
    }
  }
  // Interleaved labels would make the sequential eval order trivially
  // structured; shuffle records once with the same stream.
  std::vector<Index> perm(static_cast<std::size_t>(count));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  Dataset s = d;
  for (Index i = 0; i < count; ++i) {
    const Index src = perm[static_cast<std::size_t>(i)];
    s.labels[static_cast<std::size_t>(i)] = d.labels[static_cast<std::size_t>(src)];
    std::copy_n(d.pixels.data() + src * kSynC * kSynPlane, kSynC * kSynPlane, s.pixels.data() + i * kSynC * kSynPlane);
  }
  return s;
}

}  // namespace

DatasetSplit make_synthetic_cifar(const SyntheticOptions& opts) {
  const auto protos = make_prototypes(opts.seed);
  return {synthesize(protos, opts.seed, 1, opts.train), synthesize(protos, opts.seed, 2, opts.test)};
}

void write_synthetic_cifar10(const fs::path& dir, const SyntheticOptions& opts) {
  if (opts.train != 5 * kCifarRecordsPerFile || opts.test != kCifarRecordsPerFile)
    throw ConfigError("CIFAR-10 layout needs 50000 train and 10000 test records");
  const DatasetSplit split = make_synthetic_cifar(opts);
  for (int b = 0; b < 5; ++b) {
    Dataset part;
    part.channels = 3;
    part.height = 32;
    part.width = 32;
    const auto per = static_cast<std::size_t>(kCifarRecordsPerFile);
    part.labels.assign(split.train.labels.begin() + b * per, split.train.labels.begin() + (b + 1) * per);
    part.pixels.assign(split.train.pixels.begin() + b * per * 3072, split.train.pixels.begin() + (b + 1) * per * 3072);
    write_cifar10_batch(dir / ("data_batch_" + std::to_string(b + 1) + ".bin"), part);
  }
  write_cifar10_batch(dir / "test_batch.bin", split.test);
}

// ---------------------------------------------------------------------------
// Statistics

ChannelStats compute_stats(const Dataset& d) {
  if (d.size() == 0) throw DomainError("cannot compute statistics of an empty dataset");
  ChannelStats s;
  const Index plane = d.height * d.width;
  for (Index c = 0; c < d.channels; ++c) {
    double sum = 0, sq = 0;
    for (Index i = 0; i < d.size(); ++i) {
      const std::uint8_t* p = d.pixels.data() + i * d.image_size() + c * plane;
      for (Index k = 0; k < plane; ++k) {
        const double v = p[k] / 255.0;
        sum += v;
        sq += v * v;
      }
    }
    const double n = static_cast<double>(d.size() * plane);
    const double mean = sum / n;
    s.mean.push_back(mean);
    s.stddev.push_back(std::sqrt(std::max(sq / n - mean * mean, 1e-12)));
  }
  return s;
}

void save_stats(const fs::path& file, const ChannelStats& s) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file);
  out << std::setprecision(17);
  for (std::size_t i = 0; i < s.mean.size(); ++i) out << (i ? " " : "") << s.mean[i];
  out << "\n";
  for (std::size_t i = 0; i < s.stddev.size(); ++i) out << (i ? " " : "") << s.stddev[i];
  out << "\n";
  if (!out) throw FormatError("cannot write " + file.string());
}

ChannelStats load_stats(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw FormatError("cannot open " + file.string());
  ChannelStats s;
  std::string line;
  auto parse_line = [&](std::vector<double>& dst) {
    if (!std::getline(in, line)) throw FormatError(file.string() + ": missing line");
    std::istringstream ls(line);
    double v;
    while (ls >> v) dst.push_back(v);
  };
  parse_line(s.mean);
  parse_line(s.stddev);
  if (s.mean.empty() || s.mean.size() != s.stddev.size())
    throw FormatError(file.string() + ": mean and std counts differ");
  for (double v : s.stddev)
    if (!(v > 0)) throw FormatError(file.string() + ": non-positive standard deviation");
  return s;
}

ChannelStats load_or_compute_stats(const Dataset& train, const fs::path& sidecar) {
  if (fs::exists(sidecar)) {
    ChannelStats s = load_stats(sidecar);
    if (static_cast<Index>(s.mean.size()) == train.channels) return s;
  }
  ChannelStats s = compute_stats(train);
  save_stats(sidecar, s);
  return s;
}

// ---------------------------------------------------------------------------
// Augmentation and batching

AugmentDraw draw_augment(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> off(0, 2 * kAugmentPad);
  AugmentDraw d;
  d.offset_y = off(rng);
  d.offset_x = off(rng);
  d.flip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
  return d;
}

void augment_into(std::span<const std::uint8_t> image, Index channels, Index height, Index width,
                  const AugmentDraw& draw, const ChannelStats& stats, float* out) {
  for (Index c = 0; c < channels; ++c) {
    const float mean = static_cast<float>(stats.mean[static_cast<std::size_t>(c)]);
    const float inv = static_cast<float>(1.0 / stats.stddev[static_cast<std::size_t>(c)]);
    const std::uint8_t* src = image.data() + c * height * width;
    float* dst = out + c * height * width;
    for (Index y = 0; y < height; ++y) {
      const Index sy = y + draw.offset_y - kAugmentPad;
      for (Index x = 0; x < width; ++x) {
        const Index cx = draw.flip ? width - 1 - x : x;
        const Index sx = cx + draw.offset_x - kAugmentPad;
        const bool inside = sy >= 0 && sy < height && sx >= 0 && sx < width;
        const float raw = inside ? static_cast<float>(src[sy * width + sx]) / 255.0f : 0.0f;
        dst[y * width + x] = (raw - mean) * inv;
      }
    }
  }
}

void normalize_into(std::span<const std::uint8_t> image, Index channels, Index height, Index width,
                    const ChannelStats& stats, float* out) {
  augment_into(image, channels, height, width, AugmentDraw{}, stats, out);
}

Tensor<float> augment(const Dataset& d, Index i, std::mt19937_64& rng, const ChannelStats& stats) {
  Tensor<float> t({d.channels, d.height, d.width});
  augment_into(d.image(i), d.channels, d.height, d.width, draw_augment(rng), stats, t.data());
  return t;
}

Tensor<float> normalize(const Dataset& d, Index i, const ChannelStats& stats) {
  Tensor<float> t({d.channels, d.height, d.width});
  normalize_into(d.image(i), d.channels, d.height, d.width, stats, t.data());
  return t;
}

std::mt19937_64 stream_rng(std::uint64_t seed, int epoch, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), stream};
  return std::mt19937_64(seq);
}

std::vector<std::vector<Index>> batch_stream(Index count, Index batch, std::uint64_t seed, int epoch, bool training) {
  if (batch < 1) throw ConfigError("batch size must be >= 1");
  std::vector<Index> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), Index{0});
  if (training) {
    std::mt19937_64 rng = stream_rng(seed, epoch, 0x0b5e);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(rng)]);
    }
  }
  std::vector<std::vector<Index>> batches;
  for (Index start = 0; start < count; start += batch) {
    const Index end = std::min(count, start + batch);
    if (training && end - start < batch) break;
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

Batch make_batch(const Dataset& d, std::span<const Index> indices, const ChannelStats& stats,
                 std::mt19937_64* aug_rng) {
  if (indices.empty()) throw DomainError("empty batch");
  Batch b{Tensor<float>({static_cast<Index>(indices.size()), d.channels, d.height, d.width}), {}};
  b.labels.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Index i = indices[k];
    float* out = b.images.data() + static_cast<Index>(k) * d.image_size();
    if (aug_rng)
      augment_into(d.image(i), d.channels, d.height, d.width, draw_augment(*aug_rng), stats, out);
    else
      normalize_into(d.image(i), d.channels, d.height, d.width, stats, out);
    b.labels.push_back(d.labels[static_cast<std::size_t>(i)]);
  }
  return b;
}

}  // namespace bnnq
