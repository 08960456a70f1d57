#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bnnq/tensor.hpp"

namespace bnnq {

/// Little-endian byte sink, independent of host byte order.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void i32(std::int32_t v) { put(static_cast<std::uint32_t>(v), 4); }
  void i64(std::int64_t v) { put(static_cast<std::uint64_t>(v), 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  /// u32 length followed by the characters.
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void patch_u64(std::size_t at, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_[at + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v >> (8 * i));
  }

  std::size_t size() const { return buf_.size(); }
  const std::vector<std::uint8_t>& data() const { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked little-endian reader. Overruns raise FormatError carrying
/// the absolute offset (base + position).
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes, std::size_t base = 0) : bytes_(bytes), base_(base) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    require(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() {
    const std::uint32_t n = u32();
    auto b = bytes(n);
    return {b.begin(), b.end()};
  }

  std::size_t position() const { return pos_; }
  std::size_t absolute() const { return base_ + pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  bool done() const { return pos_ == bytes_.size(); }
  void seek(std::size_t pos) {
    if (pos > bytes_.size()) fail("seek past end");
    pos_ = pos;
  }
  [[noreturn]] void fail(const std::string& what) const;

 private:
  void require(std::size_t n) const {
    if (n > bytes_.size() - pos_) fail("truncated data: need " + std::to_string(n) + " bytes");
  }
  std::uint64_t get(int n) {
    require(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t{bytes_[pos_ + static_cast<std::size_t>(i)]} << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t base_;
  std::size_t pos_ = 0;
};

/// rank u32, dims u32 each, then float32 payload.
void write_tensor(ByteWriter& w, const Tensor<float>& t);
Tensor<float> read_tensor(ByteReader& r);

struct Segment {
  std::string name;
  std::vector<std::uint8_t> payload;
};

/// Container: 4-byte magic, u16 version, u32 segment count, then per segment
/// u16 name length, name bytes, u64 payload length, payload.
std::vector<std::uint8_t> encode_segments(const char (&magic)[5], std::uint16_t version,
                                          const std::vector<Segment>& segments);
std::vector<Segment> decode_segments(std::span<const std::uint8_t> bytes, const char (&magic)[5],
                                     std::uint16_t version);

std::vector<std::uint8_t> read_binary_file(const std::filesystem::path& file);
void write_binary_file(const std::filesystem::path& file, std::span<const std::uint8_t> bytes);

}  // namespace bnnq
