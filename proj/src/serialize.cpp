#include "bnnq/serialize.hpp"

#include <fstream>

#include "bnnq/errors.hpp"

namespace bnnq {

void ByteReader::fail(const std::string& what) const {
  throw FormatError(what, static_cast<long long>(base_ + pos_));
}

void write_tensor(ByteWriter& w, const Tensor<float>& t) {
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (Index d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (Index i = 0; i < t.size(); ++i) w.f32(t[i]);
}

Tensor<float> read_tensor(ByteReader& r) {
  const std::uint32_t rank = r.u32();
  if (rank > 8) r.fail("implausible tensor rank " + std::to_string(rank));
  Shape shape;
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint32_t d = r.u32();
    if (d == 0) r.fail("zero tensor dimension");
    shape.push_back(d);
    count *= d;
    if (count * 4 > r.remaining()) r.fail("tensor payload exceeds remaining bytes");
  }
  Tensor<float> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = r.f32();
  return t;
}

std::vector<std::uint8_t> encode_segments(const char (&magic)[5], std::uint16_t version,
                                          const std::vector<Segment>& segments) {
  ByteWriter w;
  for (int i = 0; i < 4; ++i) w.u8(static_cast<std::uint8_t>(magic[i]));
  w.u16(version);
  w.u32(static_cast<std::uint32_t>(segments.size()));
  for (const auto& s : segments) {
    w.u16(static_cast<std::uint16_t>(s.name.size()));
    w.bytes({reinterpret_cast<const std::uint8_t*>(s.name.data()), s.name.size()});
    w.u64(s.payload.size());
    w.bytes(s.payload);
  }
  return w.take();
}

std::vector<Segment> decode_segments(std::span<const std::uint8_t> bytes, const char (&magic)[5],
                                     std::uint16_t version) {
  ByteReader r(bytes);
  const auto m = r.bytes(4);
  if (!std::equal(m.begin(), m.end(), magic)) throw FormatError(std::string("bad magic, expected ") + magic, 0);
  const std::uint16_t v = r.u16();
  if (v != version)
    throw FormatError("unsupported format version " + std::to_string(v) + " (expected " + std::to_string(version) + ")",
                      4);
  const std::uint32_t count = r.u32();
  std::vector<Segment> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    Segment s;
    const std::uint16_t n = r.u16();
    const auto name = r.bytes(n);
    s.name.assign(name.begin(), name.end());
    const std::uint64_t len = r.u64();
    if (len > r.remaining()) r.fail("segment '" + s.name + "' overruns the file");
    const auto payload = r.bytes(static_cast<std::size_t>(len));
    s.payload.assign(payload.begin(), payload.end());
    out.push_back(std::move(s));
  }
  if (!r.done()) r.fail("trailing bytes after last segment");
  return out;
}

std::vector<std::uint8_t> read_binary_file(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("cannot open " + file.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_binary_file(const std::filesystem::path& file, std::span<const std::uint8_t> bytes) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("cannot write " + file.string());
}

}  // namespace bnnq
