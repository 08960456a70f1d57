#include <random>

#include "bnnq/errors.hpp"
#include "bnnq/serialize.hpp"
#include "doctest.h"

using namespace bnnq;
using Bytes = std::vector<std::uint8_t>;

TEST_CASE("writer emits little-endian bytes") {
  ByteWriter w;
  w.u8(0xAB);
  w.u16(0x1234);
  w.u32(0xDEADBEEF);
  w.i32(-2);
  w.f32(1.0f);
  w.str("hi");
  CHECK(w.data() == Bytes{0xAB, 0x34, 0x12, 0xEF, 0xBE, 0xAD, 0xDE, 0xFE, 0xFF, 0xFF, 0xFF,
                          0x00, 0x00, 0x80, 0x3F, 0x02, 0x00, 0x00, 0x00, 'h', 'i'});
  ByteWriter v;
  v.u64(0);
  v.patch_u64(0, 0x0102030405060708ULL);
  CHECK(v.data() == Bytes{8, 7, 6, 5, 4, 3, 2, 1});
}

TEST_CASE("reader inverts the writer") {
  ByteWriter w;
  w.u8(7);
  w.u16(65535);
  w.u32(123456789);
  w.u64(0xFFFFFFFFFFFFFFFFULL);
  w.i32(-123);
  w.i64(-1234567890123LL);
  w.f32(-0.0f);
  w.f64(3.141592653589793);
  w.str("segment");
  const Bytes b = w.take();
  ByteReader r(b);
  CHECK(r.u8() == 7);
  CHECK(r.u16() == 65535);
  CHECK(r.u32() == 123456789u);
  CHECK(r.u64() == 0xFFFFFFFFFFFFFFFFULL);
  CHECK(r.i32() == -123);
  CHECK(r.i64() == -1234567890123LL);
  const float z = r.f32();
  CHECK(z == 0.0f);
  CHECK(std::signbit(z));
  CHECK(r.f64() == 3.141592653589793);
  CHECK(r.str() == "segment");
  CHECK(r.done());
}

TEST_CASE("reader overruns report the absolute offset") {
  const Bytes b{1, 2, 3};
  ByteReader r(b, 100);
  r.u16();
  try {
    r.u32();
    FAIL("overrun accepted");
  } catch (const FormatError& e) {
    CHECK(e.offset == 102);
  }
  CHECK_THROWS_AS(r.seek(4), FormatError);
  r.seek(3);
  CHECK(r.done());
}

TEST_CASE("tensor encoding") {
  const Tensor<float> t({2, 3}, {1, -2, 3.5f, 0, 1e-30f, -7});
  ByteWriter w;
  write_tensor(w, t);
  CHECK(w.size() == 4 + 2 * 4 + 6 * 4);
  const Bytes b = w.take();
  ByteReader r(b);
  CHECK(read_tensor(r) == t);
  CHECK(r.done());

  ByteWriter s;
  write_tensor(s, Tensor<float>::scalar(4.0f));
  const Bytes sb = s.take();
  ByteReader sr(sb);
  CHECK(read_tensor(sr) == Tensor<float>::scalar(4.0f));

  // Corrupt headers are rejected before allocation.
  for (const Bytes& bad : {Bytes{9, 0, 0, 0}, Bytes{1, 0, 0, 0, 0, 0, 0, 0}, Bytes{1, 0, 0, 0, 0xFF, 0xFF, 0xFF, 0x7F}}) {
    ByteReader br(bad);
    CHECK_THROWS_AS(read_tensor(br), FormatError);
  }
}

TEST_CASE("segment container round trip and layout") {
  const std::vector<Segment> segs{{"alpha", {1, 2, 3}}, {"", {}}, {"b", Bytes(300, 9)}};
  const Bytes b = encode_segments("TEST", 3, segs);
  CHECK(Bytes(b.begin(), b.begin() + 10) == Bytes{'T', 'E', 'S', 'T', 3, 0, 3, 0, 0, 0});
  CHECK(b.size() == 10 + (2 + 5 + 8 + 3) + (2 + 0 + 8 + 0) + (2 + 1 + 8 + 300));
  const auto back = decode_segments(b, "TEST", 3);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].name == segs[i].name);
    CHECK(back[i].payload == segs[i].payload);
  }
}

TEST_CASE("segment container rejects every malformation") {
  const Bytes good = encode_segments("TEST", 1, {{"x", {1, 2, 3, 4}}, {"y", {5}}});
  try {
    decode_segments(good, "NOPE", 1);
    FAIL("wrong magic accepted");
  } catch (const FormatError& e) {
    CHECK(e.offset == 0);
  }
  try {
    decode_segments(good, "TEST", 2);
    FAIL("wrong version accepted");
  } catch (const FormatError& e) {
    CHECK(e.offset == 4);
  }
  // Every strict prefix is truncated; one trailing byte is also an error.
  for (std::size_t n = 0; n < good.size(); ++n)
    CHECK_THROWS_AS(decode_segments(std::span(good).first(n), "TEST", 1), FormatError);
  Bytes longer = good;
  longer.push_back(0);
  CHECK_THROWS_AS(decode_segments(longer, "TEST", 1), FormatError);
  // Random single-byte corruption never crashes: it either decodes or throws FormatError.
  std::mt19937_64 rng(1);
  for (int i = 0; i < 2000; ++i) {
    Bytes b = good;
    b[rng() % b.size()] ^= static_cast<std::uint8_t>(1u << (rng() % 8));
    try {
      decode_segments(b, "TEST", 1);
    } catch (const FormatError&) {
    }
  }
}

TEST_CASE("binary files") {
  const auto dir = std::filesystem::current_path() / "serialize-test";
  std::filesystem::remove_all(dir);
  const Bytes b{0, 1, 2, 255};
  write_binary_file(dir / "nested" / "f.bin", b);
  CHECK(read_binary_file(dir / "nested" / "f.bin") == b);
  CHECK_THROWS_AS(read_binary_file(dir / "missing.bin"), FormatError);
}
