#include "bnnq/bitinfer.hpp"

#include <algorithm>
#include <chrono>
#include <optional>
#include <random>

#if defined(__AVX512F__) && defined(__AVX512VPOPCNTDQ__)
#include <immintrin.h>
#endif

#include "bnnq/errors.hpp"
#include "bnnq/serialize.hpp"

namespace bnnq {

namespace {

constexpr std::uint64_t low_mask(Index bits) { return bits >= 64 ? ~std::uint64_t{0} : (std::uint64_t{1} << bits) - 1; }

/// OR `nbits` bits of `src` into `dst` starting at bit `pos`.
void put_bits(std::uint64_t* dst, Index pos, const std::uint64_t* src, Index nbits) {
  const Index wi = pos >> 6;
  const int off = static_cast<int>(pos & 63);
  for (Index i = 0; nbits > 0; ++i, nbits -= 64) {
    const std::uint64_t s = src[i] & low_mask(nbits);
    dst[wi + i] |= s << off;
    if (off != 0 && nbits > 64 - off) dst[wi + i + 1] |= s >> (64 - off);
  }
}

bool get_bit(const std::uint64_t* words, Index i) { return (words[i >> 6] >> (i & 63)) & 1u; }
void set_bit(std::uint64_t* words, Index i) { words[i >> 6] |= std::uint64_t{1} << (i & 63); }

/// Binary activations, channel words per pixel: (n, h, w, words_for(c)).
struct BitActs {
  Index n = 0, c = 0, h = 1, w = 1, cw = 0;
  std::vector<std::uint64_t> data;

  BitActs() = default;
  BitActs(Index n_, Index c_, Index h_, Index w_)
      : n(n_), c(c_), h(h_), w(w_), cw(words_for(c_)), data(static_cast<std::size_t>(n_ * h_ * w_ * cw), 0) {}
  std::uint64_t* px(Index i, Index y, Index x) { return data.data() + ((i * h + y) * w + x) * cw; }
  const std::uint64_t* px(Index i, Index y, Index x) const { return data.data() + ((i * h + y) * w + x) * cw; }
};

/// +-1 floats in NCHW order, flattened to (n, c*h*w) when `flat`.
Tensor<float> bits_to_float(const BitActs& a, bool flat) {
  Tensor<float> t = flat ? Tensor<float>({a.n, a.c * a.h * a.w}) : Tensor<float>({a.n, a.c, a.h, a.w});
  const Index plane = a.h * a.w;
  for (Index i = 0; i < a.n; ++i)
    for (Index y = 0; y < a.h; ++y)
      for (Index x = 0; x < a.w; ++x) {
        const std::uint64_t* p = a.px(i, y, x);
        for (Index c = 0; c < a.c; ++c)
          t[(i * a.c + c) * plane + y * a.w + x] = get_bit(p, c) ? 1.0f : -1.0f;
      }
  return t;
}

BitActs float_to_bits(const Tensor<float>& t, Index c, Index h, Index w) {
  BitActs a(t.dim(0), c, h, w);
  const Index plane = h * w;
  for (Index i = 0; i < a.n; ++i)
    for (Index ch = 0; ch < c; ++ch)
      for (Index p = 0; p < plane; ++p)
        if (t[(i * c + ch) * plane + p] > 0.0f) set_bit(a.px(i, p / w, p % w), ch);
  return a;
}

// ---------------------------------------------------------------------------
// Packed ops

BitActs run_float_conv(const PackedLayer& L, const Tensor<float>& x) {
  const Tensor<float> y = float_conv2d(x, L.weight, L.bias, L.stride, L.pad);
  const Index n = y.dim(0), plane = L.out_h * L.out_w;
  BitActs out(n, L.out_c, L.out_h, L.out_w);
  for (Index i = 0; i < n; ++i)
    for (Index c = 0; c < L.out_c; ++c) {
      const float s = L.bn_scale[static_cast<std::size_t>(c)], b = L.bn_shift[static_cast<std::size_t>(c)];
      const float* row = y.data() + (i * L.out_c + c) * plane;
      for (Index p = 0; p < plane; ++p)
        if (bn_apply(row[p], s, b) > 0.0f) set_bit(out.data.data() + (i * plane + p) * out.cw, c);
    }
  return out;
}

BitActs run_pool(const PackedLayer& L, const BitActs& in) {
  BitActs out(in.n, in.c, L.out_h, L.out_w);
  for (Index i = 0; i < in.n; ++i)
    for (Index oy = 0; oy < L.out_h; ++oy)
      for (Index ox = 0; ox < L.out_w; ++ox) {
        std::uint64_t* dst = out.px(i, oy, ox);
        for (Index ky = 0; ky < L.kernel; ++ky)
          for (Index kx = 0; kx < L.kernel; ++kx) {
            const std::uint64_t* src = in.px(i, oy * L.stride + ky, ox * L.stride + kx);
            for (Index k = 0; k < in.cw; ++k) dst[k] |= src[k];
          }
      }
  return out;
}

/// Branch-free form of a layer's thresholds: with neg[f] in {0, -1},
/// filter f fires iff ((y ^ neg[f]) - neg[f]) >= lim[f], i.e. +-y >= lim[f].
struct FireRule {
  std::vector<std::int64_t> neg, lim;

  explicit FireRule(const PackedLayer& L) {
    const auto F = static_cast<std::size_t>(L.out_c);
    // Padded to whole 64-filter words so vector loads never read past the end.
    const std::size_t padded = static_cast<std::size_t>(words_for(L.out_c)) * 64;
    constexpr std::int64_t kFar = std::int64_t{1} << 40;  // beyond any |y|
    neg.assign(padded, 0);
    lim.assign(padded, kFar);
    for (std::size_t f = 0; f < F; ++f) {
      const Threshold& t = L.thresholds[f];
      switch (t.mode) {
        case ThresholdMode::Never: lim[f] = kFar; break;
        case ThresholdMode::Always: lim[f] = -kFar; break;
        case ThresholdMode::AtLeast: lim[f] = t.t; break;
        case ThresholdMode::AtMost:
          neg[f] = -1;
          lim[f] = -static_cast<std::int64_t>(t.t);
          break;
      }
    }
  }

  /// y = n_valid - 2 * acc[f]; ORs each firing filter's bit into dst.
  void apply(const std::uint64_t* acc, Index n_valid, Index F, std::uint64_t* dst) const {
    for (Index w0 = 0; w0 < F; w0 += 64) {
      const Index n = std::min<Index>(64, F - w0);
      std::uint64_t bits = 0;
#if defined(__AVX512F__) && defined(__AVX512VPOPCNTDQ__)
      const __m512i nv = _mm512_set1_epi64(n_valid);
      for (Index j = 0; j < n; j += 8) {
        const auto lm = static_cast<__mmask8>((1u << std::min<Index>(8, n - j)) - 1u);
        const __m512i a = _mm512_maskz_loadu_epi64(lm, acc + w0 + j);
        const __m512i s = _mm512_loadu_si512(neg.data() + w0 + j);
        const __m512i y = _mm512_sub_epi64(nv, _mm512_slli_epi64(a, 1));
        const __m512i sy = _mm512_sub_epi64(_mm512_xor_si512(y, s), s);
        const __mmask8 fire = _mm512_mask_cmpge_epi64_mask(lm, sy, _mm512_loadu_si512(lim.data() + w0 + j));
        bits |= static_cast<std::uint64_t>(fire) << j;
      }
#else
      for (Index j = 0; j < n; ++j) {
        const auto f = static_cast<std::size_t>(w0 + j);
        const std::int64_t y = n_valid - 2 * static_cast<std::int64_t>(acc[f]);
        bits |= static_cast<std::uint64_t>(((y ^ neg[f]) - neg[f]) >= lim[f]) << j;
      }
#endif
      dst[w0 >> 6] |= bits;
    }
  }
};

/// Up to kRows activation rows sharing one pass over a weight block.
constexpr int kRows = 4;
/// Filters per register block: four 8-lane vectors.
constexpr Index kChunk = 32;

/// acc[r * F + f] = sum_k popcount((x[r][k] ^ w[k * F + f]) & m[r][k]) for
/// r < R and f in [c0, c0 + n), n <= kChunk. A null `m` means no masking.
template <int R>
void xor_popcount_chunk(const std::uint64_t* const* x, const std::uint64_t* const* m, const std::uint64_t* w, Index F,
                        Index fw, Index c0, Index n, std::uint64_t* acc) {
#if defined(__AVX512F__) && defined(__AVX512VPOPCNTDQ__)
  __mmask8 lm[4];
  for (int v = 0; v < 4; ++v) {
    const Index left = std::clamp<Index>(n - 8 * v, 0, 8);
    lm[v] = static_cast<__mmask8>((1u << left) - 1u);
  }
  __m512i a[R][4];
  for (int r = 0; r < R; ++r)
    for (int v = 0; v < 4; ++v) a[r][v] = _mm512_setzero_si512();
  for (Index k = 0; k < fw; ++k) {
    const std::uint64_t* wk = w + k * F + c0;
    __m512i wv[4];
    for (int v = 0; v < 4; ++v) wv[v] = _mm512_maskz_loadu_epi64(lm[v], wk + 8 * v);
    for (int r = 0; r < R; ++r) {
      const __m512i xr = _mm512_set1_epi64(static_cast<long long>(x[r][k]));
      if (m != nullptr) {
        const __m512i mr = _mm512_set1_epi64(static_cast<long long>(m[r][k]));
        for (int v = 0; v < 4; ++v)
          a[r][v] = _mm512_add_epi64(a[r][v], _mm512_popcnt_epi64(_mm512_and_si512(_mm512_xor_si512(xr, wv[v]), mr)));
      } else {
        for (int v = 0; v < 4; ++v) a[r][v] = _mm512_add_epi64(a[r][v], _mm512_popcnt_epi64(_mm512_xor_si512(xr, wv[v])));
      }
    }
  }
  for (int r = 0; r < R; ++r)
    for (int v = 0; v < 4; ++v) _mm512_mask_storeu_epi64(acc + r * F + c0 + 8 * v, lm[v], a[r][v]);
#else
  for (int r = 0; r < R; ++r) {
    std::uint64_t a[kChunk] = {};
    for (Index k = 0; k < fw; ++k) {
      const std::uint64_t xk = x[r][k], mk = m != nullptr ? m[r][k] : ~std::uint64_t{0};
      const std::uint64_t* wk = w + k * F + c0;
      for (Index f = 0; f < n; ++f) a[f] += static_cast<std::uint64_t>(std::popcount((xk ^ wk[f]) & mk));
    }
    std::copy_n(a, n, acc + r * F + c0);
  }
#endif
}

/// Filter chunk `c0` for `rows` (<= kRows) rows.
void xor_popcount(int rows, const std::uint64_t* const* x, const std::uint64_t* const* m, const std::uint64_t* w,
                  Index F, Index fw, Index c0, std::uint64_t* acc) {
  const Index n = std::min(kChunk, F - c0);
  switch (rows) {
    case 4: xor_popcount_chunk<4>(x, m, w, F, fw, c0, n, acc); break;
    case 3: xor_popcount_chunk<3>(x, m, w, F, fw, c0, n, acc); break;
    case 2: xor_popcount_chunk<2>(x, m, w, F, fw, c0, n, acc); break;
    default: xor_popcount_chunk<1>(x, m, w, F, fw, c0, n, acc); break;
  }
}

BitActs run_bin_conv(const PackedLayer& L, const BitActs& in) {
  const Index K = L.kernel, C = L.in_c, F = L.out_c, fw = L.fan_words;
  const Index positions = L.out_h * L.out_w;
  // Validity mask per output position: taps falling in the zero padding
  // contribute 0 to the dense sum, so they are excluded from the popcount.
  std::vector<std::uint64_t> masks(static_cast<std::size_t>(positions * fw), 0);
  std::vector<Index> n_valid(static_cast<std::size_t>(positions), 0);
  std::vector<std::uint64_t> ones(static_cast<std::size_t>(in.cw), ~std::uint64_t{0});
  for (Index oy = 0; oy < L.out_h; ++oy)
    for (Index ox = 0; ox < L.out_w; ++ox) {
      const Index pos = oy * L.out_w + ox;
      for (Index ky = 0; ky < K; ++ky)
        for (Index kx = 0; kx < K; ++kx) {
          const Index iy = oy * L.stride - L.pad + ky, ix = ox * L.stride - L.pad + kx;
          if (iy < 0 || iy >= in.h || ix < 0 || ix >= in.w) continue;
          put_bits(masks.data() + pos * fw, (ky * K + kx) * C, ones.data(), C);
          n_valid[static_cast<std::size_t>(pos)] += C;
        }
    }

  const FireRule rule(L);
  BitActs out(in.n, F, L.out_h, L.out_w);
  std::vector<std::uint64_t> patches(static_cast<std::size_t>(positions * fw));
  std::vector<std::uint64_t> acc(static_cast<std::size_t>(kRows * F));
  for (Index i = 0; i < in.n; ++i) {
    std::fill(patches.begin(), patches.end(), 0);
    for (Index oy = 0; oy < L.out_h; ++oy)
      for (Index ox = 0; ox < L.out_w; ++ox) {
        std::uint64_t* patch = patches.data() + (oy * L.out_w + ox) * fw;
        for (Index ky = 0; ky < K; ++ky)
          for (Index kx = 0; kx < K; ++kx) {
            const Index iy = oy * L.stride - L.pad + ky, ix = ox * L.stride - L.pad + kx;
            if (iy < 0 || iy >= in.h || ix < 0 || ix >= in.w) continue;
            put_bits(patch, (ky * K + kx) * C, in.px(i, iy, ix), C);
          }
      }
    for (Index p0 = 0; p0 < positions; p0 += kRows) {
      const int rows = static_cast<int>(std::min<Index>(kRows, positions - p0));
      const std::uint64_t* x[kRows];
      const std::uint64_t* m[kRows];
      for (int r = 0; r < rows; ++r) {
        x[r] = patches.data() + (p0 + r) * fw;
        m[r] = masks.data() + (p0 + r) * fw;
      }
      for (Index c0 = 0; c0 < F; c0 += kChunk) xor_popcount(rows, x, m, L.wbits.data(), F, fw, c0, acc.data());
      for (int r = 0; r < rows; ++r) {
        const Index pos = p0 + r;
        rule.apply(acc.data() + r * F, n_valid[static_cast<std::size_t>(pos)], F, out.px(i, pos / L.out_w, pos % L.out_w));
      }
    }
  }
  return out;
}

BitActs run_bin_linear(const PackedLayer& L, const BitActs& in) {
  const Index F = L.out_c, fw = L.fan_words, C = in.c;
  // Dense feature rows in (h, w, c) bit order.
  std::vector<std::uint64_t> rows(static_cast<std::size_t>(in.n * fw), 0);
  for (Index i = 0; i < in.n; ++i) {
    std::uint64_t* r = rows.data() + i * fw;
    if (C % 64 == 0) {
      std::copy_n(in.px(i, 0, 0), in.h * in.w * in.cw, r);
    } else {
      for (Index y = 0; y < in.h; ++y)
        for (Index x = 0; x < in.w; ++x) put_bits(r, (y * in.w + x) * C, in.px(i, y, x), C);
    }
  }
  // Chunk-major: one filter chunk of weights stays cache resident across all images.
  std::vector<std::uint64_t> acc(static_cast<std::size_t>(in.n * F));
  for (Index c0 = 0; c0 < F; c0 += kChunk)
    for (Index i0 = 0; i0 < in.n; i0 += kRows) {
      const int nr = static_cast<int>(std::min<Index>(kRows, in.n - i0));
      const std::uint64_t* x[kRows];
      for (int r = 0; r < nr; ++r) x[r] = rows.data() + (i0 + r) * fw;
      xor_popcount(nr, x, nullptr, L.wbits.data(), F, fw, c0, acc.data() + i0 * F);
    }
  const FireRule rule(L);
  BitActs out(in.n, F, 1, 1);
  for (Index i = 0; i < in.n; ++i) rule.apply(acc.data() + i * F, L.fan_bits, F, out.px(i, 0, 0));
  return out;
}

// ---------------------------------------------------------------------------
// Export helpers

Threshold find_threshold(float alpha, float scale, float shift, Index n) {
  // Same float expression as the reference forward; monotone in y because
  // alpha > 0 and rounding preserves order.
  auto fires = [&](Index y) { return bn_apply(alpha * static_cast<float>(y), scale, shift) > 0.0f; };
  const bool first = fires(-n);
  int changes = 0;
  Index at = 0;
  bool prev = first;
  for (Index y = -n + 1; y <= n; ++y) {
    const bool cur = fires(y);
    if (cur != prev) {
      ++changes;
      at = y;
    }
    prev = cur;
  }
  if (changes == 0) return {first ? ThresholdMode::Always : ThresholdMode::Never, 0};
  if (changes > 1) throw StateError("activation is not monotone in the integer pre-activation");
  if (first) return {ThresholdMode::AtMost, static_cast<std::int32_t>(at - 1)};
  return {ThresholdMode::AtLeast, static_cast<std::int32_t>(at)};
}

void fill_binary(PackedLayer& P, const BinaryParam<float>& w, const std::vector<Index>& bit_of_column) {
  const Tensor<float>& latent = w.latent().value;
  const Index F = w.channels(), fan = w.fan();
  P.fan_bits = fan;
  P.fan_words = words_for(fan);
  P.wbits.assign(static_cast<std::size_t>(P.fan_words * F), 0);
  for (Index f = 0; f < F; ++f)
    for (Index j = 0; j < fan; ++j)
      if (latent[f * fan + j] > 0.0f) {
        const Index b = bit_of_column[static_cast<std::size_t>(j)];
        P.wbits[static_cast<std::size_t>((b >> 6) * F + f)] |= std::uint64_t{1} << (b & 63);
      }
  const Tensor<float> alpha = w.scales();
  P.alpha.assign(alpha.data(), alpha.data() + F);
  P.fused_a.resize(static_cast<std::size_t>(F));
  P.fused_b.resize(static_cast<std::size_t>(F));
  P.thresholds.resize(static_cast<std::size_t>(F));
  for (Index f = 0; f < F; ++f) {
    const auto u = static_cast<std::size_t>(f);
    P.fused_a[u] = static_cast<float>(static_cast<double>(P.alpha[u]) * P.bn_scale[u]);
    P.fused_b[u] = P.bn_shift[u];
    P.thresholds[u] = find_threshold(P.alpha[u], P.bn_scale[u], P.bn_shift[u], fan);
  }
}

std::string layer_name(std::size_t i) { return "L" + std::to_string(i); }

}  // namespace

// ---------------------------------------------------------------------------

BitRow pack(std::span<const float> signs) {
  BitRow r;
  r.bits = static_cast<Index>(signs.size());
  r.words.assign(static_cast<std::size_t>(words_for(r.bits)), 0);
  for (std::size_t i = 0; i < signs.size(); ++i) {
    if (signs[i] == 1.0f)
      set_bit(r.words.data(), static_cast<Index>(i));
    else if (signs[i] != -1.0f)
      throw DomainError("pack expects entries in {-1, +1}, got " + std::to_string(signs[i]) + " at index " +
                        std::to_string(i));
  }
  return r;
}

std::vector<float> unpack(const BitRow& row) {
  std::vector<float> out(static_cast<std::size_t>(row.bits));
  for (Index i = 0; i < row.bits; ++i) out[static_cast<std::size_t>(i)] = get_bit(row.words.data(), i) ? 1.0f : -1.0f;
  return out;
}

std::vector<BitRow> pack_rows(const Tensor<float>& signs) {
  const Index rows = signs.rank() == 0 ? 1 : signs.dim(0);
  const Index len = signs.size() / rows;
  std::vector<BitRow> out;
  for (Index r = 0; r < rows; ++r)
    out.push_back(pack(std::span<const float>(signs.data() + r * len, static_cast<std::size_t>(len))));
  return out;
}

int xnor_dot(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b, Index n) {
  const auto need = static_cast<std::size_t>(words_for(n));
  if (n < 0 || a.size() < need || b.size() < need)
    throw ShapeError("xnor_dot over " + std::to_string(n) + " bits needs " + std::to_string(need) + " words, got " +
                     std::to_string(a.size()) + " and " + std::to_string(b.size()));
  Index diff = 0;
  for (std::size_t k = 0; k < need; ++k) {
    const Index valid = std::min<Index>(64, n - static_cast<Index>(k) * 64);
    diff += std::popcount((a[k] ^ b[k]) & low_mask(valid));
  }
  return static_cast<int>(n - 2 * diff);
}

int xnor_dot(const BitRow& a, const BitRow& b) {
  if (a.bits != b.bits)
    throw ShapeError("xnor_dot length mismatch: " + std::to_string(a.bits) + " vs " + std::to_string(b.bits));
  return xnor_dot(a.words, b.words, a.bits);
}

// ---------------------------------------------------------------------------

PackedModel fold_and_export(const Network<float>& net) {
  PackedModel pm;
  pm.input_shape = net.input_shape();
  if (pm.input_shape.size() != 3) throw StateError("network has no (C, H, W) input shape");
  Index c = pm.input_shape[0], h = pm.input_shape[1], w = pm.input_shape[2];
  bool binary_input = false;

  // Optional batchnorm then a mandatory binary activation after layer i.
  auto fold_tail = [&](std::size_t i, PackedLayer& P) -> std::size_t {
    std::size_t j = i + 1;
    P.bn_scale.assign(static_cast<std::size_t>(P.out_c), 1.0f);
    P.bn_shift.assign(static_cast<std::size_t>(P.out_c), 0.0f);
    if (j < net.size() && net.layer(j).kind() == LayerKind::BatchNorm) {
      const auto& bn = dynamic_cast<const BatchNorm<float>&>(net.layer(j));
      if (!bn.has_running_stats())
        throw StateError("batchnorm " + layer_name(j) + " has no running statistics (never run in training mode)");
      const auto [scale, shift] = bn.eval_affine();
      P.bn_scale.assign(scale.data(), scale.data() + scale.size());
      P.bn_shift.assign(shift.data(), shift.data() + shift.size());
      ++j;
    }
    if (j < net.size() && net.layer(j).kind() == LayerKind::HardTanh)
      throw StateError("activations after " + layer_name(i) + " are not binarized; export needs binary activations");
    if (j >= net.size() || net.layer(j).kind() != LayerKind::BinActivation)
      throw StateError(layer_name(i) + " must be followed by an optional batchnorm and a binary activation");
    return j + 1;
  };
  auto need_bits = [&](std::size_t i) {
    if (!binary_input) throw StateError(layer_name(i) + " needs binary input activations");
  };

  for (std::size_t i = 0; i < net.size();) {
    const Layer<float>& l = net.layer(i);
    PackedLayer P;
    P.in_c = c;
    P.in_h = h;
    P.in_w = w;
    switch (l.kind()) {
      case LayerKind::FloatConv: {
        const auto& fc = dynamic_cast<const FloatConv<float>&>(l);
        P.kind = PackedKind::FloatConvSign;
        P.weight = fc.weight().value;
        P.bias = fc.bias().value;
        P.kernel = P.weight.dim(2);
        P.stride = fc.stride();
        P.pad = fc.pad();
        const ConvGeometry g{c, h, w, P.kernel, P.kernel, P.stride, P.pad};
        P.out_c = P.weight.dim(0);
        P.out_h = g.out_h();
        P.out_w = g.out_w();
        i = fold_tail(i, P);
        break;
      }
      case LayerKind::BinConv: {
        need_bits(i);
        const auto& bc = dynamic_cast<const BinConv<float>&>(l);
        const Tensor<float>& lat = bc.weights().latent().value;
        P.kind = PackedKind::BinConvSign;
        P.kernel = lat.dim(2);
        P.stride = bc.stride();
        P.pad = bc.pad();
        const ConvGeometry g{c, h, w, P.kernel, P.kernel, P.stride, P.pad};
        P.out_c = lat.dim(0);
        P.out_h = g.out_h();
        P.out_w = g.out_w();
        const std::size_t next = fold_tail(i, P);
        // Dense column (c, ky, kx) -> patch bit (ky, kx, c).
        std::vector<Index> bit_of(static_cast<std::size_t>(c * P.kernel * P.kernel));
        for (Index ch = 0; ch < c; ++ch)
          for (Index ky = 0; ky < P.kernel; ++ky)
            for (Index kx = 0; kx < P.kernel; ++kx)
              bit_of[static_cast<std::size_t>((ch * P.kernel + ky) * P.kernel + kx)] = (ky * P.kernel + kx) * c + ch;
        fill_binary(P, bc.weights(), bit_of);
        i = next;
        break;
      }
      case LayerKind::MaxPool: {
        need_bits(i);
        const auto& mp = dynamic_cast<const MaxPool<float>&>(l);
        P.kind = PackedKind::MaxPoolBits;
        P.kernel = mp.window();
        P.stride = mp.stride();
        P.out_c = c;
        P.out_h = (h - P.kernel) / P.stride + 1;
        P.out_w = (w - P.kernel) / P.stride + 1;
        ++i;
        break;
      }
      case LayerKind::Flatten:
        ++i;
        continue;
      case LayerKind::BinLinear: {
        need_bits(i);
        const auto& bl = dynamic_cast<const BinLinear<float>&>(l);
        P.kind = PackedKind::BinLinearSign;
        P.out_c = bl.weights().channels();
        const std::size_t next = fold_tail(i, P);
        // Dense column c*H*W + y*W + x -> bit (y*W + x)*C + c.
        std::vector<Index> bit_of(static_cast<std::size_t>(c * h * w));
        for (Index ch = 0; ch < c; ++ch)
          for (Index p = 0; p < h * w; ++p) bit_of[static_cast<std::size_t>(ch * h * w + p)] = p * c + ch;
        fill_binary(P, bl.weights(), bit_of);
        i = next;
        break;
      }
      case LayerKind::FloatLinear: {
        need_bits(i);
        if (i + 1 != net.size()) throw StateError("full-precision linear " + layer_name(i) + " must be the last layer");
        const auto& fl = dynamic_cast<const FloatLinear<float>&>(l);
        P.kind = PackedKind::FloatLinearOut;
        P.weight = fl.weight().value;
        P.bias = fl.bias().value;
        P.out_c = P.weight.dim(0);
        pm.num_classes = P.out_c;
        ++i;
        break;
      }
      case LayerKind::HardTanh:
        throw StateError("activations are not binarized (" + layer_name(i) + "); export needs binary activations");
      case LayerKind::BatchNorm:
      case LayerKind::BinActivation:
        throw StateError("unsupported layer order at " + layer_name(i));
    }
    c = P.out_c;
    h = P.out_h;
    w = P.out_w;
    binary_input = P.kind != PackedKind::FloatLinearOut;
    pm.layers.push_back(std::move(P));
  }
  if (pm.layers.empty() || pm.layers.back().kind != PackedKind::FloatLinearOut)
    throw StateError("network must end in a full-precision linear layer");
  return pm;
}

// ---------------------------------------------------------------------------

Tensor<float> infer(const PackedModel& pm, const Tensor<float>& images) {
  const Shape& in = pm.input_shape;
  if (images.rank() != 4 || images.dim(1) != in[0] || images.dim(2) != in[1] || images.dim(3) != in[2])
    throw ShapeError("images " + shape_string(images.shape()) + " do not match model input " + shape_string(in));
  std::optional<BitActs> bits;
  for (const PackedLayer& L : pm.layers) {
    switch (L.kind) {
      case PackedKind::FloatConvSign:
        bits = run_float_conv(L, bits ? bits_to_float(*bits, false) : images);
        break;
      case PackedKind::MaxPoolBits: bits = run_pool(L, *bits); break;
      case PackedKind::BinConvSign: bits = run_bin_conv(L, *bits); break;
      case PackedKind::BinLinearSign: bits = run_bin_linear(L, *bits); break;
      case PackedKind::FloatLinearOut: return float_linear(bits_to_float(*bits, true), L.weight, L.bias);
    }
  }
  throw StateError("packed model has no output layer");
}

std::vector<int> predict(const PackedModel& pm, const Dataset& d, const ChannelStats& stats, Index batch) {
  if (d.size() == 0) throw DomainError("cannot run inference on an empty dataset");
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(d.size()));
  for (const auto& idx : batch_stream(d.size(), batch, 0, 0, false)) {
    const Batch b = make_batch(d, idx, stats, nullptr);
    const Tensor<float> logits = infer(pm, b.images);
    const Index k = logits.dim(1);
    for (Index r = 0; r < logits.dim(0); ++r) {
      const float* row = logits.data() + r * k;
      out.push_back(static_cast<int>(std::max_element(row, row + k) - row));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// File format

namespace {

constexpr std::size_t kHeaderBytes = 28;
constexpr std::size_t kEntryBytes = 56;
constexpr std::uint32_t kMaxDim = 1u << 24;

void write_floats(ByteWriter& w, const std::vector<float>& v) {
  for (float x : v) w.f32(x);
}

std::vector<float> read_floats(ByteReader& r, Index n) {
  std::vector<float> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = r.f32();
  return v;
}

std::vector<std::uint8_t> payload_of(const PackedLayer& L) {
  ByteWriter w;
  switch (L.kind) {
    case PackedKind::FloatConvSign:
      write_tensor(w, L.weight);
      write_tensor(w, L.bias);
      write_floats(w, L.bn_scale);
      write_floats(w, L.bn_shift);
      break;
    case PackedKind::MaxPoolBits: break;
    case PackedKind::BinConvSign:
    case PackedKind::BinLinearSign:
      w.u32(static_cast<std::uint32_t>(L.fan_bits));
      w.u32(static_cast<std::uint32_t>(L.fan_words));
      for (std::uint64_t x : L.wbits) w.u64(x);
      write_floats(w, L.alpha);
      write_floats(w, L.fused_a);
      write_floats(w, L.fused_b);
      write_floats(w, L.bn_scale);
      write_floats(w, L.bn_shift);
      for (const Threshold& t : L.thresholds) {
        w.u8(static_cast<std::uint8_t>(t.mode));
        w.i32(t.t);
      }
      break;
    case PackedKind::FloatLinearOut:
      write_tensor(w, L.weight);
      write_tensor(w, L.bias);
      break;
  }
  return w.take();
}

}  // namespace

std::vector<std::uint8_t> PackedModel::to_bytes() const {
  ByteWriter w;
  for (char ch : std::string("BNNP")) w.u8(static_cast<std::uint8_t>(ch));
  w.u16(kPackedVersion);
  w.u16(0);
  for (Index d : input_shape) w.u32(static_cast<std::uint32_t>(d));
  w.u32(static_cast<std::uint32_t>(num_classes));
  w.u32(static_cast<std::uint32_t>(layers.size()));
  std::vector<std::vector<std::uint8_t>> payloads;
  for (const auto& L : layers) payloads.push_back(payload_of(L));
  std::uint64_t offset = kHeaderBytes + kEntryBytes * layers.size();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const PackedLayer& L = layers[i];
    w.u8(static_cast<std::uint8_t>(L.kind));
    w.u8(0);
    w.u8(0);
    w.u8(0);
    for (Index v : {L.in_c, L.in_h, L.in_w, L.out_c, L.out_h, L.out_w, L.kernel, L.stride, L.pad})
      w.u32(static_cast<std::uint32_t>(v));
    w.u64(offset);
    w.u64(payloads[i].size());
    offset += payloads[i].size();
  }
  for (const auto& p : payloads) w.bytes(p);
  return w.take();
}

PackedModel PackedModel::from_bytes(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.bytes(4);
  if (std::string(magic.begin(), magic.end()) != "BNNP") throw FormatError("bad magic, expected BNNP", 0);
  const std::uint16_t version = r.u16();
  if (version != kPackedVersion) throw FormatError("unsupported packed-model version " + std::to_string(version), 4);
  if (r.u16() != 0) throw FormatError("reserved header field is not zero", 6);
  PackedModel pm;
  for (int i = 0; i < 3; ++i) {
    const std::uint32_t d = r.u32();
    if (d == 0 || d > kMaxDim) throw FormatError("invalid input dimension", static_cast<long long>(r.absolute() - 4));
    pm.input_shape.push_back(d);
  }
  pm.num_classes = r.u32();
  const std::uint32_t count = r.u32();
  if (count == 0 || count > 4096) throw FormatError("implausible layer count " + std::to_string(count), 24);
  if (bytes.size() < kHeaderBytes + kEntryBytes * count) r.fail("layer table exceeds the file");

  std::uint64_t expected = kHeaderBytes + kEntryBytes * count;
  Index c = pm.input_shape[0], h = pm.input_shape[1], w = pm.input_shape[2];
  bool binary_input = false;
  for (std::uint32_t li = 0; li < count; ++li) {
    const std::size_t entry = r.absolute();
    auto bad = [&](const std::string& what) -> FormatError {
      return FormatError("layer " + std::to_string(li) + ": " + what, static_cast<long long>(entry));
    };
    PackedLayer L;
    const std::uint8_t kind = r.u8();
    if (kind < 1 || kind > 5) throw bad("unknown layer kind " + std::to_string(kind));
    L.kind = static_cast<PackedKind>(kind);
    if (r.u8() != 0 || r.u8() != 0 || r.u8() != 0) throw bad("reserved bytes are not zero");
    Index* fields[] = {&L.in_c, &L.in_h, &L.in_w, &L.out_c, &L.out_h, &L.out_w, &L.kernel, &L.stride, &L.pad};
    for (Index* f : fields) {
      const std::uint32_t v = r.u32();
      if (v > kMaxDim) throw bad("dimension out of range");
      *f = v;
    }
    const std::uint64_t offset = r.u64(), length = r.u64();
    if (offset != expected) throw bad("payload offset " + std::to_string(offset) + " where " + std::to_string(expected) + " was expected");
    if (length > bytes.size() || offset > bytes.size() - length) throw bad("payload extends past the end of the file");
    expected = offset + length;

    // Geometry chain.
    if (L.in_c != c || L.in_h != h || L.in_w != w) throw bad("input geometry does not match the previous layer");
    if (L.out_c < 1 || L.out_h < 1 || L.out_w < 1) throw bad("empty output geometry");
    const bool conv_like = L.kind == PackedKind::FloatConvSign || L.kind == PackedKind::BinConvSign;
    if (conv_like) {
      if (L.kernel < 1 || L.stride < 1) throw bad("degenerate convolution");
      const ConvGeometry g{c, h, w, L.kernel, L.kernel, L.stride, L.pad};
      if (h + 2 * L.pad < L.kernel || w + 2 * L.pad < L.kernel || g.out_h() != L.out_h ||
          g.out_w() != L.out_w)
        throw bad("convolution geometry is inconsistent");
    } else if (L.kind == PackedKind::MaxPoolBits) {
      if (L.kernel < 1 || L.stride < 1 || L.kernel > h || L.kernel > w || L.out_c != c ||
          L.out_h != (h - L.kernel) / L.stride + 1 || L.out_w != (w - L.kernel) / L.stride + 1)
        throw bad("pooling geometry is inconsistent");
    } else if (L.out_h != 1 || L.out_w != 1) {
      throw bad("linear layer output must be 1x1");
    }
    if (L.kind != PackedKind::FloatConvSign && !binary_input) throw bad("layer needs binary input activations");
    if (L.kind == PackedKind::FloatLinearOut && li + 1 != count) throw bad("output layer must be last");
    if (L.kind != PackedKind::FloatLinearOut && li + 1 == count) throw bad("last layer must be the output layer");

    ByteReader pr(bytes.subspan(static_cast<std::size_t>(offset), static_cast<std::size_t>(length)),
                  static_cast<std::size_t>(offset));
    const Index F = L.out_c;
    switch (L.kind) {
      case PackedKind::FloatConvSign:
        L.weight = read_tensor(pr);
        L.bias = read_tensor(pr);
        if (L.weight.shape() != Shape{F, c, L.kernel, L.kernel} || L.bias.shape() != Shape{F})
          throw FormatError("layer " + std::to_string(li) + ": convolution weight shape mismatch",
                            static_cast<long long>(offset));
        L.bn_scale = read_floats(pr, F);
        L.bn_shift = read_floats(pr, F);
        break;
      case PackedKind::MaxPoolBits: break;
      case PackedKind::BinConvSign:
      case PackedKind::BinLinearSign: {
        L.fan_bits = pr.u32();
        L.fan_words = pr.u32();
        const Index fan = L.kind == PackedKind::BinConvSign ? c * L.kernel * L.kernel : c * h * w;
        if (L.fan_bits != fan || L.fan_words != words_for(fan))
          throw FormatError("layer " + std::to_string(li) + ": fan-in does not match the geometry",
                            static_cast<long long>(offset));
        if (static_cast<std::uint64_t>(L.fan_words * F) * 8 > pr.remaining()) pr.fail("weight planes truncated");
        L.wbits.resize(static_cast<std::size_t>(L.fan_words * F));
        for (auto& x : L.wbits) x = pr.u64();
        const std::uint64_t tail = ~low_mask(fan - (L.fan_words - 1) * 64);
        for (Index f = 0; f < F; ++f)
          if (L.wbits[static_cast<std::size_t>((L.fan_words - 1) * F + f)] & tail)
            throw FormatError("layer " + std::to_string(li) + ": padding bits set in weight row " + std::to_string(f),
                              static_cast<long long>(offset + 8 + 8 * ((L.fan_words - 1) * F + f)));
        L.alpha = read_floats(pr, F);
        L.fused_a = read_floats(pr, F);
        L.fused_b = read_floats(pr, F);
        L.bn_scale = read_floats(pr, F);
        L.bn_shift = read_floats(pr, F);
        L.thresholds.resize(static_cast<std::size_t>(F));
        for (auto& t : L.thresholds) {
          const std::uint8_t mode = pr.u8();
          if (mode > 3) pr.fail("invalid threshold mode " + std::to_string(mode));
          t.mode = static_cast<ThresholdMode>(mode);
          t.t = pr.i32();
        }
        break;
      }
      case PackedKind::FloatLinearOut:
        L.weight = read_tensor(pr);
        L.bias = read_tensor(pr);
        if (L.weight.shape() != Shape{F, c * h * w} || L.bias.shape() != Shape{F})
          throw FormatError("layer " + std::to_string(li) + ": linear weight shape mismatch",
                            static_cast<long long>(offset));
        if (F != pm.num_classes) throw bad("output width differs from the class count");
        break;
    }
    if (!pr.done()) pr.fail("unused bytes at the end of the layer payload");
    c = L.out_c;
    h = L.out_h;
    w = L.out_w;
    binary_input = true;
    pm.layers.push_back(std::move(L));
  }
  if (expected != bytes.size()) throw FormatError("trailing bytes after the last payload", static_cast<long long>(expected));
  return pm;
}

void PackedModel::save(const std::filesystem::path& file) const { write_binary_file(file, to_bytes()); }

PackedModel PackedModel::load(const std::filesystem::path& file) {
  const auto bytes = read_binary_file(file);
  try {
    return from_bytes(bytes);
  } catch (const FormatError& e) {
    throw FormatError(file.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Dense reference

namespace {

struct DenseBinary {
  const PackedLayer* layer = nullptr;
  Tensor<float> q;  // (F, fan) in im2col / flatten column order
};

DenseBinary dense_from_packed(const PackedLayer& L) {
  DenseBinary d;
  d.layer = &L;
  const Index F = L.out_c;
  d.q = Tensor<float>({F, L.fan_bits});
  const Index K = L.kernel, C = L.in_c, hw = L.in_h * L.in_w;
  for (Index f = 0; f < F; ++f)
    for (Index j = 0; j < L.fan_bits; ++j) {
      Index b;
      if (L.kind == PackedKind::BinConvSign) {
        const Index ch = j / (K * K), ky = (j / K) % K, kx = j % K;
        b = (ky * K + kx) * C + ch;
      } else {
        b = (j % hw) * C + j / hw;
      }
      const bool bit = (L.wbits[static_cast<std::size_t>((b >> 6) * F + f)] >> (b & 63)) & 1u;
      d.q[f * L.fan_bits + j] = bit ? 1.0f : -1.0f;
    }
  return d;
}

/// +-1 in, +-1 out, all in float: GEMM, scale, batchnorm, sign.
Tensor<float> run_dense(const DenseBinary& d, const Tensor<float>& x) {
  const PackedLayer& L = *d.layer;
  const Index F = L.out_c;
  auto activate = [&](float z, Index f) {
    const auto u = static_cast<std::size_t>(f);
    return bn_apply(L.alpha[u] * z, L.bn_scale[u], L.bn_shift[u]) > 0.0f ? 1.0f : -1.0f;
  };
  if (L.kind == PackedKind::BinConvSign) {
    const Tensor<float> cols = im2col(x, L.kernel, L.kernel, L.stride, L.pad);
    typename Tensor<float>::RowMatrix z = d.q.matrix() * cols.matrix();
    for (Index f = 0; f < F; ++f)
      for (Index j = 0; j < z.cols(); ++j) z(f, j) = activate(z(f, j), f);
    return channel_rows_to_nchw<float>(z, x.dim(0), L.out_h, L.out_w);
  }
  Tensor<float> y({x.dim(0), F});
  y.matrix().noalias() = x.matrix() * d.q.matrix().transpose();
  for (Index r = 0; r < y.dim(0); ++r)
    for (Index f = 0; f < F; ++f) y[r * F + f] = activate(y[r * F + f], f);
  return y;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

}  // namespace

BenchResult bench_binary_layers(const PackedModel& pm, Index batch, int reps, std::uint64_t seed) {
  if (batch < 1 || reps < 1) throw DomainError("bench needs batch >= 1 and reps >= 1");
  std::mt19937_64 rng(seed);
  BenchResult res;
  res.batch = batch;
  res.reps = reps;
  res.outputs_match = true;
  bool any = false;
  std::vector<double> packed_total(static_cast<std::size_t>(reps), 0.0), dense_total(static_cast<std::size_t>(reps), 0.0);
  using clock = std::chrono::steady_clock;
  for (const PackedLayer& L : pm.layers) {
    if (L.kind != PackedKind::BinConvSign && L.kind != PackedKind::BinLinearSign) continue;
    any = true;
    BitActs in(batch, L.in_c, L.in_h, L.in_w);
    for (Index i = 0; i < batch; ++i)
      for (Index y = 0; y < L.in_h; ++y)
        for (Index x = 0; x < L.in_w; ++x) {
          std::uint64_t* p = in.px(i, y, x);
          for (Index k = 0; k < in.cw; ++k) p[k] = rng() & low_mask(L.in_c - k * 64);
        }
    const bool linear = L.kind == PackedKind::BinLinearSign;
    const Tensor<float> xf = bits_to_float(in, linear);
    const DenseBinary dense = dense_from_packed(L);
    auto run_packed = [&] { return linear ? run_bin_linear(L, in) : run_bin_conv(L, in); };
    BitActs pout = run_packed();  // warm-up
    Tensor<float> dout = run_dense(dense, xf);
    const BitActs dbits = linear ? float_to_bits(dout, L.out_c, 1, 1) : float_to_bits(dout, L.out_c, L.out_h, L.out_w);
    res.outputs_match = res.outputs_match && dbits.data == pout.data;
    for (int r = 0; r < reps; ++r) {
      auto t0 = clock::now();
      pout = run_packed();
      auto t1 = clock::now();
      dout = run_dense(dense, xf);
      auto t2 = clock::now();
      packed_total[static_cast<std::size_t>(r)] += std::chrono::duration<double, std::milli>(t1 - t0).count();
      dense_total[static_cast<std::size_t>(r)] += std::chrono::duration<double, std::milli>(t2 - t1).count();
    }
  }
  if (!any) throw StateError("packed model has no binary layers to benchmark");
  res.packed_ms = median(packed_total);
  res.dense_ms = median(dense_total);
  res.speedup = res.dense_ms / res.packed_ms;
  return res;
}

}  // namespace bnnq
