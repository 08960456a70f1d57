#include <random>

#include "bnnq/tensor.hpp"
#include "doctest.h"

using namespace bnnq;
using T = Tensor<float>;

namespace {

// Oracles: plain loops, no Eigen.

T naive_matmul(const T& a, const T& b) {
  T c({a.dim(0), b.dim(1)});
  for (Index i = 0; i < a.dim(0); ++i)
    for (Index j = 0; j < b.dim(1); ++j) {
      float s = 0;
      for (Index t = 0; t < a.dim(1); ++t) s += a.at({i, t}) * b.at({t, j});
      c.at({i, j}) = s;
    }
  return c;
}

/// Direct 6-loop convolution (no bias), NCHW x (O, C, kh, kw).
T direct_conv(const T& x, const T& w, Index stride, Index pad) {
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const Index oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  T y({n, o, oh, ow});
  for (Index b = 0; b < n; ++b)
    for (Index f = 0; f < o; ++f)
      for (Index oy = 0; oy < oh; ++oy)
        for (Index ox = 0; ox < ow; ++ox) {
          double s = 0;
          for (Index ch = 0; ch < c; ++ch)
            for (Index ky = 0; ky < kh; ++ky)
              for (Index kx = 0; kx < kw; ++kx) {
                const Index iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                if (iy >= 0 && iy < h && ix >= 0 && ix < wd) s += x.at({b, ch, iy, ix}) * w.at({f, ch, ky, kx});
              }
          y.at({b, f, oy, ox}) = static_cast<float>(s);
        }
  return y;
}

T random_tensor(Shape s, std::mt19937_64& rng, bool integers = false) {
  T t(std::move(s));
  std::uniform_int_distribution<int> ints(-9, 9);
  std::normal_distribution<float> normal;
  for (Index i = 0; i < t.size(); ++i) t[i] = integers ? static_cast<float>(ints(rng)) : normal(rng);
  return t;
}

double max_rel(const T& a, const T& b) {
  double d = 0, s = 1e-30;
  for (Index i = 0; i < a.size(); ++i) {
    d = std::max(d, static_cast<double>(std::abs(a[i] - b[i])));
    s = std::max(s, static_cast<double>(std::abs(b[i])));
  }
  return d / s;
}

}  // namespace

TEST_CASE("shape invariants") {
  const T t({2, 3, 4});
  CHECK(t.size() == shape_size(t.shape()));
  CHECK(T::scalar(2.5f).rank() == 0);
  CHECK(T::scalar(2.5f).size() == 1);
  CHECK_THROWS_AS(T({2, 0}), ShapeError);
  CHECK_THROWS_AS(T({2}, {1.0f, 2.0f, 3.0f}), ShapeError);
  CHECK_THROWS_AS(t.reshaped({5, 5}), ShapeError);
  CHECK(t.reshaped({6, 4}).shape() == Shape{6, 4});
}

TEST_CASE("elementwise arithmetic") {
  CHECK(add(T::vector({1, 2}), T::vector({3, 4})) == T::vector({4, 6}));
  CHECK(mul(T::vector({2, 2}), T::scalar(0)) == T::vector({0, 0}));
  CHECK(sub(T::vector({5, 1}), T::vector({2, 2})) == T::vector({3, -1}));
  CHECK(div(T::vector({6, 1}), T::vector({3, 4})) == T::vector({2, 0.25f}));
  CHECK(maximum(T::vector({-1, 3}), T::vector({0, 0})) == T::vector({0, 3}));
  CHECK_THROWS_AS(add(T::vector({1, 2}), T::vector({1, 2, 3})), ShapeError);
  CHECK_THROWS_AS(add(T({2, 3}), T({2})), ShapeError);
}

TEST_CASE("broadcast of a trailing vector matches a loop oracle") {
  std::mt19937_64 rng(1);
  const T a = random_tensor({2, 3}, rng), b = random_tensor({3}, rng);
  const T c = add(a, b);
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 3; ++j) CHECK(c.at({i, j}) == a.at({i, j}) + b[j]);

  const T x = random_tensor({2, 3, 4}, rng), y = random_tensor({3, 1}, rng);
  const T z = mul(x, y);
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 3; ++j)
      for (Index k = 0; k < 4; ++k) CHECK(z.at({i, j, k}) == x.at({i, j, k}) * y.at({j, 0}));
}

TEST_CASE("matmul") {
  const T eye({2, 2}, {1, 0, 0, 1});
  const T x({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(matmul(eye, x) == x);
  CHECK(matmul(T({1, 2}, {1, 2}), T({2, 1}, {3, 4})) == T({1, 1}, {11}));
  CHECK_THROWS_AS(matmul(T({2, 3}), T({2, 3})), ShapeError);
  CHECK_THROWS_AS(matmul(T({6}), T({6, 1})), ShapeError);

  // Small integers keep every partial sum exact, so any summation order agrees.
  std::mt19937_64 rng(7);
  const T a = random_tensor({7, 5}, rng, true), b = random_tensor({5, 3}, rng, true);
  CHECK(matmul(a, b) == naive_matmul(a, b));
}

TEST_CASE("matmul distributes over add") {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const T a = random_tensor({8, 8}, rng), b = random_tensor({8, 8}, rng), c = random_tensor({8, 8}, rng);
    CHECK(max_rel(matmul(a, add(b, c)), add(matmul(a, b), matmul(a, c))) < 1e-5);
  }
}

TEST_CASE("reductions") {
  CHECK(median<float>(std::vector<float>{0.1f, 0.9f, 0.5f}) == 0.5f);
  CHECK(median<float>(std::vector<float>{1, 2, 3, 4}) == 2.5f);
  CHECK(median<float>(std::vector<float>{4, 1, 3, 2}) == 2.5f);
  CHECK_THROWS_AS(median<float>(std::vector<float>{}), DomainError);
  CHECK(reduce(T::vector({2, 4}), 0, ReduceKind::Mean).at({}) == 3.0f);

  const T m({2, 3}, {1, 5, 3, 4, 2, 6});
  CHECK(reduce(m, 0, ReduceKind::Sum) == T::vector({5, 7, 9}));
  CHECK(reduce(m, 1, ReduceKind::Max) == T::vector({5, 6}));
  CHECK(reduce(m, 1, ReduceKind::ArgMax) == T::vector({1, 2}));
  CHECK(reduce(m, 1, ReduceKind::Median) == T::vector({3, 4}));
  CHECK_THROWS_AS(reduce(m, 2, ReduceKind::Sum), ShapeError);
}

TEST_CASE("odd-length median is an element of its input") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> len(0, 20);
  for (int rep = 0; rep < 200; ++rep) {
    const T v = random_tensor({2 * len(rng) + 1}, rng);
    const float m = median<float>(v.span());
    CHECK(std::find(v.span().begin(), v.span().end(), m) != v.span().end());
    // Sort-based oracle.
    std::vector<float> s(v.span().begin(), v.span().end());
    std::sort(s.begin(), s.end());
    CHECK(m == s[s.size() / 2]);
  }
}

TEST_CASE("im2col geometry") {
  const T x({1, 1, 2, 2}, {1, 2, 3, 4});
  const T cols = im2col(x, 1, 1, 1, 0);
  CHECK(cols == T({1, 4}, {1, 2, 3, 4}));

  T y({1, 1, 3, 3});
  for (Index i = 0; i < 9; ++i) y[i] = static_cast<float>(i);
  const T full = im2col(y, 3, 3, 1, 0);
  CHECK(full.shape() == Shape{9, 1});
  for (Index i = 0; i < 9; ++i) CHECK(full[i] == static_cast<float>(i));

  CHECK_THROWS_AS(im2col(y, 5, 5, 1, 0), ShapeError);
  CHECK_THROWS_AS(im2col(T({3, 3}), 1, 1, 1, 0), ShapeError);
  CHECK_NOTHROW(im2col(y, 5, 5, 1, 1));
}

TEST_CASE("conv through im2col equals the direct convolution oracle") {
  std::mt19937_64 rng(5);
  struct Case {
    Shape x;
    Index out, k, stride, pad;
  };
  for (const Case& c : {Case{{2, 3, 8, 8}, 4, 3, 2, 1}, Case{{1, 2, 5, 7}, 3, 3, 1, 1}, Case{{3, 1, 6, 6}, 2, 2, 2, 0},
                        Case{{1, 4, 4, 4}, 5, 1, 1, 0}}) {
    const T x = random_tensor(c.x, rng);
    const T w = random_tensor({c.out, c.x[1], c.k, c.k}, rng);
    const T cols = im2col(x, c.k, c.k, c.stride, c.pad);
    const ConvGeometry g{c.x[1], c.x[2], c.x[3], c.k, c.k, c.stride, c.pad};
    T prod({c.out, cols.dim(1)});
    prod.matrix() = w.as_matrix(c.out, g.patch_size()) * cols.matrix();
    const T ref = direct_conv(x, w, c.stride, c.pad);
    // prod is (O, N*oh*ow); ref is NCHW.
    double d = 0, s = 1e-30;
    const Index plane = g.out_h() * g.out_w();
    for (Index b = 0; b < c.x[0]; ++b)
      for (Index f = 0; f < c.out; ++f)
        for (Index p = 0; p < plane; ++p) {
          const float got = prod[f * cols.dim(1) + b * plane + p];
          const float want = ref[(b * c.out + f) * plane + p];
          d = std::max(d, static_cast<double>(std::abs(got - want)));
          s = std::max(s, static_cast<double>(std::abs(want)));
        }
    CHECK(d / s < 1e-5);
  }
}

TEST_CASE("col2im is the adjoint of im2col") {
  // <im2col(x), c> == <x, col2im(c)> for any x, c.
  std::mt19937_64 rng(9);
  const Shape s{2, 3, 6, 5};
  const T x = random_tensor(s, rng);
  const T cols = im2col(x, 3, 3, 2, 1);
  const T c = random_tensor(cols.shape(), rng);
  const T back = col2im(c, s, 3, 3, 2, 1);
  double lhs = 0, rhs = 0;
  for (Index i = 0; i < cols.size(); ++i) lhs += static_cast<double>(cols[i]) * c[i];
  for (Index i = 0; i < x.size(); ++i) rhs += static_cast<double>(x[i]) * back[i];
  CHECK(std::abs(lhs - rhs) < 1e-4 * std::max(1.0, std::abs(lhs)));
}
