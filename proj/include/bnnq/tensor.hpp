#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "bnnq/errors.hpp"

namespace bnnq {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

/// Dense row-major n-dimensional array. Rank 0 is a scalar holding one value.
/// Storage is an Eigen column vector so whole-tensor arithmetic can go through
/// Eigen expressions; `matrix()` views rank-2 tensors as row-major matrices.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() : data_(Vector::Zero(1)) {}

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_ = Vector::Constant(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values) : shape_(std::move(shape)) {
    check_shape(shape_);
    if (static_cast<Index>(values.size()) != shape_size(shape_))
      throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                       shape_string(shape_));
    data_.resize(shape_size(shape_));
    std::copy(values.begin(), values.end(), data_.data());
  }

  Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_size(shape_))
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_string(shape_));
  }

  static Tensor scalar(Scalar v) {
    Tensor t;
    t.data_[0] = v;
    return t;
  }

  static Tensor vector(std::initializer_list<Scalar> values) {
    return Tensor({static_cast<Index>(values.size())}, values);
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return data_.size(); }
  Index dim(Index axis) const {
    if (axis < 0 || axis >= rank())
      throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(shape_));
    return shape_[static_cast<std::size_t>(axis)];
  }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> span() { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<const Scalar> span() const { return {data_.data(), static_cast<std::size_t>(data_.size())}; }

  Vector& vec() { return data_; }
  const Vector& vec() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar& at(std::initializer_list<Index> idx) { return data_[offset(idx)]; }
  Scalar at(std::initializer_list<Index> idx) const { return data_[offset(idx)]; }

  /// View as a rows x cols row-major matrix; rows * cols must equal size().
  MatrixMap as_matrix(Index rows, Index cols) {
    check_matrix(rows, cols);
    return MatrixMap(data_.data(), rows, cols);
  }
  ConstMatrixMap as_matrix(Index rows, Index cols) const {
    check_matrix(rows, cols);
    return ConstMatrixMap(data_.data(), rows, cols);
  }
  MatrixMap matrix() {
    if (rank() != 2) throw ShapeError("matrix() needs rank 2, got " + shape_string(shape_));
    return as_matrix(shape_[0], shape_[1]);
  }
  ConstMatrixMap matrix() const {
    if (rank() != 2) throw ShapeError("matrix() needs rank 2, got " + shape_string(shape_));
    return as_matrix(shape_[0], shape_[1]);
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  void fill(Scalar v) { data_.setConstant(v); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static void check_shape(const Shape& shape) {
    for (Index d : shape)
      if (d < 1) throw ShapeError("shape entries must be >= 1, got " + shape_string(shape));
  }

  void check_matrix(Index rows, Index cols) const {
    if (rows * cols != size())
      throw ShapeError("cannot view " + shape_string(shape_) + " as " + std::to_string(rows) + "x" +
                       std::to_string(cols));
  }

  Index offset(std::initializer_list<Index> idx) const {
    if (static_cast<Index>(idx.size()) != rank())
      throw ShapeError("index rank mismatch for shape " + shape_string(shape_));
    Index off = 0;
    std::size_t axis = 0;
    for (Index i : idx) {
      if (i < 0 || i >= shape_[axis]) throw ShapeError("index out of range for shape " + shape_string(shape_));
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_;
  Vector data_;
};

// ---------------------------------------------------------------------------
// Elementwise arithmetic with trailing-axis broadcasting of the right operand.

enum class BinaryOp { Add, Sub, Mul, Div, Max };

template <typename Scalar>
inline Scalar apply_op(BinaryOp op, Scalar x, Scalar y) {
  switch (op) {
    case BinaryOp::Add: return x + y;
    case BinaryOp::Sub: return x - y;
    case BinaryOp::Mul: return x * y;
    case BinaryOp::Div: return x / y;
    case BinaryOp::Max: return std::max(x, y);
  }
  return x;
}

/// True when `b` can be stretched to `a`: b's shape, right-aligned against a's,
/// has each entry equal to a's or 1.
inline bool broadcastable(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  const std::size_t lead = a.size() - b.size();
  for (std::size_t i = 0; i < b.size(); ++i)
    if (b[i] != 1 && b[i] != a[lead + i]) return false;
  return true;
}

template <typename Scalar>
Tensor<Scalar> elementwise(BinaryOp op, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  Tensor<Scalar> out(a.shape());
  if (a.shape() == b.shape()) {
    for (Index i = 0; i < a.size(); ++i) out[i] = apply_op(op, a[i], b[i]);
    return out;
  }
  if (!broadcastable(a.shape(), b.shape()))
    throw ShapeError("cannot broadcast " + shape_string(b.shape()) + " to " + shape_string(a.shape()));

  // Stride of b along each axis of a; zero where b is stretched or absent.
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const std::size_t lead = as.size() - bs.size();
  std::vector<Index> bstride(as.size(), 0);
  Index s = 1;
  for (std::size_t i = bs.size(); i-- > 0;) {
    bstride[lead + i] = bs[i] == 1 ? 0 : s;
    s *= bs[i];
  }
  std::vector<Index> counter(as.size(), 0);
  Index boff = 0;
  for (Index i = 0; i < a.size(); ++i) {
    out[i] = apply_op(op, a[i], b[boff]);
    for (std::size_t ax = as.size(); ax-- > 0;) {
      if (++counter[ax] < as[ax]) {
        boff += bstride[ax];
        break;
      }
      boff -= bstride[ax] * (as[ax] - 1);
      counter[ax] = 0;
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return elementwise(BinaryOp::Add, a, b); }
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return elementwise(BinaryOp::Sub, a, b); }
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return elementwise(BinaryOp::Mul, a, b); }
template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return elementwise(BinaryOp::Div, a, b); }
template <typename Scalar>
Tensor<Scalar> maximum(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return elementwise(BinaryOp::Max, a, b); }

// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul needs rank-2 operands, got " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul inner dimension mismatch: " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  Tensor<Scalar> c({a.dim(0), b.dim(1)});
  c.matrix().noalias() = a.matrix() * b.matrix();
  return c;
}

// ---------------------------------------------------------------------------
// Reductions

enum class ReduceKind { Sum, Mean, Max, ArgMax, Median };

/// Median of a sequence; even lengths give the midpoint of the middle pair.
template <typename Scalar>
Scalar median(std::span<const Scalar> values) {
  if (values.empty()) throw DomainError("median of an empty sequence");
  std::vector<Scalar> v(values.begin(), values.end());
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const Scalar upper = v[mid];
  if (v.size() % 2 == 1) return upper;
  const Scalar lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return (lower + upper) / Scalar(2);
}

template <typename Scalar>
Tensor<Scalar> reduce(const Tensor<Scalar>& t, Index axis, ReduceKind kind) {
  if (axis < 0 || axis >= t.rank())
    throw ShapeError("reduce axis " + std::to_string(axis) + " out of range for " + shape_string(t.shape()));
  const Shape& s = t.shape();
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (Index i = axis + 1; i < t.rank(); ++i) inner *= s[static_cast<std::size_t>(i)];
  const Index n = s[static_cast<std::size_t>(axis)];
  if (n == 0) throw DomainError("reduction over an empty axis");

  Shape out_shape;
  for (Index i = 0; i < t.rank(); ++i)
    if (i != axis) out_shape.push_back(s[static_cast<std::size_t>(i)]);
  Tensor<Scalar> out(out_shape);

  std::vector<Scalar> lane(static_cast<std::size_t>(n));
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      for (Index k = 0; k < n; ++k) lane[static_cast<std::size_t>(k)] = t[(o * n + k) * inner + in];
      Scalar r{};
      switch (kind) {
        case ReduceKind::Sum:
          r = std::accumulate(lane.begin(), lane.end(), Scalar(0));
          break;
        case ReduceKind::Mean:
          r = std::accumulate(lane.begin(), lane.end(), Scalar(0)) / static_cast<Scalar>(n);
          break;
        case ReduceKind::Max:
          r = *std::max_element(lane.begin(), lane.end());
          break;
        case ReduceKind::ArgMax:
          r = static_cast<Scalar>(std::max_element(lane.begin(), lane.end()) - lane.begin());
          break;
        case ReduceKind::Median:
          r = median<Scalar>(lane);
          break;
      }
      out[o * inner + in] = r;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution lowering

struct ConvGeometry {
  Index channels = 1;
  Index height = 1;
  Index width = 1;
  Index kernel_h = 1;
  Index kernel_w = 1;
  Index stride = 1;
  Index pad = 0;

  Index out_h() const { return (height + 2 * pad - kernel_h) / stride + 1; }
  Index out_w() const { return (width + 2 * pad - kernel_w) / stride + 1; }
  Index patch_size() const { return channels * kernel_h * kernel_w; }

  void validate() const {
    if (stride < 1 || pad < 0 || kernel_h < 1 || kernel_w < 1)
      throw ShapeError("invalid convolution geometry");
    if (height + 2 * pad < kernel_h || width + 2 * pad < kernel_w)
      throw ShapeError("kernel " + std::to_string(kernel_h) + "x" + std::to_string(kernel_w) +
                       " larger than padded input " + std::to_string(height + 2 * pad) + "x" +
                       std::to_string(width + 2 * pad));
  }
};

/// Lower an NCHW batch to a (C*kh*kw, N*out_h*out_w) column matrix. Row r is
/// (c*kh + ky)*kw + kx, matching (C_out, C_in, kh, kw) weight flattening;
/// column j is n*(out_h*out_w) + oy*out_w + ox. Padding reads as zero.
template <typename Scalar>
Tensor<Scalar> im2col(const Tensor<Scalar>& x, Index kernel_h, Index kernel_w, Index stride, Index pad) {
  if (x.rank() != 4) throw ShapeError("im2col expects NCHW input, got " + shape_string(x.shape()));
  const ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), kernel_h, kernel_w, stride, pad};
  g.validate();
  const Index n = x.dim(0);
  const Index oh = g.out_h(), ow = g.out_w(), plane = oh * ow;
  Tensor<Scalar> cols({g.patch_size(), n * plane});
  Scalar* out = cols.data();
  const Index ncols = n * plane;
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ky = 0; ky < kernel_h; ++ky) {
      for (Index kx = 0; kx < kernel_w; ++kx) {
        Scalar* row = out + ((c * kernel_h + ky) * kernel_w + kx) * ncols;
        for (Index b = 0; b < n; ++b) {
          const Scalar* img = x.data() + (b * g.channels + c) * g.height * g.width;
          Scalar* dst = row + b * plane;
          for (Index oy = 0; oy < oh; ++oy) {
            const Index iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= g.height) {
              std::fill(dst + oy * ow, dst + (oy + 1) * ow, Scalar(0));
              continue;
            }
            for (Index ox = 0; ox < ow; ++ox) {
              const Index ix = ox * stride - pad + kx;
              dst[oy * ow + ox] = (ix < 0 || ix >= g.width) ? Scalar(0) : img[iy * g.width + ix];
            }
          }
        }
      }
    }
  }
  return cols;
}

/// Adjoint of im2col: scatter-add columns back into an NCHW tensor.
template <typename Scalar>
Tensor<Scalar> col2im(const Tensor<Scalar>& cols, const Shape& input_shape, Index kernel_h, Index kernel_w,
                      Index stride, Index pad) {
  if (input_shape.size() != 4) throw ShapeError("col2im expects an NCHW target shape");
  const ConvGeometry g{input_shape[1], input_shape[2], input_shape[3], kernel_h, kernel_w, stride, pad};
  g.validate();
  const Index n = input_shape[0];
  const Index oh = g.out_h(), ow = g.out_w(), plane = oh * ow;
  if (cols.rank() != 2 || cols.dim(0) != g.patch_size() || cols.dim(1) != n * plane)
    throw ShapeError("col2im column matrix " + shape_string(cols.shape()) + " does not match geometry");
  Tensor<Scalar> x(input_shape);
  const Index ncols = n * plane;
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ky = 0; ky < kernel_h; ++ky) {
      for (Index kx = 0; kx < kernel_w; ++kx) {
        const Scalar* row = cols.data() + ((c * kernel_h + ky) * kernel_w + kx) * ncols;
        for (Index b = 0; b < n; ++b) {
          Scalar* img = x.data() + (b * g.channels + c) * g.height * g.width;
          const Scalar* src = row + b * plane;
          for (Index oy = 0; oy < oh; ++oy) {
            const Index iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= g.height) continue;
            for (Index ox = 0; ox < ow; ++ox) {
              const Index ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < g.width) img[iy * g.width + ix] += src[oy * ow + ox];
            }
          }
        }
      }
    }
  }
  return x;
}

}  // namespace bnnq
