#pragma once

#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bnnq/reg.hpp"
#include "bnnq/ste.hpp"
#include "bnnq/tensor.hpp"

namespace bnnq {

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

/// `surrogate` replaces every sign() in the forward pass by the active STE's
/// antiderivative, turning the network into a differentiable twin whose exact
/// gradient equals the surrogate gradient computed by backward().
struct PassContext {
  bool training = true;
  bool surrogate = false;
};

enum class ParamRole { Weight, Bias, Latent, Scale, SwishBeta, BnGamma, BnShift };

template <typename Scalar>
struct Param {
  std::string name;
  ParamRole role = ParamRole::Weight;
  Tensor<Scalar> value;
  Tensor<Scalar> grad;

  Param() = default;
  Param(std::string n, ParamRole r, Tensor<Scalar> v)
      : name(std::move(n)), role(r), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad.fill(Scalar(0)); }
};

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar>* tensor;
};

enum class LayerKind { FloatConv, BinConv, FloatLinear, BinLinear, BatchNorm, MaxPool, BinActivation, HardTanh, Flatten };

inline bool is_learnable(LayerKind k) {
  return k == LayerKind::FloatConv || k == LayerKind::BinConv || k == LayerKind::FloatLinear ||
         k == LayerKind::BinLinear;
}
inline bool is_binary(LayerKind k) { return k == LayerKind::BinConv || k == LayerKind::BinLinear; }

template <typename Scalar>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual LayerKind kind() const = 0;
  virtual Tensor<Scalar> forward(const Tensor<Scalar>& x, const PassContext& ctx) = 0;
  virtual Tensor<Scalar> backward(const Tensor<Scalar>& upstream) = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;
  virtual std::vector<Param<Scalar>*> params() { return {}; }
  virtual std::vector<NamedTensor<Scalar>> buffers() { return {}; }
  /// Unweighted regularizer sum of a binary layer; 0 elsewhere.
  virtual Scalar reg_value() const { return Scalar(0); }
  virtual void set_lambda(double) {}

  std::vector<const Param<Scalar>*> params() const {
    auto ps = const_cast<Layer*>(this)->params();
    return {ps.begin(), ps.end()};
  }
};

template <typename Derived, typename Scalar>
class LayerBase : public Layer<Scalar> {
 public:
  std::unique_ptr<Layer<Scalar>> clone() const override {
    return std::make_unique<Derived>(static_cast<const Derived&>(*this));
  }
};

// ---------------------------------------------------------------------------
// Layout helpers shared with the packed engine

/// (N, C, H, W) -> (C, N*H*W) with column n*H*W + p.
template <typename Scalar>
typename Tensor<Scalar>::RowMatrix nchw_to_channel_rows(const Tensor<Scalar>& y) {
  const Index n = y.dim(0), c = y.dim(1), plane = y.dim(2) * y.dim(3);
  typename Tensor<Scalar>::RowMatrix m(c, n * plane);
  for (Index b = 0; b < n; ++b)
    for (Index ch = 0; ch < c; ++ch)
      std::copy_n(y.data() + (b * c + ch) * plane, plane, m.data() + ch * n * plane + b * plane);
  return m;
}

template <typename Scalar>
Tensor<Scalar> channel_rows_to_nchw(const typename Tensor<Scalar>::RowMatrix& m, Index n, Index h, Index w) {
  const Index c = m.rows(), plane = h * w;
  Tensor<Scalar> y({n, c, h, w});
  for (Index b = 0; b < n; ++b)
    for (Index ch = 0; ch < c; ++ch)
      std::copy_n(m.data() + ch * n * plane + b * plane, plane, y.data() + (b * c + ch) * plane);
  return y;
}

/// Float convolution via im2col + GEMM, with per-channel bias.
template <typename Scalar>
Tensor<Scalar> float_conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias,
                            Index stride, Index pad, Tensor<Scalar>* cols_out = nullptr) {
  if (x.rank() != 4 || weight.rank() != 4 || x.dim(1) != weight.dim(1))
    throw ShapeError("conv input " + shape_string(x.shape()) + " incompatible with weight " +
                     shape_string(weight.shape()));
  const Index kh = weight.dim(2), kw = weight.dim(3), cout = weight.dim(0);
  Tensor<Scalar> cols = im2col(x, kh, kw, stride, pad);
  const ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), kh, kw, stride, pad};
  typename Tensor<Scalar>::RowMatrix z = weight.as_matrix(cout, g.patch_size()) * cols.matrix();
  for (Index c = 0; c < cout; ++c) z.row(c).array() += bias[c];
  Tensor<Scalar> y = channel_rows_to_nchw<Scalar>(z, x.dim(0), g.out_h(), g.out_w());
  if (cols_out) *cols_out = std::move(cols);
  return y;
}

/// y = x W^T + b for x (N, in), W (out, in).
template <typename Scalar>
Tensor<Scalar> float_linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1))
    throw ShapeError("linear input " + shape_string(x.shape()) + " incompatible with weight " +
                     shape_string(weight.shape()));
  Tensor<Scalar> y({x.dim(0), weight.dim(0)});
  y.matrix().noalias() = x.matrix() * weight.matrix().transpose();
  for (Index r = 0; r < y.dim(0); ++r)
    for (Index c = 0; c < y.dim(1); ++c) y[r * y.dim(1) + c] += bias[c];
  return y;
}

/// Batchnorm in inference form. Both engines route every eval-mode value
/// through this expression so their thresholds agree bit for bit.
template <typename Scalar>
inline Scalar bn_apply(Scalar x, Scalar scale, Scalar shift) {
  return x * scale + shift;
}

// ---------------------------------------------------------------------------
// Binary weights: latent reals, sign quantizer, scales, optional SignSwish beta

template <typename Scalar>
class BinaryParam {
 public:
  BinaryParam() = default;
  BinaryParam(const std::string& prefix, Tensor<Scalar> latent, const SteKind& ste, const RegConfig& reg)
      : ste_(ste), reg_kind_(reg.kind), lambda_(reg.lambda), mode_(reg.scale_mode),
        latent_(prefix + ".latent", ParamRole::Latent, std::move(latent)) {
    if (mode_ == ScaleMode::TrainablePerFilter)
      alpha_.emplace(prefix + ".alpha", ParamRole::Scale, init_scale(reg_kind_, latent_.value));
    if (ste_.trainable_beta())
      beta_.emplace(prefix + ".beta", ParamRole::SwishBeta,
                    Tensor<Scalar>::vector({static_cast<Scalar>(ste_.param)}));
  }

  Index channels() const { return latent_.value.dim(0); }
  Index fan() const { return latent_.value.size() / channels(); }
  const SteKind& ste() const { return ste_; }
  ScaleMode scale_mode() const { return mode_; }
  Scalar beta() const { return beta_ ? beta_->value[0] : static_cast<Scalar>(ste_.param); }
  Param<Scalar>& latent() { return latent_; }
  const Param<Scalar>& latent() const { return latent_; }
  Param<Scalar>* alpha_param() { return alpha_ ? &*alpha_ : nullptr; }
  Param<Scalar>* beta_param() { return beta_ ? &*beta_ : nullptr; }
  void set_lambda(double l) { lambda_ = l; }

  /// Scales used by the forward pass: trained, recomputed from the latent
  /// weights (dynamic), or all ones.
  Tensor<Scalar> scales() const {
    switch (mode_) {
      case ScaleMode::TrainablePerFilter: return alpha_->value;
      case ScaleMode::DynamicXnor: return dynamic_scale(latent_.value);
      case ScaleMode::NoScale: break;
    }
    return Tensor<Scalar>({channels()}, Scalar(1));
  }

  /// Quantized weights q: sign(latent), or the STE antiderivative in surrogate mode.
  const Tensor<Scalar>& quantize(bool surrogate) {
    if (q_.shape() != latent_.value.shape()) q_ = Tensor<Scalar>(latent_.value.shape());
    if (surrogate) {
      const Scalar b = beta();
      for (Index i = 0; i < q_.size(); ++i) q_[i] = ste_primitive(ste_, latent_.value[i], b);
    } else {
      // sign with sign(0) = -1
      using Vec = typename Tensor<Scalar>::Vector;
      const Index n = q_.size();
      q_.vec() = (latent_.value.vec().array() > Scalar(0)).select(Vec::Constant(n, Scalar(1)), Vec::Constant(n, Scalar(-1)));
    }
    used_scales_ = scales();
    return q_;
  }
  const Tensor<Scalar>& quantized() const { return q_; }
  const Tensor<Scalar>& used_scales() const { return used_scales_; }

  /// Accumulate gradients given dL/dW_eff for W_eff = alpha_c * q, shaped
  /// (C_out, fan) row-major. One row at a time so the derivative stays in cache.
  void backward(const typename Tensor<Scalar>::RowMatrix& d_weff) {
    const Index rows = channels(), cols = fan();
    const bool reg_on = reg_kind_ != RegKind::None && lambda_ != 0.0;
    const Scalar lam = static_cast<Scalar>(lambda_), b = beta();
    deriv_.resize(cols);
    if (beta_) dbeta_.resize(cols);
    using RowArr = Eigen::Array<Scalar, 1, Eigen::Dynamic>;
    using Row = Eigen::Map<RowArr>;
    using CRow = Eigen::Map<const RowArr>;
    Scalar dbeta = 0;
    for (Index c = 0; c < rows; ++c) {
      const Scalar* w = latent_.value.data() + c * cols;
      const Scalar* q = q_.data() + c * cols;
      const Scalar* g = d_weff.data() + c * cols;
      Scalar* lg = latent_.grad.data() + c * cols;
      ste_derivative_span(ste_, w, cols, b, deriv_.data(), beta_ ? dbeta_.data() : nullptr);
      const Scalar a = used_scales_[c];
      const CRow gr(g, cols), qr(q, cols), wr(w, cols), dr(deriv_.data(), cols);
      Row lgr(lg, cols);
      const Scalar dalpha = (gr * qr).sum();
      lgr += (a * gr) * dr;  // dL/dq = alpha_c * dL/dW_eff
      if (beta_) dbeta += ((a * gr) * CRow(dbeta_.data(), cols)).sum();
      Scalar rg_alpha = 0;
      if (reg_on) {
        // Same subgradients as reg_grad_w_elem / reg_grad_alpha_elem, vectorized.
        const RowArr d = a - wr.abs();
        const RowArr sw = (wr > Scalar(0)).template cast<Scalar>() - (wr < Scalar(0)).template cast<Scalar>();
        if (reg_kind_ == RegKind::R1) {
          const RowArr sd = (d > Scalar(0)).template cast<Scalar>() - (d < Scalar(0)).template cast<Scalar>();
          lgr += lam * (-sd * sw);
          rg_alpha = sd.sum();
        } else {
          lgr += lam * (Scalar(-2) * d * sw);
          rg_alpha = (Scalar(2) * d).sum();
        }
      }
      if (alpha_) alpha_->grad[c] += dalpha + lam * rg_alpha;
    }
    if (beta_) beta_->grad[0] += dbeta;
  }

  Scalar reg_value() const {
    if (reg_kind_ == RegKind::None) return Scalar(0);
    return bnnq::reg_value(reg_kind_, latent_.value, scales());
  }

  void collect(std::vector<Param<Scalar>*>& out) {
    out.push_back(&latent_);
    if (alpha_) out.push_back(&*alpha_);
    if (beta_) out.push_back(&*beta_);
  }

 private:
  SteKind ste_;
  RegKind reg_kind_ = RegKind::None;
  double lambda_ = 0.0;
  ScaleMode mode_ = ScaleMode::TrainablePerFilter;
  Param<Scalar> latent_;
  std::optional<Param<Scalar>> alpha_;
  std::optional<Param<Scalar>> beta_;
  Tensor<Scalar> q_;
  Tensor<Scalar> used_scales_;
  std::vector<Scalar> deriv_, dbeta_;  // one row of scratch
};

// ---------------------------------------------------------------------------
// Convolutions

template <typename Scalar>
class FloatConv : public LayerBase<FloatConv<Scalar>, Scalar> {
 public:
  FloatConv(const std::string& prefix, Tensor<Scalar> weight, Index stride, Index pad)
      : weight_(prefix + ".weight", ParamRole::Weight, std::move(weight)),
        bias_(prefix + ".bias", ParamRole::Bias, Tensor<Scalar>({weight_.value.dim(0)})),
        stride_(stride), pad_(pad) {}

  LayerKind kind() const override { return LayerKind::FloatConv; }
  Index stride() const { return stride_; }
  Index pad() const { return pad_; }
  const Param<Scalar>& weight() const { return weight_; }
  const Param<Scalar>& bias() const { return bias_; }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, const PassContext&) override {
    in_shape_ = x.shape();
    Tensor<Scalar> y = float_conv2d(x, weight_.value, bias_.value, stride_, pad_, &cols_);
    out_h_ = y.dim(2);
    out_w_ = y.dim(3);
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    const auto dz = nchw_to_channel_rows(dy);
    const Index cout = weight_.value.dim(0), patch = cols_.dim(0);
    weight_.grad.as_matrix(cout, patch).noalias() += dz * cols_.matrix().transpose();
    bias_.grad.vec() += dz.rowwise().sum();
    Tensor<Scalar> dcols({patch, cols_.dim(1)});
    dcols.matrix().noalias() = weight_.value.as_matrix(cout, patch).transpose() * dz;
    return col2im(dcols, in_shape_, weight_.value.dim(2), weight_.value.dim(3), stride_, pad_);
  }

  std::vector<Param<Scalar>*> params() override { return {&weight_, &bias_}; }

 private:
  Param<Scalar> weight_, bias_;
  Index stride_, pad_;
  Shape in_shape_;
  Tensor<Scalar> cols_;
  Index out_h_ = 0, out_w_ = 0;
};

/// Convolution with weights alpha_c * sign(latent) and no bias. The product is
/// formed as alpha_c * (sign(W) x) so that for +-1 inputs the pre-scale sums
/// are exact integers.
template <typename Scalar>
class BinConv : public LayerBase<BinConv<Scalar>, Scalar> {
 public:
  BinConv(const std::string& prefix, Tensor<Scalar> latent, Index stride, Index pad, const SteKind& ste,
          const RegConfig& reg)
      : w_(prefix, std::move(latent), ste, reg), stride_(stride), pad_(pad) {}

  LayerKind kind() const override { return LayerKind::BinConv; }
  Index stride() const { return stride_; }
  Index pad() const { return pad_; }
  BinaryParam<Scalar>& weights() { return w_; }
  const BinaryParam<Scalar>& weights() const { return w_; }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, const PassContext& ctx) override {
    const Shape& ws = w_.latent().value.shape();
    if (x.rank() != 4 || x.dim(1) != ws[1])
      throw ShapeError("binconv input " + shape_string(x.shape()) + " incompatible with weight " +
                       shape_string(ws));
    in_shape_ = x.shape();
    const Tensor<Scalar>& q = w_.quantize(ctx.surrogate);
    cols_ = im2col(x, ws[2], ws[3], stride_, pad_);
    const ConvGeometry g{ws[1], x.dim(2), x.dim(3), ws[2], ws[3], stride_, pad_};
    typename Tensor<Scalar>::RowMatrix z = q.as_matrix(ws[0], g.patch_size()) * cols_.matrix();
    const Tensor<Scalar>& alpha = w_.used_scales();
    for (Index c = 0; c < ws[0]; ++c)
      for (Index j = 0; j < z.cols(); ++j) z(c, j) = alpha[c] * z(c, j);
    return channel_rows_to_nchw<Scalar>(z, x.dim(0), g.out_h(), g.out_w());
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    const Shape& ws = w_.latent().value.shape();
    auto dz = nchw_to_channel_rows(dy);
    const Index patch = cols_.dim(0);
    typename Tensor<Scalar>::RowMatrix d_weff = dz * cols_.matrix().transpose();
    w_.backward(d_weff);
    const Tensor<Scalar>& alpha = w_.used_scales();
    for (Index c = 0; c < ws[0]; ++c) dz.row(c) *= alpha[c];
    Tensor<Scalar> dcols({patch, cols_.dim(1)});
    dcols.matrix().noalias() = w_.quantized().as_matrix(ws[0], patch).transpose() * dz;
    return col2im(dcols, in_shape_, ws[2], ws[3], stride_, pad_);
  }

  std::vector<Param<Scalar>*> params() override {
    std::vector<Param<Scalar>*> out;
    w_.collect(out);
    return out;
  }
  Scalar reg_value() const override { return w_.reg_value(); }
  void set_lambda(double l) override { w_.set_lambda(l); }

 private:
  BinaryParam<Scalar> w_;
  Index stride_, pad_;
  Shape in_shape_;
  Tensor<Scalar> cols_;
};

// ---------------------------------------------------------------------------
// Fully connected

template <typename Scalar>
class FloatLinear : public LayerBase<FloatLinear<Scalar>, Scalar> {
 public:
  FloatLinear(const std::string& prefix, Tensor<Scalar> weight)
      : weight_(prefix + ".weight", ParamRole::Weight, std::move(weight)),
        bias_(prefix + ".bias", ParamRole::Bias, Tensor<Scalar>({weight_.value.dim(0)})) {}

  LayerKind kind() const override { return LayerKind::FloatLinear; }
  const Param<Scalar>& weight() const { return weight_; }
  const Param<Scalar>& bias() const { return bias_; }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, const PassContext&) override {
    x_ = x;
    return float_linear(x, weight_.value, bias_.value);
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    weight_.grad.matrix().noalias() += dy.matrix().transpose() * x_.matrix();
    bias_.grad.vec() += dy.matrix().colwise().sum().transpose();
    Tensor<Scalar> dx(x_.shape());
    dx.matrix().noalias() = dy.matrix() * weight_.value.matrix();
    return dx;
  }

  std::vector<Param<Scalar>*> params() override { return {&weight_, &bias_}; }

 private:
  Param<Scalar> weight_, bias_;
  Tensor<Scalar> x_;
};

/// y = (x sign(W)^T) scaled per output column by alpha; no bias.
template <typename Scalar>
class BinLinear : public LayerBase<BinLinear<Scalar>, Scalar> {
 public:
  BinLinear(const std::string& prefix, Tensor<Scalar> latent, const SteKind& ste, const RegConfig& reg)
      : w_(prefix, std::move(latent), ste, reg) {}

  LayerKind kind() const override { return LayerKind::BinLinear; }
  BinaryParam<Scalar>& weights() { return w_; }
  const BinaryParam<Scalar>& weights() const { return w_; }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, const PassContext& ctx) override {
    const Shape& ws = w_.latent().value.shape();
    if (x.rank() != 2 || x.dim(1) != ws[1])
      throw ShapeError("binlinear input " + shape_string(x.shape()) + " incompatible with weight " +
                       shape_string(ws));
    x_ = x;
    const Tensor<Scalar>& q = w_.quantize(ctx.surrogate);
    Tensor<Scalar> y({x.dim(0), ws[0]});
    y.matrix().noalias() = x.matrix() * q.matrix().transpose();
    const Tensor<Scalar>& alpha = w_.used_scales();
    for (Index r = 0; r < y.dim(0); ++r)
      for (Index c = 0; c < ws[0]; ++c) y[r * ws[0] + c] = alpha[c] * y[r * ws[0] + c];
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    const Shape& ws = w_.latent().value.shape();
    typename Tensor<Scalar>::RowMatrix d_weff = dy.matrix().transpose() * x_.matrix();
    w_.backward(d_weff);
    typename Tensor<Scalar>::RowMatrix dz = dy.matrix();
    const Tensor<Scalar>& alpha = w_.used_scales();
    for (Index c = 0; c < ws[0]; ++c) dz.col(c) *= alpha[c];
    Tensor<Scalar> dx(x_.shape());
    dx.matrix().noalias() = dz * w_.quantized().matrix();
    return dx;
  }

  std::vector<Param<Scalar>*> params() override {
    std::vector<Param<Scalar>*> out;
    w_.collect(out);
    return out;
  }
  Scalar reg_value() const override { return w_.reg_value(); }
  void set_lambda(double l) override { w_.set_lambda(l); }

 private:
  BinaryParam<Scalar> w_;
  Tensor<Scalar> x_;
};

// ---------------------------------------------------------------------------
// Batch normalization over axis 1 of (N, C) or (N, C, H, W)

template <typename Scalar>
class BatchNorm : public LayerBase<BatchNorm<Scalar>, Scalar> {
 public:
  BatchNorm(const std::string& prefix, Index channels)
      : gamma_(prefix + ".gamma", ParamRole::BnGamma, Tensor<Scalar>({channels}, Scalar(1))),
        shift_(prefix + ".shift", ParamRole::BnShift, Tensor<Scalar>({channels})),
        running_mean_({channels}), running_var_({channels}, Scalar(1)), tracked_({1}), prefix_(prefix) {}

  LayerKind kind() const override { return LayerKind::BatchNorm; }
  Index channels() const { return gamma_.value.size(); }
  const Param<Scalar>& gamma() const { return gamma_; }
  const Param<Scalar>& shift() const { return shift_; }
  Param<Scalar>& gamma() { return gamma_; }
  Param<Scalar>& shift() { return shift_; }
  const Tensor<Scalar>& running_mean() const { return running_mean_; }
  const Tensor<Scalar>& running_var() const { return running_var_; }
  Tensor<Scalar>& running_mean() { return running_mean_; }
  Tensor<Scalar>& running_var() { return running_var_; }
  /// True once at least one training-mode batch has updated the running stats.
  bool has_running_stats() const { return tracked_[0] > Scalar(0); }

  /// Per-channel (scale, shift) of the eval-mode affine map.
  std::pair<Tensor<Scalar>, Tensor<Scalar>> eval_affine() const {
    Tensor<Scalar> scale({channels()}), shift({channels()});
    for (Index c = 0; c < channels(); ++c) {
      scale[c] = gamma_.value[c] / std::sqrt(running_var_[c] + static_cast<Scalar>(kBatchNormEps));
      shift[c] = shift_.value[c] - running_mean_[c] * scale[c];
    }
    return {scale, shift};
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, const PassContext& ctx) override {
    if ((x.rank() != 2 && x.rank() != 4) || x.dim(1) != channels())
      throw ShapeError("batchnorm input " + shape_string(x.shape()) + " does not have " +
                       std::to_string(channels()) + " channels");
    const Index n = x.dim(0), c_count = channels();
    const Index plane = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
    const Index m = n * plane;
    training_ = ctx.training;
    Tensor<Scalar> y(x.shape());
    if (!ctx.training) {
      const auto [scale, shift] = eval_affine();
      eval_scale_ = scale;
      for (Index b = 0; b < n; ++b)
        for (Index c = 0; c < c_count; ++c) {
          const Index base = (b * c_count + c) * plane;
          for (Index p = 0; p < plane; ++p) y[base + p] = bn_apply(x[base + p], scale[c], shift[c]);
        }
      return y;
    }
    if (n < 2) throw DomainError("batchnorm in training mode needs batch size >= 2");
    xhat_ = Tensor<Scalar>(x.shape());
    inv_std_ = Tensor<Scalar>({c_count});
    const Scalar momentum = static_cast<Scalar>(kBatchNormMomentum);
    for (Index c = 0; c < c_count; ++c) {
      Scalar sum = 0;
      for (Index b = 0; b < n; ++b) {
        const Index base = (b * c_count + c) * plane;
        for (Index p = 0; p < plane; ++p) sum += x[base + p];
      }
      const Scalar mean = sum / static_cast<Scalar>(m);
      Scalar sq = 0;
      for (Index b = 0; b < n; ++b) {
        const Index base = (b * c_count + c) * plane;
        for (Index p = 0; p < plane; ++p) {
          const Scalar d = x[base + p] - mean;
          sq += d * d;
        }
      }
      const Scalar var = sq / static_cast<Scalar>(m);
      const Scalar inv = Scalar(1) / std::sqrt(var + static_cast<Scalar>(kBatchNormEps));
      inv_std_[c] = inv;
      for (Index b = 0; b < n; ++b) {
        const Index base = (b * c_count + c) * plane;
        for (Index p = 0; p < plane; ++p) {
          const Scalar xh = (x[base + p] - mean) * inv;
          xhat_[base + p] = xh;
          y[base + p] = gamma_.value[c] * xh + shift_.value[c];
        }
      }
      const Scalar unbiased = m > 1 ? sq / static_cast<Scalar>(m - 1) : var;
      running_mean_[c] = momentum * running_mean_[c] + (Scalar(1) - momentum) * mean;
      running_var_[c] = momentum * running_var_[c] + (Scalar(1) - momentum) * unbiased;
    }
    tracked_[0] = std::min(tracked_[0] + Scalar(1), Scalar(1 << 20));
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    const Index n = dy.dim(0), c_count = channels();
    const Index plane = dy.rank() == 4 ? dy.dim(2) * dy.dim(3) : 1;
    const Scalar m = static_cast<Scalar>(n * plane);
    Tensor<Scalar> dx(dy.shape());
    if (!training_) {
      // Running statistics are constants here; xhat is not cached, so gamma and
      // shift gradients are not produced in eval mode.
      for (Index b = 0; b < n; ++b)
        for (Index c = 0; c < c_count; ++c) {
          const Index base = (b * c_count + c) * plane;
          for (Index p = 0; p < plane; ++p) dx[base + p] = dy[base + p] * eval_scale_[c];
        }
      return dx;
    }
    for (Index c = 0; c < c_count; ++c) {
      Scalar sum_dy = 0, sum_dy_xh = 0;
      for (Index b = 0; b < n; ++b) {
        const Index base = (b * c_count + c) * plane;
        for (Index p = 0; p < plane; ++p) {
          sum_dy += dy[base + p];
          sum_dy_xh += dy[base + p] * xhat_[base + p];
        }
      }
      gamma_.grad[c] += sum_dy_xh;
      shift_.grad[c] += sum_dy;
      const Scalar k = gamma_.value[c] * inv_std_[c] / m;
      for (Index b = 0; b < n; ++b) {
        const Index base = (b * c_count + c) * plane;
        for (Index p = 0; p < plane; ++p)
          dx[base + p] = k * (m * dy[base + p] - sum_dy - xhat_[base + p] * sum_dy_xh);
      }
    }
    return dx;
  }

  std::vector<Param<Scalar>*> params() override { return {&gamma_, &shift_}; }
  std::vector<NamedTensor<Scalar>> buffers() override {
    return {{prefix_ + ".running_mean", &running_mean_},
            {prefix_ + ".running_var", &running_var_},
            {prefix_ + ".batches_tracked", &tracked_}};
  }

 private:
  Param<Scalar> gamma_, shift_;
  Tensor<Scalar> running_mean_, running_var_, tracked_;  // tracked_ saturates at 2^20
  std::string prefix_;
  bool training_ = true;
  Tensor<Scalar> xhat_, inv_std_, eval_scale_;
};

// ---------------------------------------------------------------------------

template <typename Scalar>
class MaxPool : public LayerBase<MaxPool<Scalar>, Scalar> {
 public:
  MaxPool(Index window, Index stride) : window_(window), stride_(stride) {
    if (window < 1 || stride < 1) throw ShapeError("pool window and stride must be >= 1");
  }
  LayerKind kind() const override { return LayerKind::MaxPool; }
  Index window() const { return window_; }
  Index stride() const { return stride_; }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, const PassContext&) override {
    if (x.rank() != 4) throw ShapeError("maxpool expects NCHW input");
    const Index h = x.dim(2), w = x.dim(3);
    if (window_ > h || window_ > w)
      throw ShapeError("pool window " + std::to_string(window_) + " exceeds input " + std::to_string(h) + "x" +
                       std::to_string(w));
    const Index oh = (h - window_) / stride_ + 1, ow = (w - window_) / stride_ + 1;
    const Index planes = x.dim(0) * x.dim(1);
    in_shape_ = x.shape();
    Tensor<Scalar> y({x.dim(0), x.dim(1), oh, ow});
    argmax_.assign(static_cast<std::size_t>(y.size()), 0);
    for (Index pl = 0; pl < planes; ++pl) {
      const Scalar* src = x.data() + pl * h * w;
      for (Index oy = 0; oy < oh; ++oy)
        for (Index ox = 0; ox < ow; ++ox) {
          Index best = (oy * stride_) * w + ox * stride_;
          for (Index ky = 0; ky < window_; ++ky)
            for (Index kx = 0; kx < window_; ++kx) {
              const Index idx = (oy * stride_ + ky) * w + ox * stride_ + kx;
              if (src[idx] > src[best]) best = idx;
            }
          const Index o = pl * oh * ow + oy * ow + ox;
          y[o] = src[best];
          argmax_[static_cast<std::size_t>(o)] = pl * h * w + best;
        }
    }
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    Tensor<Scalar> dx(in_shape_);
    for (Index o = 0; o < dy.size(); ++o) dx[argmax_[static_cast<std::size_t>(o)]] += dy[o];
    return dx;
  }

 private:
  Index window_, stride_;
  Shape in_shape_;
  std::vector<Index> argmax_;
};

/// Hard sign of activations; backward through the configured surrogate.
template <typename Scalar>
class BinActivation : public LayerBase<BinActivation<Scalar>, Scalar> {
 public:
  BinActivation(const std::string& prefix, const SteKind& ste) : ste_(ste) {
    if (ste_.trainable_beta())
      beta_.emplace(prefix + ".beta", ParamRole::SwishBeta, Tensor<Scalar>::vector({static_cast<Scalar>(ste_.param)}));
  }
  LayerKind kind() const override { return LayerKind::BinActivation; }
  const SteKind& ste() const { return ste_; }
  Scalar beta() const { return beta_ ? beta_->value[0] : static_cast<Scalar>(ste_.param); }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, const PassContext& ctx) override {
    x_ = x;
    if (!ctx.surrogate) return sign_forward(x);
    Tensor<Scalar> y(x.shape());
    const Scalar b = beta();
    for (Index i = 0; i < x.size(); ++i) y[i] = ste_primitive(ste_, x[i], b);
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    if (dy.shape() != x_.shape()) throw ShapeError("activation backward shape mismatch");
    Tensor<Scalar> dx(x_.shape());
    std::vector<Scalar> db(beta_ ? static_cast<std::size_t>(x_.size()) : 0);
    ste_derivative_span(ste_, x_.data(), x_.size(), beta(), dx.data(), beta_ ? db.data() : nullptr);
    Scalar acc = 0;
    for (Index i = 0; i < dx.size(); ++i) {
      if (beta_) acc += dy[i] * db[static_cast<std::size_t>(i)];
      dx[i] *= dy[i];
    }
    if (beta_) beta_->grad[0] += acc;
    return dx;
  }

  std::vector<Param<Scalar>*> params() override {
    if (beta_) return {&*beta_};
    return {};
  }

 private:
  SteKind ste_;
  std::optional<Param<Scalar>> beta_;
  Tensor<Scalar> x_;
};

/// Float clip(x, -1, 1), used when activations are left unbinarized.
template <typename Scalar>
class HardTanh : public LayerBase<HardTanh<Scalar>, Scalar> {
 public:
  LayerKind kind() const override { return LayerKind::HardTanh; }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, const PassContext&) override {
    x_ = x;
    Tensor<Scalar> y(x.shape());
    for (Index i = 0; i < x.size(); ++i) y[i] = std::clamp(x[i], Scalar(-1), Scalar(1));
    return y;
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    return ste_backward(SteKind::htanh(), dy, x_);
  }

 private:
  Tensor<Scalar> x_;
};

template <typename Scalar>
class Flatten : public LayerBase<Flatten<Scalar>, Scalar> {
 public:
  LayerKind kind() const override { return LayerKind::Flatten; }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, const PassContext&) override {
    in_shape_ = x.shape();
    return x.reshaped({x.dim(0), x.size() / x.dim(0)});
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override { return dy.reshaped(in_shape_); }

 private:
  Shape in_shape_;
};

// ---------------------------------------------------------------------------

template <typename Scalar>
struct LossResult {
  Scalar loss;
  Tensor<Scalar> dlogits;
};

/// Mean over the batch of -log softmax(logits)[label], with its gradient.
template <typename Scalar>
LossResult<Scalar> softmax_cross_entropy(const Tensor<Scalar>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<Index>(labels.size()))
    throw ShapeError("logits " + shape_string(logits.shape()) + " do not match " + std::to_string(labels.size()) +
                     " labels");
  const Index n = logits.dim(0), classes = logits.dim(1);
  Tensor<Scalar> d(logits.shape());
  Scalar total = 0;
  for (Index r = 0; r < n; ++r) {
    const int label = labels[static_cast<std::size_t>(r)];
    if (label < 0 || label >= classes)
      throw DomainError("label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
    const Scalar* row = logits.data() + r * classes;
    const Scalar mx = *std::max_element(row, row + classes);
    Scalar sum = 0;
    for (Index c = 0; c < classes; ++c) sum += std::exp(row[c] - mx);
    const Scalar lse = mx + std::log(sum);
    total += lse - row[label];
    for (Index c = 0; c < classes; ++c) {
      const Scalar p = std::exp(row[c] - lse);
      d[r * classes + c] = (p - (c == label ? Scalar(1) : Scalar(0))) / static_cast<Scalar>(n);
    }
  }
  return {total / static_cast<Scalar>(n), std::move(d)};
}

}  // namespace bnnq
