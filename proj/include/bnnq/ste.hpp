#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <string_view>

#include "bnnq/tensor.hpp"

namespace bnnq {

enum class SteVariant { Htanh, HtanhScaled, Tanh, BiReal, SwishFixed, SwishTrainable };

/// Surrogate derivative used in place of d sign(x)/dx during backward.
/// `param` is k for HtanhScaled, beta for SwishFixed and the initial beta for
/// SwishTrainable; unused otherwise.
struct SteKind {
  SteVariant variant = SteVariant::Htanh;
  double param = 1.0;

  static SteKind htanh() { return {SteVariant::Htanh, 1.0}; }
  static SteKind htanh_scaled(double k) { return checked({SteVariant::HtanhScaled, k}); }
  static SteKind tanh() { return {SteVariant::Tanh, 1.0}; }
  static SteKind bireal() { return {SteVariant::BiReal, 1.0}; }
  static SteKind swish(double beta) { return checked({SteVariant::SwishFixed, beta}); }
  static SteKind swish_trainable(double beta0) { return checked({SteVariant::SwishTrainable, beta0}); }

  bool is_swish() const { return variant == SteVariant::SwishFixed || variant == SteVariant::SwishTrainable; }
  bool trainable_beta() const { return variant == SteVariant::SwishTrainable; }

  /// Round-trips through parse(): htanh, htanh:K, tanh, bireal, ss:B, ss_t:B0.
  std::string name() const;
  static SteKind parse(std::string_view text);

  friend bool operator==(const SteKind&, const SteKind&) = default;

 private:
  static SteKind checked(SteKind k) {
    if (!(k.param > 0.0) || !std::isfinite(k.param))
      throw DomainError("STE parameter must be positive, got " + std::to_string(k.param));
    return k;
  }
};

inline std::string format_param(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string SteKind::name() const {
  switch (variant) {
    case SteVariant::Htanh: return "htanh";
    case SteVariant::HtanhScaled: return "htanh:" + format_param(param);
    case SteVariant::Tanh: return "tanh";
    case SteVariant::BiReal: return "bireal";
    case SteVariant::SwishFixed: return "ss:" + format_param(param);
    case SteVariant::SwishTrainable: return "ss_t:" + format_param(param);
  }
  return "?";
}

inline SteKind SteKind::parse(std::string_view text) {
  const auto colon = text.find(':');
  const std::string head(text.substr(0, colon));
  double value = 0.0;
  const bool has_value = colon != std::string_view::npos;
  if (has_value) {
    const std::string tail(text.substr(colon + 1));
    try {
      std::size_t used = 0;
      value = std::stod(tail, &used);
      if (used != tail.size()) throw std::invalid_argument(tail);
    } catch (const std::exception&) {
      throw ConfigError("bad STE parameter in '" + std::string(text) + "'");
    }
  }
  try {
    if (head == "htanh") return has_value ? htanh_scaled(value) : htanh();
    if (head == "htanh3") return htanh_scaled(3.0);
    if (head == "tanh" && !has_value) return tanh();
    if (head == "bireal" && !has_value) return bireal();
    if (head == "ss" && has_value) return swish(value);
    if (head == "ss_t") return swish_trainable(has_value ? value : 5.0);
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  throw ConfigError("unknown STE '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// Scalar kernels

/// +1 for x > 0, -1 otherwise (including zero).
template <typename Scalar>
inline Scalar sign_value(Scalar x) {
  return x > Scalar(0) ? Scalar(1) : Scalar(-1);
}

template <typename Scalar>
inline Scalar sigmoid(Scalar z) {
  if (z >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-z));
  const Scalar e = std::exp(z);
  return e / (Scalar(1) + e);
}

/// SignSwish with unit slope; SS_beta(x) is evaluated as this at u = beta * x.
template <typename Scalar>
inline Scalar sswish_unit(Scalar u) {
  const Scalar s = sigmoid(u);
  return Scalar(2) * s * (Scalar(1) + u * (Scalar(1) - s)) - Scalar(1);
}

template <typename Scalar>
inline Scalar sswish_value(Scalar x, Scalar beta) {
  return sswish_unit(beta * x);
}

/// dSS_beta/dx = 2 beta s(1-s) [2 + beta x (1 - 2s)], s = sigmoid(beta x).
template <typename Scalar>
inline Scalar sswish_grad_value(Scalar x, Scalar beta) {
  const Scalar u = beta * x;
  const Scalar s = sigmoid(u);
  return Scalar(2) * beta * s * (Scalar(1) - s) * (Scalar(2) + u * (Scalar(1) - Scalar(2) * s));
}

/// dSS_beta/dbeta = 2 x s(1-s) [2 + beta x (1 - 2s)] = (x / beta) dSS_beta/dx.
template <typename Scalar>
inline Scalar sswish_beta_grad_value(Scalar x, Scalar beta) {
  const Scalar u = beta * x;
  const Scalar s = sigmoid(u);
  return Scalar(2) * x * s * (Scalar(1) - s) * (Scalar(2) + u * (Scalar(1) - Scalar(2) * s));
}

/// Surrogate derivative D(x). `beta` is the live value for SwishTrainable and
/// ignored by every other variant.
template <typename Scalar>
inline Scalar ste_derivative(const SteKind& kind, Scalar x, Scalar beta) {
  const Scalar ax = std::abs(x);
  switch (kind.variant) {
    case SteVariant::Htanh:
      return ax <= Scalar(1) ? Scalar(1) : Scalar(0);
    case SteVariant::HtanhScaled: {
      const Scalar k = static_cast<Scalar>(kind.param);
      return ax <= Scalar(1) / k ? k : Scalar(0);
    }
    case SteVariant::Tanh: {
      // sech^2 as 4e / (1 + e)^2 with e = exp(-2|x|): no cancellation in the tails.
      const Scalar e = std::exp(Scalar(-2) * ax);
      return Scalar(4) * e / ((Scalar(1) + e) * (Scalar(1) + e));
    }
    case SteVariant::BiReal:
      if (x >= Scalar(-1) && x < Scalar(0)) return Scalar(2) + Scalar(2) * x;
      if (x >= Scalar(0) && x <= Scalar(1)) return Scalar(2) - Scalar(2) * x;
      return Scalar(0);
    case SteVariant::SwishFixed:
      return sswish_grad_value(x, static_cast<Scalar>(kind.param));
    case SteVariant::SwishTrainable:
      return sswish_grad_value(x, beta);
  }
  return Scalar(0);
}

/// Antiderivative of D(x): the smooth or piecewise function whose exact
/// derivative is the surrogate. Used only by the surrogate-twin forward that
/// gradient checks differentiate numerically.
template <typename Scalar>
inline Scalar ste_primitive(const SteKind& kind, Scalar x, Scalar beta) {
  switch (kind.variant) {
    case SteVariant::Htanh:
      return std::clamp(x, Scalar(-1), Scalar(1));
    case SteVariant::HtanhScaled:
      return std::clamp(static_cast<Scalar>(kind.param) * x, Scalar(-1), Scalar(1));
    case SteVariant::Tanh:
      return std::tanh(x);
    case SteVariant::BiReal:
      if (x < Scalar(-1)) return Scalar(-1);
      if (x < Scalar(0)) return Scalar(2) * x + x * x;
      if (x < Scalar(1)) return Scalar(2) * x - x * x;
      return Scalar(1);
    case SteVariant::SwishFixed:
      return sswish_value(x, static_cast<Scalar>(kind.param));
    case SteVariant::SwishTrainable:
      return sswish_value(x, beta);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Tensor forms

template <typename Scalar>
Tensor<Scalar> sign_forward(const Tensor<Scalar>& x) {
  Tensor<Scalar> y(x.shape());
  for (Index i = 0; i < x.size(); ++i) y[i] = sign_value(x[i]);
  return y;
}

template <typename Scalar>
Tensor<Scalar> sswish_forward(const Tensor<Scalar>& x, Scalar beta) {
  if (!(beta > Scalar(0))) throw DomainError("SignSwish beta must be positive");
  Tensor<Scalar> y(x.shape());
  for (Index i = 0; i < x.size(); ++i) y[i] = sswish_value(x[i], beta);
  return y;
}

template <typename Scalar>
Tensor<Scalar> sswish_backward(const Tensor<Scalar>& x, Scalar beta) {
  if (!(beta > Scalar(0))) throw DomainError("SignSwish beta must be positive");
  Tensor<Scalar> y(x.shape());
  for (Index i = 0; i < x.size(); ++i) y[i] = sswish_grad_value(x[i], beta);
  return y;
}

template <typename Scalar>
Tensor<Scalar> sswish_beta_grad(const Tensor<Scalar>& x, Scalar beta) {
  if (!(beta > Scalar(0))) throw DomainError("SignSwish beta must be positive");
  Tensor<Scalar> y(x.shape());
  for (Index i = 0; i < x.size(); ++i) y[i] = sswish_beta_grad_value(x[i], beta);
  return y;
}

/// D(x) over a contiguous run, vectorized. When `dbeta` is non-null (SignSwish
/// only) it receives dSS/dbeta from the same sigmoid evaluation. Matches the
/// scalar forms up to the rounding of the vectorized exp.
template <typename Scalar>
void ste_derivative_span(const SteKind& kind, const Scalar* x, Index n, Scalar beta, Scalar* d,
                         Scalar* dbeta = nullptr) {
  using Arr = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  const Scalar one(1), two(2), zero(0);
  const Scalar b = kind.variant == SteVariant::SwishFixed ? static_cast<Scalar>(kind.param) : beta;
  constexpr Index kBlock = 512;  // keeps the temporaries in L1
  for (Index off = 0; off < n; off += kBlock) {
    const Index m = std::min(kBlock, n - off);
    const Eigen::Map<const Arr> xa(x + off, m);
    Eigen::Map<Arr> da(d + off, m);
    switch (kind.variant) {
      case SteVariant::Htanh:
        da = (xa.abs() <= one).select(Arr::Constant(m, one), zero);
        break;
      case SteVariant::HtanhScaled: {
        const Scalar k = static_cast<Scalar>(kind.param);
        da = (xa.abs() <= one / k).select(Arr::Constant(m, k), zero);
        break;
      }
      case SteVariant::Tanh: {
        const Eigen::Array<Scalar, Eigen::Dynamic, 1, 0, kBlock, 1> e = (Scalar(-2) * xa.abs()).exp();
        da = Scalar(4) * e / (one + e).square();
        break;
      }
      case SteVariant::BiReal:
        da = (xa.abs() <= one).select(two - two * xa.abs(), zero);
        break;
      case SteVariant::SwishFixed:
      case SteVariant::SwishTrainable: {
        Eigen::Array<Scalar, Eigen::Dynamic, 1, 0, kBlock, 1> u = b * xa;
        Eigen::Array<Scalar, Eigen::Dynamic, 1, 0, kBlock, 1> s = (one + (-u).exp()).inverse();
        // common = 2 s(1-s) [2 + u(1-2s)]; d/dx = beta * common, d/dbeta = x * common
        s = two * s * (one - s) * (two + u * (one - two * s));
        da = b * s;
        if (dbeta) Eigen::Map<Arr>(dbeta + off, m) = xa * s;
        break;
      }
    }
  }
}

/// upstream * D(x) elementwise.
template <typename Scalar>
Tensor<Scalar> ste_backward(const SteKind& kind, const Tensor<Scalar>& upstream, const Tensor<Scalar>& x,
                            Scalar beta = Scalar(1)) {
  if (upstream.shape() != x.shape())
    throw ShapeError("ste_backward shape mismatch " + shape_string(upstream.shape()) + " vs " +
                     shape_string(x.shape()));
  Tensor<Scalar> g(x.shape());
  ste_derivative_span(kind, x.data(), x.size(), beta, g.data());
  for (Index i = 0; i < x.size(); ++i) g[i] *= upstream[i];
  return g;
}

}  // namespace bnnq
