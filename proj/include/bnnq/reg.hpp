#pragma once

#include <functional>
#include <string>
#include <string_view>

#include "bnnq/ste.hpp"
#include "bnnq/tensor.hpp"

namespace bnnq {

enum class RegKind { None, R1, R2 };
enum class ScaleMode { TrainablePerFilter, DynamicXnor, NoScale };

/// Smallest scale ever produced by initialization, the dynamic estimator, or
/// the post-step clamp.
inline constexpr double kScaleFloor = 1e-3;

struct RegConfig {
  RegKind kind = RegKind::None;
  double lambda = 0.0;
  ScaleMode scale_mode = ScaleMode::TrainablePerFilter;
  /// Optional per-epoch multiplier on lambda; identity when empty.
  std::function<double(int)> lambda_multiplier;

  double lambda_at(int epoch) const { return lambda_multiplier ? lambda * lambda_multiplier(epoch) : lambda; }
  bool active() const { return kind != RegKind::None && lambda > 0.0; }
};

std::string to_string(RegKind kind);
std::string to_string(ScaleMode mode);
RegKind parse_reg_kind(std::string_view text);
ScaleMode parse_scale_mode(std::string_view text);

namespace detail {

template <typename Scalar>
void check_scales(const Tensor<Scalar>& w, const Tensor<Scalar>& alpha) {
  if (w.rank() < 1 || alpha.rank() != 1 || alpha.dim(0) != w.dim(0))
    throw ShapeError("scale vector " + shape_string(alpha.shape()) + " does not match leading axis of " +
                     shape_string(w.shape()));
  for (Index c = 0; c < alpha.size(); ++c)
    if (!(alpha[c] > Scalar(0))) throw DomainError("scales must be positive");
}

template <typename Scalar>
Scalar zero_tie_sign(Scalar v) {
  return v > Scalar(0) ? Scalar(1) : (v < Scalar(0) ? Scalar(-1) : Scalar(0));
}

}  // namespace detail

/// dR/dw for one weight under scale a (subgradient 0 at the kinks).
template <typename Scalar>
inline Scalar reg_grad_w_elem(RegKind kind, Scalar w, Scalar a) {
  const Scalar d = a - std::abs(w);
  const Scalar sw = detail::zero_tie_sign(w);
  switch (kind) {
    case RegKind::R1: return -detail::zero_tie_sign(d) * sw;
    case RegKind::R2: return Scalar(-2) * d * sw;
    case RegKind::None: break;
  }
  return Scalar(0);
}

/// dR/da contributed by one weight.
template <typename Scalar>
inline Scalar reg_grad_alpha_elem(RegKind kind, Scalar w, Scalar a) {
  const Scalar d = a - std::abs(w);
  switch (kind) {
    case RegKind::R1: return detail::zero_tie_sign(d);
    case RegKind::R2: return Scalar(2) * d;
    case RegKind::None: break;
  }
  return Scalar(0);
}

/// Sum over all weights of R(w; alpha_c), alpha_c indexed by w's leading axis.
/// R1 = |alpha - |w||, R2 = (alpha - |w|)^2.
template <typename Scalar>
Scalar reg_value(RegKind kind, const Tensor<Scalar>& w, const Tensor<Scalar>& alpha) {
  detail::check_scales(w, alpha);
  if (kind == RegKind::None) return Scalar(0);
  const Index channels = w.dim(0), per = w.size() / channels;
  Scalar total = 0;
  for (Index c = 0; c < channels; ++c) {
    Scalar acc = 0;
    for (Index i = 0; i < per; ++i) {
      const Scalar d = alpha[c] - std::abs(w[c * per + i]);
      acc += kind == RegKind::R1 ? std::abs(d) : d * d;
    }
    total += acc;
  }
  return total;
}

/// dR/dw with subgradient 0 at w = 0 and at |w| = alpha.
template <typename Scalar>
Tensor<Scalar> reg_grad_w(RegKind kind, const Tensor<Scalar>& w, const Tensor<Scalar>& alpha) {
  detail::check_scales(w, alpha);
  Tensor<Scalar> g(w.shape());
  if (kind == RegKind::None) return g;
  const Index channels = w.dim(0), per = w.size() / channels;
  for (Index c = 0; c < channels; ++c) {
    for (Index i = 0; i < per; ++i) g[c * per + i] = reg_grad_w_elem(kind, w[c * per + i], alpha[c]);
  }
  return g;
}

/// dR/dalpha summed per channel; R1 contributes 0 at exact ties.
template <typename Scalar>
Tensor<Scalar> reg_grad_alpha(RegKind kind, const Tensor<Scalar>& w, const Tensor<Scalar>& alpha) {
  detail::check_scales(w, alpha);
  Tensor<Scalar> g(alpha.shape());
  if (kind == RegKind::None) return g;
  const Index channels = w.dim(0), per = w.size() / channels;
  for (Index c = 0; c < channels; ++c) {
    Scalar acc = 0;
    for (Index i = 0; i < per; ++i) acc += reg_grad_alpha_elem(kind, w[c * per + i], alpha[c]);
    g[c] = acc;
  }
  return g;
}

/// Per-channel mean |W_c|, floored at kScaleFloor. Used by the XNOR-style
/// dynamic scale and as the R2 / no-regularizer initializer.
template <typename Scalar>
Tensor<Scalar> dynamic_scale(const Tensor<Scalar>& w) {
  if (w.rank() < 1) throw ShapeError("dynamic_scale needs a leading channel axis");
  const Index channels = w.dim(0), per = w.size() / channels;
  Tensor<Scalar> alpha({channels});
  for (Index c = 0; c < channels; ++c) {
    Scalar acc = 0;
    for (Index i = 0; i < per; ++i) acc += std::abs(w[c * per + i]);
    const Scalar m = acc / static_cast<Scalar>(per);
    alpha[c] = m > Scalar(0) ? m : static_cast<Scalar>(kScaleFloor);
  }
  return alpha;
}

/// Minimizer of sum_i R(alpha; w_i) per filter: median |W_c| for R1, mean for
/// R2 (and for no regularizer). Zero results are replaced by kScaleFloor.
template <typename Scalar>
Tensor<Scalar> init_scale(RegKind kind, const Tensor<Scalar>& w) {
  if (kind != RegKind::R1) return dynamic_scale(w);
  if (w.rank() < 1) throw ShapeError("init_scale needs a leading channel axis");
  const Index channels = w.dim(0), per = w.size() / channels;
  Tensor<Scalar> alpha({channels});
  std::vector<Scalar> mags(static_cast<std::size_t>(per));
  for (Index c = 0; c < channels; ++c) {
    for (Index i = 0; i < per; ++i) mags[static_cast<std::size_t>(i)] = std::abs(w[c * per + i]);
    const Scalar m = median<Scalar>(mags);
    alpha[c] = m > Scalar(0) ? m : static_cast<Scalar>(kScaleFloor);
  }
  return alpha;
}

inline std::string to_string(RegKind kind) {
  switch (kind) {
    case RegKind::None: return "none";
    case RegKind::R1: return "r1";
    case RegKind::R2: return "r2";
  }
  return "?";
}

inline std::string to_string(ScaleMode mode) {
  switch (mode) {
    case ScaleMode::TrainablePerFilter: return "trainable";
    case ScaleMode::DynamicXnor: return "xnor";
    case ScaleMode::NoScale: return "none";
  }
  return "?";
}

inline RegKind parse_reg_kind(std::string_view text) {
  if (text == "none") return RegKind::None;
  if (text == "r1" || text == "R1") return RegKind::R1;
  if (text == "r2" || text == "R2") return RegKind::R2;
  throw ConfigError("unknown regularizer '" + std::string(text) + "'");
}

inline ScaleMode parse_scale_mode(std::string_view text) {
  if (text == "trainable") return ScaleMode::TrainablePerFilter;
  if (text == "xnor" || text == "dynamic") return ScaleMode::DynamicXnor;
  if (text == "none") return ScaleMode::NoScale;
  throw ConfigError("unknown scale mode '" + std::string(text) + "'");
}

}  // namespace bnnq
