#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace bnnq {

inline constexpr double kUnitTolerance = 1e-4;
inline constexpr double kEndToEndTolerance = 1e-3;
inline constexpr double kSwishRootConstant = 2.3994;

struct GradcheckCase {
  std::string name;
  double max_rel_err = 0;
  double tolerance = 0;
  bool pass() const { return max_rel_err < tolerance; }
};

struct SwishRoots {
  double beta = 0;
  double negative = 0;  // root of SS'_beta on x < 0
  double positive = 0;
  double slope_at_zero = 0;  // SS'_beta(0) in float
  bool pass = false;         // both roots within 0.5% of 2.3994/beta, slope exact
};

struct GradcheckReport {
  std::vector<GradcheckCase> cases;
  std::vector<SwishRoots> roots;
  double seconds = 0;
  bool passed() const;
};

struct GradcheckOptions {
  std::uint64_t seed = 1;
  /// Replaces the analytic SignSwish derivative (x, beta) in the estimator
  /// checks and the root search; used to confirm that the suite fails.
  std::function<double(double, double)> swish_grad_override;
};

/// Central finite differences in double precision against every analytic
/// derivative: estimator units, regularizers, softmax cross-entropy,
/// batchnorm, float and binary layers (scales, SignSwish beta, surrogate
/// latent path), and end-to-end toy networks for each estimator.
/// Error metric per tensor: max |analytic - numeric| / max(|analytic|_inf, |numeric|_inf).
GradcheckReport run_gradcheck(const GradcheckOptions& opts = {});

std::string format_report(const GradcheckReport& r);

}  // namespace bnnq
