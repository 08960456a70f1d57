#include <cmath>

#include "bnnq/gradcheck.hpp"
#include "doctest.h"

using namespace bnnq;

TEST_CASE("every analytic derivative agrees with finite differences") {
  const GradcheckReport r = run_gradcheck();
  INFO(format_report(r));
  CHECK(r.passed());
  CHECK(r.cases.size() > 10);
  for (const auto& c : r.cases) {
    CAPTURE(c.name);
    CHECK(c.pass());
    CHECK(std::isfinite(c.max_rel_err));
  }
  REQUIRE(r.roots.size() >= 2);
  for (const auto& s : r.roots) {
    CAPTURE(s.beta);
    CHECK(s.pass);
    CHECK(s.positive == doctest::Approx(kSwishRootConstant / s.beta).epsilon(5e-3));
    CHECK(s.negative == doctest::Approx(-kSwishRootConstant / s.beta).epsilon(5e-3));
    CHECK(s.slope_at_zero == doctest::Approx(s.beta).epsilon(1e-6));
  }
}

TEST_CASE("a wrong SignSwish derivative is caught") {
  GradcheckOptions o;
  // Drop the beta*x*(1 - 2s) term: the right slope at zero but no roots.
  o.swish_grad_override = [](double x, double beta) {
    const double s = 1.0 / (1.0 + std::exp(-beta * x));
    return 4.0 * beta * s * (1.0 - s);
  };
  const GradcheckReport r = run_gradcheck(o);
  CHECK_FALSE(r.passed());
  bool root_failed = false;
  for (const auto& s : r.roots) root_failed |= !s.pass;
  CHECK(root_failed);
}
