#include <random>

#include "bnnq/optim.hpp"
#include "doctest.h"

using namespace bnnq;
using T = Tensor<float>;

namespace {

/// Textbook Adam on one scalar, in double.
struct ScalarAdam {
  double m = 0, v = 0, x;
  int t = 0;
  double step(double g, double lr, const AdamHyper& h = {}) {
    ++t;
    m = h.beta1 * m + (1 - h.beta1) * g;
    v = h.beta2 * v + (1 - h.beta2) * g * g;
    const double mh = m / (1 - std::pow(h.beta1, t)), vh = v / (1 - std::pow(h.beta2, t));
    x -= lr * mh / (std::sqrt(vh) + h.eps);
    return x;
  }
};

}  // namespace

TEST_CASE("first Adam step moves each entry by about lr against its gradient sign") {
  Param<float> p("w", ParamRole::Weight, T::vector({1.0f, -2.0f, 0.5f}));
  p.grad = T::vector({0.3f, -4.0f, 1e-3f});
  Adam<float> adam;
  adam.step({&p}, 0.01);
  CHECK(adam.steps() == 1);
  // Bias correction makes m_hat = g and v_hat = g^2 on the first step.
  CHECK(p.value[0] == doctest::Approx(1.0 - 0.01 * 0.3 / (0.3 + 1e-8)).epsilon(1e-6));
  CHECK(p.value[1] == doctest::Approx(-2.0 + 0.01).epsilon(1e-6));
  CHECK(p.value[2] == doctest::Approx(0.5 - 0.01 * 1e-3 / (1e-3 + 1e-8)).epsilon(1e-6));
}

TEST_CASE("Adam trajectory matches the scalar reference") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  const int count = 16;
  Param<float> p("w", ParamRole::Weight, T({count}));
  std::vector<ScalarAdam> ref(count);
  for (int i = 0; i < count; ++i) {
    p.value[i] = static_cast<float>(n(rng));
    ref[static_cast<std::size_t>(i)].x = p.value[i];
  }
  Adam<float> adam;
  for (int s = 0; s < 200; ++s) {
    const double lr = s < 100 ? 1e-2 : 1e-3;
    for (int i = 0; i < count; ++i) {
      p.grad[i] = static_cast<float>(n(rng));
      ref[static_cast<std::size_t>(i)].step(p.grad[i], lr);
    }
    adam.step({&p}, lr);
  }
  for (int i = 0; i < count; ++i) CHECK(p.value[i] == doctest::Approx(ref[static_cast<std::size_t>(i)].x).epsilon(1e-4));
}

TEST_CASE("Adam minimizes a convex quadratic") {
  Param<float> p("w", ParamRole::Weight, T::vector({5.0f, -3.0f}));
  Adam<float> adam;
  for (int s = 0; s < 3000; ++s) {
    for (Index i = 0; i < 2; ++i) p.grad[i] = 2.0f * (p.value[i] - static_cast<float>(i + 1));
    adam.step({&p}, 0.01);
  }
  CHECK(p.value[0] == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(p.value[1] == doctest::Approx(2.0).epsilon(1e-3));
}

TEST_CASE("non-finite gradients abort the step without side effects") {
  Param<float> a("a", ParamRole::Weight, T::vector({1.0f, 2.0f}));
  Param<float> b("b", ParamRole::Weight, T::vector({3.0f}));
  Adam<float> adam;
  a.grad = T::vector({0.1f, 0.2f});
  b.grad = T::vector({0.3f});
  adam.step({&a, &b}, 0.1);
  const T a0 = a.value, b0 = b.value, m0 = adam.first_moments()[0], v0 = adam.second_moments()[1];
  a.grad = T::vector({0.1f, 0.2f});
  for (float bad : {std::numeric_limits<float>::quiet_NaN(), std::numeric_limits<float>::infinity()}) {
    b.grad = T::vector({bad});
    CHECK_THROWS_AS(adam.step({&a, &b}, 0.1), DivergenceError);
    CHECK(a.value == a0);
    CHECK(b.value == b0);
    CHECK(adam.first_moments()[0] == m0);
    CHECK(adam.second_moments()[1] == v0);
    CHECK(adam.steps() == 1);
  }
  CHECK_THROWS_WITH_AS(adam.step({&a, &b}, 0.1), doctest::Contains("in b at element 0"), DivergenceError);
}

TEST_CASE("scales and betas are floored, latent weights optionally clipped") {
  Param<float> alpha("s", ParamRole::Scale, T::vector({1e-3f, 0.5f}));
  Param<float> beta("b", ParamRole::SwishBeta, T::vector({1e-3f}));
  Param<float> latent("l", ParamRole::Latent, T::vector({0.999f, -0.999f}));
  Param<float> weight("w", ParamRole::Weight, T::vector({0.999f}));
  alpha.grad = T::vector({1.0f, 1.0f});
  beta.grad = T::vector({1.0f});
  latent.grad = T::vector({-1.0f, 1.0f});
  weight.grad = T::vector({-1.0f});
  Adam<float> adam({}, true);
  adam.step({&alpha, &beta, &latent, &weight}, 0.1);
  CHECK(alpha.value[0] == static_cast<float>(kScaleFloor));
  CHECK(alpha.value[1] == doctest::Approx(0.4));
  CHECK(beta.value[0] == static_cast<float>(kScaleFloor));
  CHECK(latent.value == T::vector({1.0f, -1.0f}));
  CHECK(weight.value[0] > 1.0f);  // float weights are never clipped

  Param<float> free("l", ParamRole::Latent, T::vector({0.999f}));
  free.grad = T::vector({-1.0f});
  Adam<float> unclipped;
  unclipped.step({&free}, 0.1);
  CHECK(free.value[0] > 1.0f);
}

TEST_CASE("optimizer state must match the parameter list") {
  Param<float> a("a", ParamRole::Weight, T::vector({1.0f}));
  Param<float> b("b", ParamRole::Weight, T::vector({1.0f, 2.0f}));
  Adam<float> adam;
  adam.step({&a}, 0.1);
  CHECK_THROWS_AS(adam.step({&a, &b}, 0.1), StateError);
  CHECK_THROWS_AS(adam.step({&b}, 0.1), StateError);
}

TEST_CASE("step-decay schedule") {
  const LrSchedule s(0.005, {{30, 0.1}, {45, 0.1}});
  CHECK(s.lr_at(0) == 0.005);
  CHECK(s.lr_at(29) == 0.005);
  CHECK(s.lr_at(30) == doctest::Approx(5e-4));
  CHECK(s.lr_at(44) == doctest::Approx(5e-4));
  CHECK(s.lr_at(45) == doctest::Approx(5e-5));
  CHECK(s.lr_at(1000) == doctest::Approx(5e-5));
  CHECK_THROWS_AS(s.lr_at(-1), DomainError);
  CHECK_THROWS_AS(LrSchedule(0.0, {}), ConfigError);
  CHECK_THROWS_AS(LrSchedule(0.1, {{10, 0.5}, {10, 0.5}}), ConfigError);
  CHECK(LrSchedule(0.1, {}).lr_at(500) == 0.1);
}
