#include "bnnq/gradcheck.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>

#include "bnnq/network.hpp"

namespace bnnq {

namespace {

using T = Tensor<double>;
constexpr double kStep = 1e-6;

double rel_err(const T& a, const T& n) {
  double diff = 0, scale = 1e-12;
  for (Index i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - n[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(n[i])});
  }
  return diff / scale;
}

/// Numeric gradient of `loss` with respect to every entry of `x`.
template <typename F>
T numeric_grad(T& x, F&& loss) {
  T g(x.shape());
  for (Index i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + kStep;
    const double lp = loss();
    x[i] = keep - kStep;
    const double lm = loss();
    x[i] = keep;
    g[i] = (lp - lm) / (2 * kStep);
  }
  return g;
}

double dot(const T& a, const T& b) {
  double s = 0;
  for (Index i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

class Suite {
 public:
  explicit Suite(const GradcheckOptions& o) : opts_(o), rng_(o.seed) {}

  T normal(Shape s, double sd = 1.0) {
    std::normal_distribution<double> d(0.0, sd);
    T t(std::move(s));
    for (Index i = 0; i < t.size(); ++i) t[i] = d(rng_);
    return t;
  }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }

  void add(std::string name, double err, double tol = kUnitTolerance) {
    report_.cases.push_back({std::move(name), err, tol});
  }

  double swish_grad(double x, double beta) const {
    return opts_.swish_grad_override ? opts_.swish_grad_override(x, beta) : sswish_grad_value(x, beta);
  }

  // -------------------------------------------------------------------------

  void estimators() {
    const std::vector<SteKind> kinds{SteKind::htanh(),    SteKind::htanh_scaled(3.0), SteKind::tanh(),
                                     SteKind::bireal(),   SteKind::swish(5.0),        SteKind::swish(10.0),
                                     SteKind::swish(1.0), SteKind::swish_trainable(2.5)};
    for (const SteKind& k : kinds) {
      const double beta = k.param;
      // Sample away from the kinks of the piecewise primitives.
      T x({200});
      for (Index i = 0; i < x.size(); ++i) {
        double v;
        do v = uniform(-3.0, 3.0);
        while (std::abs(std::abs(v) - 1.0) < 1e-3 || std::abs(std::abs(v) - 1.0 / 3.0) < 1e-3 || std::abs(v) < 1e-3);
        x[i] = v;
      }
      T analytic(x.shape()), numeric(x.shape());
      for (Index i = 0; i < x.size(); ++i) {
        analytic[i] = k.is_swish() ? swish_grad(x[i], beta) : ste_derivative(k, x[i], beta);
        numeric[i] = (ste_primitive(k, x[i] + kStep, beta) - ste_primitive(k, x[i] - kStep, beta)) / (2 * kStep);
      }
      add("estimator " + k.name() + " d/dx", rel_err(analytic, numeric));
      if (k.is_swish()) {
        for (Index i = 0; i < x.size(); ++i) {
          analytic[i] = sswish_beta_grad_value(x[i], beta);
          numeric[i] = (sswish_value(x[i], beta + kStep) - sswish_value(x[i], beta - kStep)) / (2 * kStep);
        }
        add("estimator " + k.name() + " d/dbeta", rel_err(analytic, numeric));
      }
    }
  }

  void roots() {
    for (double beta : {1.0, 5.0, 10.0}) {
      auto f = [&](double x) { return swish_grad(x, beta); };
      auto bisect = [&](double lo, double hi) {
        double flo = f(lo);
        if ((flo > 0) == (f(hi) > 0)) return std::numeric_limits<double>::quiet_NaN();
        for (int it = 0; it < 200; ++it) {
          const double mid = 0.5 * (lo + hi);
          const double fm = f(mid);
          if ((fm > 0) == (flo > 0)) {
            lo = mid;
            flo = fm;
          } else {
            hi = mid;
          }
        }
        return 0.5 * (lo + hi);
      };
      SwishRoots r;
      r.beta = beta;
      r.positive = bisect(0.5 / beta, 5.0 / beta);
      r.negative = bisect(-5.0 / beta, -0.5 / beta);
      r.slope_at_zero = opts_.swish_grad_override
                            ? opts_.swish_grad_override(0.0, beta)
                            : static_cast<double>(sswish_grad_value(0.0f, static_cast<float>(beta)));
      const double want = kSwishRootConstant / beta;
      const double slope_tol = beta * std::numeric_limits<float>::epsilon();
      r.pass = std::abs(r.positive - want) <= 0.005 * want && std::abs(-r.negative - want) <= 0.005 * want &&
               std::abs(r.slope_at_zero - beta) <= slope_tol;
      report_.roots.push_back(r);
    }
  }

  void regularizers() {
    for (RegKind kind : {RegKind::R1, RegKind::R2}) {
      T w = normal({4, 12}, 0.5);
      T alpha({4});
      for (Index c = 0; c < 4; ++c) alpha[c] = uniform(0.2, 0.8);
      // Keep away from the kinks |w| = alpha and w = 0.
      for (Index i = 0; i < w.size(); ++i) {
        const double a = alpha[i / 12];
        if (std::abs(std::abs(w[i]) - a) < 1e-3) w[i] += 0.01;
        if (std::abs(w[i]) < 1e-3) w[i] = 0.05;
      }
      auto loss = [&] { return reg_value(kind, w, alpha); };
      add("reg " + to_string(kind) + " d/dw", rel_err(reg_grad_w(kind, w, alpha), numeric_grad(w, loss)));
      add("reg " + to_string(kind) + " d/dalpha", rel_err(reg_grad_alpha(kind, w, alpha), numeric_grad(alpha, loss)));
    }
  }

  void cross_entropy() {
    T logits = normal({6, 5}, 2.0);
    const std::vector<int> labels{0, 4, 2, 2, 1, 3};
    const auto res = softmax_cross_entropy<double>(logits, labels);
    auto loss = [&] { return softmax_cross_entropy<double>(logits, labels).loss; };
    add("softmax cross-entropy d/dlogits", rel_err(res.dlogits, numeric_grad(logits, loss)));
  }

  /// Checks dx and every parameter of `layer` under loss = <r, layer(x)>.
  void layer(const std::string& name, Layer<double>& l, T x, const PassContext& ctx, double tol = kUnitTolerance) {
    for (auto* p : l.params()) p->zero_grad();
    const T y = l.forward(x, ctx);
    const T r = normal(y.shape());
    const T dx = l.backward(r);
    auto loss = [&] { return dot(l.forward(x, ctx), r); };
    add(name + " d/dx", rel_err(dx, numeric_grad(x, loss)), tol);
    for (auto* p : l.params()) {
      const T analytic = p->grad;
      add(name + " d/d" + p->name.substr(p->name.find('.') + 1), rel_err(analytic, numeric_grad(p->value, loss)), tol);
    }
  }

  void layers() {
    const PassContext train{true, false}, eval{false, false}, twin{true, true};
    {
      FloatConv<double> conv("conv", normal({3, 2, 3, 3}, 0.4), 1, 1);
      layer("float conv", conv, normal({2, 2, 5, 5}), train);
      FloatConv<double> strided("conv", normal({2, 3, 3, 3}, 0.4), 2, 0);
      layer("float conv stride 2", strided, normal({2, 3, 7, 7}), train);
    }
    {
      FloatLinear<double> lin("lin", normal({4, 7}, 0.4));
      layer("float linear", lin, normal({3, 7}), train);
    }
    {
      BatchNorm<double> bn("bn", 3);
      for (Index c = 0; c < 3; ++c) {
        bn.gamma().value[c] = uniform(0.5, 1.5);
        bn.shift().value[c] = uniform(-0.5, 0.5);
      }
      layer("batchnorm NCHW", bn, normal({4, 3, 2, 2}), train);
      BatchNorm<double> bn2("bn", 5);
      layer("batchnorm NC", bn2, normal({6, 5}), train);
      BatchNorm<double> bn3("bn", 3);
      bn3.forward(normal({4, 3, 2, 2}), train);
      layer("batchnorm eval x", bn3, normal({4, 3, 2, 2}), eval);
      report_.cases.pop_back();  // gamma/shift are constants of the eval path
      report_.cases.pop_back();
    }
    {
      MaxPool<double> pool(2, 2);
      layer("maxpool", pool, normal({2, 2, 4, 4}), train);
    }
    const RegConfig r1{RegKind::R1, 0.0, ScaleMode::TrainablePerFilter, {}};
    const RegConfig noscale{RegKind::None, 0.0, ScaleMode::NoScale, {}};
    for (const SteKind& k : {SteKind::htanh(), SteKind::tanh(), SteKind::swish_trainable(3.0)}) {
      // Hard sign forward: dx and alpha are exact gradients of the layer.
      BinConv<double> bc("bconv", normal({3, 2, 3, 3}, 0.5), 1, 1, k, r1);
      layer("binary conv [" + k.name() + "] hard", bc, normal({2, 2, 4, 4}), train);
      dropLatentAndBeta();
      // Surrogate twin: the latent and beta gradients become exact as well.
      BinConv<double> bs("bconv", normal({3, 2, 3, 3}, 0.5), 1, 1, k, r1);
      layer("binary conv [" + k.name() + "] surrogate", bs, normal({2, 2, 4, 4}), twin);
      BinLinear<double> bl("blin", normal({4, 6}, 0.5), k, r1);
      layer("binary linear [" + k.name() + "] surrogate", bl, normal({3, 6}), twin);
      BinActivation<double> act("act", k);
      layer("binary activation [" + k.name() + "] surrogate", act, normal({3, 8}), twin);
    }
    BinLinear<double> unscaled("blin", normal({4, 6}, 0.5), SteKind::bireal(), noscale);
    layer("binary linear [bireal, no scale] surrogate", unscaled, normal({3, 6}), twin);
  }

  /// Hard-sign layers have an STE latent gradient (and beta), which finite
  /// differences cannot see; only dx and alpha are exact there.
  void dropLatentAndBeta() {
    auto& c = report_.cases;
    std::erase_if(c, [](const GradcheckCase& g) {
      return g.name.find("] hard") != std::string::npos &&
             (g.name.ends_with("d/dlatent") || g.name.ends_with("d/dbeta"));
    });
  }

  void end_to_end() {
    const std::vector<SteKind> kinds{SteKind::htanh(),  SteKind::htanh_scaled(3.0), SteKind::tanh(),
                                     SteKind::bireal(), SteKind::swish(5.0),        SteKind::swish_trainable(2.0)};
    const TopologySpec topo = TopologySpec::parse("fconv:2:3:1:1,bn,act,bconv:3:3:1:1,bn,act,flat,blin:4,bn,act,flin:3");
    for (const SteKind& k : kinds) {
      for (RegKind rk : {RegKind::R1, RegKind::R2}) {
        ModelOptions mo;
        mo.weight_ste = k;
        mo.act_ste = k;
        mo.reg = {rk, 1e-2, ScaleMode::TrainablePerFilter, {}};
        mo.seed = opts_.seed + 17;
        Network<double> net = build_network<double>(topo, {2, 5, 5}, mo);
        T x = normal({4, 2, 5, 5});
        const std::vector<int> labels{0, 2, 1, 2};
        const PassContext ctx{true, true};
        auto loss = [&] {
          const T logits = net.forward(x, ctx);
          return softmax_cross_entropy<double>(logits, labels).loss + mo.reg.lambda * net.reg_value();
        };
        net.zero_grad();
        const auto ce = softmax_cross_entropy<double>(net.forward(x, ctx), labels);
        const T dx = net.backward(ce.dlogits);
        // One relative error over the concatenated gradient: a tensor whose
        // exact gradient vanishes (a bias feeding batchnorm) is judged by its
        // absolute error against the whole gradient, not its own FD noise.
        std::vector<std::pair<std::string, std::pair<T, T>>> parts;
        parts.push_back({"input", {dx, numeric_grad(x, loss)}});
        for (auto* p : net.params()) parts.push_back({p->name, {p->grad, numeric_grad(p->value, loss)}});
        double scale = 1e-12;
        for (const auto& [name, an] : parts)
          for (Index i = 0; i < an.first.size(); ++i)
            scale = std::max({scale, std::abs(an.first[i]), std::abs(an.second[i])});
        double worst = 0;
        std::string worst_name;
        for (const auto& [name, an] : parts) {
          double diff = 0;
          for (Index i = 0; i < an.first.size(); ++i) diff = std::max(diff, std::abs(an.first[i] - an.second[i]));
          if (diff / scale >= worst) {
            worst = diff / scale;
            worst_name = name;
          }
        }
        add("toy net [" + k.name() + ", " + to_string(rk) + "] all params (worst: " + worst_name + ")", worst,
            kEndToEndTolerance);
      }
    }
  }

  GradcheckReport run() {
    const auto t0 = std::chrono::steady_clock::now();
    estimators();
    roots();
    regularizers();
    cross_entropy();
    layers();
    end_to_end();
    report_.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report_;
  }

 private:
  GradcheckOptions opts_;
  std::mt19937_64 rng_;
  GradcheckReport report_;
};

}  // namespace

bool GradcheckReport::passed() const {
  for (const auto& c : cases)
    if (!c.pass()) return false;
  for (const auto& r : roots)
    if (!r.pass) return false;
  return !cases.empty();
}

GradcheckReport run_gradcheck(const GradcheckOptions& opts) { return Suite(opts).run(); }

std::string format_report(const GradcheckReport& r) {
  std::string out;
  char line[256];
  for (const auto& c : r.cases) {
    std::snprintf(line, sizeof line, "[%s] %-64s max rel err %.2e (tol %.0e)\n", c.pass() ? "pass" : "FAIL",
                  c.name.c_str(), c.max_rel_err, c.tolerance);
    out += line;
  }
  for (const auto& s : r.roots) {
    std::snprintf(line, sizeof line,
                  "[%s] SS' roots beta=%-4g at %+.6f / %+.6f (x*beta = %.5f, %.5f; expect %.4f); SS'(0) = %.9g\n",
                  s.pass ? "pass" : "FAIL", s.beta, s.negative, s.positive, s.negative * s.beta, s.positive * s.beta,
                  kSwishRootConstant, s.slope_at_zero);
    out += line;
  }
  int failed = 0;
  for (const auto& c : r.cases) failed += !c.pass();
  for (const auto& s : r.roots) failed += !s.pass;
  std::snprintf(line, sizeof line, "%zu checks, %d failed, %.1f s\n", r.cases.size() + r.roots.size(), failed,
                r.seconds);
  out += line;
  return out;
}

}  // namespace bnnq
