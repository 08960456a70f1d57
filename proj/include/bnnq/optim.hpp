#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "bnnq/layers.hpp"

namespace bnnq {

/// Step-decay schedule: base * product of multipliers whose milestone epoch
/// is <= the queried epoch (a decay "on epoch N" is in effect during N).
struct LrSchedule {
  double base = 1e-3;
  std::vector<std::pair<int, double>> milestones;

  LrSchedule() = default;
  LrSchedule(double base_lr, std::vector<std::pair<int, double>> ms) : base(base_lr), milestones(std::move(ms)) {
    validate();
  }

  void validate() const {
    if (!(base > 0.0)) throw ConfigError("learning rate must be positive");
    for (std::size_t i = 1; i < milestones.size(); ++i)
      if (milestones[i].first <= milestones[i - 1].first)
        throw ConfigError("lr milestones must be strictly increasing in epoch");
  }

  double lr_at(int epoch) const {
    if (epoch < 0) throw DomainError("epoch must be non-negative");
    double lr = base;
    for (const auto& [e, mult] : milestones)
      if (e <= epoch) lr *= mult;
    return lr;
  }
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction over a fixed, ordered list of parameters. After
/// each step scales and SignSwish betas are clamped to >= kScaleFloor, and
/// latent weights are clipped to [-1, 1] when `clip_latent` is set.
template <typename Scalar>
class Adam {
 public:
  explicit Adam(AdamHyper h = {}, bool clip_latent = false) : hyper_(h), clip_latent_(clip_latent) {}

  long long steps() const { return t_; }
  const AdamHyper& hyper() const { return hyper_; }
  bool clip_latent() const { return clip_latent_; }
  std::vector<Tensor<Scalar>>& first_moments() { return m_; }
  std::vector<Tensor<Scalar>>& second_moments() { return v_; }
  void set_steps(long long t) { t_ = t; }

  /// Lazily sizes the moment buffers to `params` on first use.
  void ensure_state(const std::vector<Param<Scalar>*>& params) {
    if (!m_.empty()) {
      if (m_.size() != params.size()) throw StateError("optimizer state does not match the parameter list");
      for (std::size_t i = 0; i < params.size(); ++i)
        if (m_[i].shape() != params[i]->value.shape())
          throw StateError("optimizer state shape mismatch for " + params[i]->name);
      return;
    }
    for (auto* p : params) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  /// Throws DivergenceError, leaving every parameter and moment untouched, if
  /// any gradient is non-finite.
  void step(const std::vector<Param<Scalar>*>& params, double lr) {
    ensure_state(params);
    for (auto* p : params)
      if (!p->grad.vec().allFinite())
        for (Index i = 0; i < p->grad.size(); ++i)
          if (!std::isfinite(p->grad[i]))
            throw DivergenceError("non-finite gradient in " + p->name + " at element " + std::to_string(i));
    ++t_;
    const Scalar b1 = static_cast<Scalar>(hyper_.beta1), b2 = static_cast<Scalar>(hyper_.beta2);
    const Scalar c1 = static_cast<Scalar>(1.0 - std::pow(hyper_.beta1, static_cast<double>(t_)));
    const Scalar c2 = static_cast<Scalar>(1.0 - std::pow(hyper_.beta2, static_cast<double>(t_)));
    const Scalar eps = static_cast<Scalar>(hyper_.eps), step = static_cast<Scalar>(lr);
    for (std::size_t k = 0; k < params.size(); ++k) {
      Param<Scalar>& p = *params[k];
      Tensor<Scalar>& m = m_[k];
      Tensor<Scalar>& v = v_[k];
      const auto g = p.grad.vec().array();
      auto ma = m.vec().array();
      auto va = v.vec().array();
      ma = b1 * ma + (Scalar(1) - b1) * g;
      va = b2 * va + (Scalar(1) - b2) * g * g;
      p.value.vec().array() -= step * (ma / c1) / ((va / c2).sqrt() + eps);
      apply_constraints(p);
    }
  }

 private:
  void apply_constraints(Param<Scalar>& p) const {
    const Scalar floor = static_cast<Scalar>(kScaleFloor);
    if (p.role == ParamRole::Scale || p.role == ParamRole::SwishBeta) {
      for (Index i = 0; i < p.value.size(); ++i) p.value[i] = std::max(p.value[i], floor);
    } else if (p.role == ParamRole::Latent && clip_latent_) {
      for (Index i = 0; i < p.value.size(); ++i) p.value[i] = std::clamp(p.value[i], Scalar(-1), Scalar(1));
    }
  }

  AdamHyper hyper_;
  bool clip_latent_;
  long long t_ = 0;
  std::vector<Tensor<Scalar>> m_, v_;
};

}  // namespace bnnq
