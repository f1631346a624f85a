// Adam with bias correction and a warmup + cosine learning-rate schedule.
#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "dptlab/core.hpp"

namespace dptlab {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  bool operator==(const AdamConfig&) const = default;
};

template <class Scalar>
struct OptimizerState {
  std::int64_t step = 0;
  std::vector<Scalar> first_moment;
  std::vector<Scalar> second_moment;
  double base_lr = 3e-4;
  std::int64_t horizon = 0;  // total scheduled steps
  AdamConfig adam;

  static OptimizerState fresh(std::size_t n_params, double base_lr, std::int64_t horizon, AdamConfig cfg = {}) {
    return {0, std::vector<Scalar>(n_params, Scalar(0)), std::vector<Scalar>(n_params, Scalar(0)), base_lr, horizon, cfg};
  }

  bool operator==(const OptimizerState&) const = default;
};

// Cosine multiplier 0.5 * (1 + cos(pi * progress)), progress clamped to [0, 1].
inline double cosine_factor(double progress) {
  progress = std::clamp(progress, 0.0, 1.0);
  return 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct CosineSchedule {
  double base_lr = 3e-4;
  std::int64_t total_steps = 1;
  std::int64_t warmup_steps = 0;

  // Learning rate for 1-based step index `step`.
  double lr(std::int64_t step) const {
    if (warmup_steps > 0 && step <= warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    return base_lr * cosine_factor(progress(step));
  }

  double progress(std::int64_t step) const {
    const auto span = total_steps - warmup_steps;
    if (span <= 0) return 1.0;
    return static_cast<double>(step - warmup_steps) / static_cast<double>(span);
  }
};

// One Adam update at an explicit learning rate. Non-finite gradients abort
// before anything is modified.
template <class Scalar>
void adam_update(std::span<Scalar> params, std::span<const Scalar> grads, OptimizerState<Scalar>& st, double lr) {
  require(params.size() == grads.size() && params.size() == st.first_moment.size() &&
              params.size() == st.second_moment.size(),
          "adam: parameter, gradient and moment sizes differ");
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!std::isfinite(static_cast<double>(grads[i])))
      throw StageError("adam: non-finite gradient at coordinate " + std::to_string(i) + " (step " +
                       std::to_string(st.step + 1) + ")");

  st.step += 1;
  const auto& a = st.adam;
  const double bc1 = 1.0 - std::pow(a.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(a.beta2, static_cast<double>(st.step));
  const auto b1 = static_cast<Scalar>(a.beta1), b2 = static_cast<Scalar>(a.beta2);
  const auto step_size = static_cast<Scalar>(lr / bc1);
  const auto inv_bc2 = static_cast<Scalar>(1.0 / bc2);
  const auto eps = static_cast<Scalar>(a.epsilon);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Scalar g = grads[i];
    Scalar& m = st.first_moment[i];
    Scalar& v = st.second_moment[i];
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g * g;
    if (lr != 0.0) params[i] -= step_size * m / (std::sqrt(v * inv_bc2) + eps);
  }
}

// Update at position `progress` in [0, 1] of the cosine schedule.
template <class Scalar>
void adam_step(std::span<Scalar> params, std::span<const Scalar> grads, OptimizerState<Scalar>& st, double progress) {
  adam_update(params, grads, st, st.base_lr * cosine_factor(progress));
}

}  // namespace dptlab
