#pragma once

#include "xdyna/tensor.hpp"

#include <cstdint>
#include <random>

namespace xdyna {

/// Linear-beta DDPM schedule.
struct NoiseSchedule {
  std::vector<double> beta;
  std::vector<double> alpha_bar;

  int steps() const { return static_cast<int>(beta.size()); }
};

struct ScheduleConfig {
  int steps = 100;
  // Terminal alpha_bar is about 5e-3 for 100 steps, close to the usual
  // latent-diffusion schedule. Going to 0.2 drives alpha_bar below 1e-4 by
  // t = 80 and leaves the upper fifth of timesteps with no signal to learn.
  double beta_start = 1e-3;
  double beta_end = 0.1;

  bool operator==(const ScheduleConfig&) const = default;
};

inline NoiseSchedule make_noise_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ParameterError("noise schedule needs at least one step");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ParameterError("noise schedule requires 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.beta.resize(steps);
  s.alpha_bar.resize(steps);
  double prod = 1.0;
  for (int t = 0; t < steps; ++t) {
    s.beta[t] = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / (steps - 1);
    prod *= 1.0 - s.beta[t];
    s.alpha_bar[t] = prod;
  }
  return s;
}

inline NoiseSchedule make_noise_schedule(const ScheduleConfig& c) {
  return make_noise_schedule(c.steps, c.beta_start, c.beta_end);
}

/// x_t = sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) eps
template <typename T>
Tensor<T> add_noise(const Tensor<T>& x0, const Tensor<T>& eps, int t, const NoiseSchedule& s) {
  x0.check_same(eps, "add_noise");
  if (t < 0 || t >= s.steps()) throw ParameterError("add_noise: timestep out of range");
  const T a = static_cast<T>(std::sqrt(s.alpha_bar[t]));
  const T b = static_cast<T>(std::sqrt(1.0 - s.alpha_bar[t]));
  Tensor<T> out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

/// Inverse of add_noise given the true noise.
template <typename T>
Tensor<T> predict_x0(const Tensor<T>& x_t, const Tensor<T>& eps, int t, const NoiseSchedule& s) {
  x_t.check_same(eps, "predict_x0");
  const double a = std::sqrt(s.alpha_bar[t]), b = std::sqrt(1.0 - s.alpha_bar[t]);
  Tensor<T> out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>((static_cast<double>(x_t[i]) - b * static_cast<double>(eps[i])) / a);
  return out;
}

/// Epsilon-prediction objective: mean squared error over every element of the batch.
template <typename T>
T epsilon_loss(const std::vector<Tensor<T>>& predicted, const std::vector<Tensor<T>>& target) {
  if (predicted.empty()) throw ParameterError("epsilon_loss: empty batch");
  if (predicted.size() != target.size()) throw ShapeError("epsilon_loss: batch size mismatch");
  double acc = 0;
  std::size_t n = 0;
  for (std::size_t b = 0; b < predicted.size(); ++b) {
    predicted[b].check_same(target[b], "epsilon_loss");
    for (std::size_t i = 0; i < predicted[b].size(); ++i) {
      const double e = static_cast<double>(predicted[b][i]) - static_cast<double>(target[b][i]);
      acc += e * e;
    }
    n += predicted[b].size();
  }
  if (n == 0) throw ParameterError("epsilon_loss: empty batch");
  return static_cast<T>(acc / static_cast<double>(n));
}

/// Standard-normal tensor from a seeded generator.
template <typename T>
Tensor<T> gaussian(const Shape& shape, std::mt19937_64& rng) {
  Tensor<T> t(shape);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& v : t.values()) v = static_cast<T>(nd(rng));
  return t;
}

/// Timesteps visited by a `steps`-step sampler, in ascending order. The last
/// one is always T-1; with steps == T every timestep is visited.
inline std::vector<int> sampling_timesteps(int schedule_steps, int steps) {
  if (steps < 1 || steps > schedule_steps) throw ParameterError("sampler steps must lie in [1, T]");
  std::vector<int> ts(steps);
  for (int i = 0; i < steps; ++i) ts[i] = static_cast<int>((static_cast<long long>(i + 1) * schedule_steps) / steps) - 1;
  return ts;
}

/// Deterministic DDIM (eta = 0). `eps_model(x_t, t)` returns the predicted
/// noise; the result is clamped to [-1, 1].
template <typename T, typename EpsModel>
Tensor<T> ddim_sample(const NoiseSchedule& s, int steps, std::uint64_t seed, const Shape& shape, EpsModel&& eps_model) {
  const std::vector<int> ts = sampling_timesteps(s.steps(), steps);
  std::mt19937_64 rng(seed);
  Tensor<T> x = gaussian<T>(shape, rng);
  for (int i = steps - 1; i >= 0; --i) {
    const int t = ts[i];
    const Tensor<T> eps = eps_model(static_cast<const Tensor<T>&>(x), t);
    x.check_same(eps, "ddim_sample");
    const double ab = s.alpha_bar[t];
    const double ab_prev = i > 0 ? s.alpha_bar[ts[i - 1]] : 1.0;
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    const double pa = std::sqrt(ab_prev), pb = std::sqrt(1.0 - ab_prev);
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double e = static_cast<double>(eps[k]);
      const double x0 = (static_cast<double>(x[k]) - sb * e) / sa;
      x[k] = static_cast<T>(pa * x0 + pb * e);
    }
  }
  for (auto& v : x.values()) v = std::clamp(v, T(-1), T(1));
  return x;
}

}  // namespace xdyna
