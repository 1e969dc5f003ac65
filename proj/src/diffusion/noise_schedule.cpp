#include "cut/diffusion/noise_schedule.hpp"

#include <cmath>
#include <random>

#include "cut/core/error.hpp"

namespace cut::diffusion {

NoiseSchedule::NoiseSchedule(const ScheduleConfig& config) : config_(config), T_(config.T) {
  if (T_ < 1) throw Error(ErrorCode::kInvalidArgument, "noise schedule needs T >= 1");
  if (!(config.beta_start > 0.0) || !(config.beta_end < 1.0) ||
      config.beta_end < config.beta_start) {
    throw Error(ErrorCode::kInvalidArgument, "noise schedule needs 0 < beta_start <= beta_end < 1");
  }
  betas_.assign(T_ + 1, 0.0);
  alpha_bars_.assign(T_ + 1, 1.0);
  for (int t = 1; t <= T_; ++t) {
    const double frac = T_ == 1 ? 0.0 : static_cast<double>(t - 1) / (T_ - 1);
    double beta = 0.0;
    switch (config.family) {
      case ScheduleFamily::kLinear:
        beta = config.beta_start + frac * (config.beta_end - config.beta_start);
        break;
      case ScheduleFamily::kScaledLinear: {
        const double s = std::sqrt(config.beta_start) +
                         frac * (std::sqrt(config.beta_end) - std::sqrt(config.beta_start));
        beta = s * s;
        break;
      }
    }
    betas_[t] = beta;
    alpha_bars_[t] = alpha_bars_[t - 1] * (1.0 - beta);
  }
}

double NoiseSchedule::beta(int t) const {
  if (t < 0 || t > T_) throw Error(ErrorCode::kRange, "timestep out of range");
  return betas_[t];
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > T_) throw Error(ErrorCode::kRange, "timestep out of range");
  return alpha_bars_[t];
}

ScheduleFamily parse_schedule_family(const std::string& name) {
  if (name == "linear") return ScheduleFamily::kLinear;
  if (name == "scaled_linear") return ScheduleFamily::kScaledLinear;
  throw Error(ErrorCode::kInvalidArgument, "unknown schedule family '" + name + "'");
}

std::string to_string(ScheduleFamily family) {
  return family == ScheduleFamily::kLinear ? "linear" : "scaled_linear";
}

Tensor3 forward_noise(const NoiseSchedule& schedule, const Tensor3& z0, int t, std::uint64_t seed) {
  if (t < 0 || t > schedule.T()) {
    throw Error(ErrorCode::kRange, "forward_noise: t=" + std::to_string(t) + " outside [0, " +
                                       std::to_string(schedule.T()) + "]");
  }
  if (t == 0) return z0;
  const double signal = std::sqrt(schedule.alpha_bar(t));
  const double noise = std::sqrt(1.0 - schedule.alpha_bar(t));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor3 out = z0;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = signal * z0[i] + noise * normal(rng);
  return out;
}

}  // namespace cut::diffusion
