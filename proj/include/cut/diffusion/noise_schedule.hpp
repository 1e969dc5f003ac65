#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cut/core/tensor.hpp"

namespace cut::diffusion {

enum class ScheduleFamily { kLinear, kScaledLinear };

struct ScheduleConfig {
  int T = 200;
  ScheduleFamily family = ScheduleFamily::kLinear;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

// DDPM forward process. Index 0 is the clean sample: alpha_bar(0) == 1 and
// beta(t), alpha_bar(t) for t in [1, T] follow the chosen family.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(const ScheduleConfig& config = {});

  int T() const noexcept { return T_; }
  double beta(int t) const;
  double alpha(int t) const { return 1.0 - beta(t); }
  double alpha_bar(int t) const;

  const ScheduleConfig& config() const noexcept { return config_; }

 private:
  ScheduleConfig config_;
  int T_;
  std::vector<double> betas_;       // size T + 1, betas_[0] unused (0)
  std::vector<double> alpha_bars_;  // size T + 1
};

ScheduleFamily parse_schedule_family(const std::string& name);
std::string to_string(ScheduleFamily family);

// sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps with eps ~ N(0, I)
// drawn from `seed`. t == 0 returns z0 unchanged.
Tensor3 forward_noise(const NoiseSchedule& schedule, const Tensor3& z0, int t, std::uint64_t seed);

}  // namespace cut::diffusion
