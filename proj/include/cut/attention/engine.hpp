#pragma once

#include <optional>
#include <span>
#include <vector>

#include "cut/core/types.hpp"
#include "cut/diffusion/backbone.hpp"

namespace cut::attention {

// Cross-attention maps at this resolution are the ones aggregated.
inline constexpr int kAttentionSide = 16;

struct SmoothingConfig {
  int kernel_size = 3;
  double sigma = 0.5;
};

struct AggregationConfig {
  // Multiplier on the averaged probabilities before the token-axis softmax.
  double softmax_scale = 20.0;
  SmoothingConfig smoothing{};
};

// Mean of the 16x16 maps, softmax over tokens, Gaussian smoothing per token.
struct AggregatedAttention {
  Tensor3 abar;  // 16 x 16 x N
  int t = 0;

  int tokens() const noexcept { return abar.dim2(); }
};

AggregatedAttention aggregate_attention(const AttentionStack& stack, const AggregationConfig& config = {});

// Normalised 1-D Gaussian taps; the 2-D kernel is their outer product.
std::vector<double> gaussian_taps(const SmoothingConfig& config);

// Average of the listed token channels.
Map2D token_map(const AggregatedAttention& abar, std::span<const int> j_set);

// 1 - max over foreground pixels of the (token-averaged) anomaly map.
double latt(const AggregatedAttention& abar, std::span<const int> j_set, const BinaryMask& mask16);

// L_att evaluated straight from a captured stack, with its gradient with
// respect to every captured map.
diffusion::StackLossResult latt_with_grad(const AttentionStack& stack, std::span<const int> j_set,
                                          const BinaryMask& mask16, const AggregationConfig& config = {});

diffusion::StackLoss make_latt_loss(std::vector<int> j_set, BinaryMask mask16, AggregationConfig config = {});

// Number of foreground pixels strictly above the foreground mean.
int count_activated(const Map2D& abar_j, const BinaryMask& mask16);

struct SchedulerState {
  double lambda = 10.0;
  double delta_t = 1.0 / 200.0;
  int n_start = 1;
  int t_start = 0;
  int min_pixels = 10;
  int max_pixels_for_stop = 50;
  int warmup_steps = 10;
  bool stopped = false;
};

void validate(const SchedulerState& state);

// lambda * (1 + delta_t * t) * n_t / n_start
double step_size(const SchedulerState& state, int t, int n_t);

// Latches state.stopped once steps_done >= warmup_steps and
// min_pixels < n_t < max_pixels_for_stop.
bool should_stop(SchedulerState& state, int steps_done, int n_t);

struct RefinementThresholds {
  std::vector<double> values{0.05, 0.5, 0.8};
  // Fractions of the optimisation window at which each threshold applies.
  std::vector<double> checkpoints{0.25, 0.5, 0.75};
  int max_iterations = 20;
};

void validate(const RefinementThresholds& thresholds);

// The threshold to refine towards at `step_index` (0-based position inside a
// window of `window` denoise steps), or nullopt for a plain single step.
std::optional<double> active_threshold(const RefinementThresholds& thresholds, int step_index, int window);

struct OptimizeResult {
  LatentState z;
  double alpha = 0.0;
  int n_t = 0;
  int iterations = 0;         // gradient updates applied
  double final_max = 0.0;     // max(abar_j * mask) after the last update
  std::vector<double> losses; // L_att before each update, then after the last
};

// Masked gradient updates of z at a fixed timestep: z <- z - alpha_t * grad
// on foreground latent positions only. At refinement checkpoints the update
// repeats until the active threshold is reached or max_iterations is spent;
// elsewhere exactly one update is taken.
OptimizeResult optimize_step(const diffusion::Backbone& backbone, const LatentState& z,
                             const PromptSpec& prompt, const ForegroundMask& mask,
                             const SchedulerState& state, const RefinementThresholds& thresholds,
                             const AggregationConfig& aggregation, int step_index, int window);

}  // namespace cut::attention
