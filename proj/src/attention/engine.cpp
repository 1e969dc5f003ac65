#include "cut/attention/engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cut/core/error.hpp"

namespace cut::attention {

namespace {

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

void check_j_set(std::span<const int> j_set, int tokens) {
  if (j_set.empty()) throw Error(ErrorCode::kInvalidArgument, "anomaly token set is empty");
  for (int j : j_set) {
    if (j < 0 || j >= tokens) {
      throw Error(ErrorCode::kRange, "anomaly token index " + std::to_string(j) + " outside [0, " +
                                         std::to_string(tokens) + ")");
    }
  }
}

void check_mask16(const BinaryMask& mask16) {
  if (mask16.rows() != kAttentionSide || mask16.cols() != kAttentionSide) {
    throw Error(ErrorCode::kShapeMismatch, "attention mask must be 16x16");
  }
  if (count_foreground(mask16) == 0) {
    throw Error(ErrorCode::kPrecondition, "attention mask has no foreground pixel");
  }
}

// Separable smoothing with reflect padding of one token channel.
Map2D smooth(const Map2D& in, const std::vector<double>& taps) {
  const int half = static_cast<int>(taps.size()) / 2;
  const int n = in.rows();
  Map2D rows_pass(n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double acc = 0.0;
      for (int k = -half; k <= half; ++k) acc += taps[k + half] * in(y, reflect_index(x + k, n));
      rows_pass(y, x) = acc;
    }
  Map2D out(n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double acc = 0.0;
      for (int k = -half; k <= half; ++k) acc += taps[k + half] * rows_pass(reflect_index(y + k, n), x);
      out(y, x) = acc;
    }
  return out;
}

Map2D smooth_adjoint(const Map2D& grad, const std::vector<double>& taps) {
  const int half = static_cast<int>(taps.size()) / 2;
  const int n = grad.rows();
  Map2D mid(n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double g = grad(y, x);
      if (g == 0.0) continue;
      for (int k = -half; k <= half; ++k) mid(reflect_index(y + k, n), x) += taps[k + half] * g;
    }
  Map2D out(n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double g = mid(y, x);
      if (g == 0.0) continue;
      for (int k = -half; k <= half; ++k) out(y, reflect_index(x + k, n)) += taps[k + half] * g;
    }
  return out;
}

struct Intermediate {
  std::vector<std::size_t> used;  // indices of 16x16 maps
  Tensor3 probs;                  // token softmax, before smoothing
  AggregatedAttention result;
};

Intermediate aggregate_impl(const AttentionStack& stack, const AggregationConfig& config) {
  Intermediate im;
  int tokens = -1;
  for (std::size_t i = 0; i < stack.maps.size(); ++i) {
    const Tensor3& m = stack.maps[i];
    if (m.dim0() != kAttentionSide || m.dim1() != kAttentionSide) continue;
    if (tokens >= 0 && m.dim2() != tokens) {
      throw Error(ErrorCode::kShapeMismatch, "attention maps disagree on the token count");
    }
    tokens = m.dim2();
    im.used.push_back(i);
  }
  if (im.used.empty()) throw Error(ErrorCode::kPrecondition, "attention stack has no 16x16 map");
  if (tokens <= 0) throw Error(ErrorCode::kShapeMismatch, "attention maps have no tokens");

  const int S = kAttentionSide;
  Tensor3 mean(S, S, tokens);
  const double inv = 1.0 / static_cast<double>(im.used.size());
  for (std::size_t idx : im.used) {
    const Tensor3& m = stack.maps[idx];
    for (std::size_t k = 0; k < m.size(); ++k) mean[k] += m[k] * inv;
  }

  im.probs = Tensor3(S, S, tokens);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      double peak = -std::numeric_limits<double>::infinity();
      for (int n = 0; n < tokens; ++n) peak = std::max(peak, config.softmax_scale * mean(y, x, n));
      double total = 0.0;
      for (int n = 0; n < tokens; ++n) {
        const double e = std::exp(config.softmax_scale * mean(y, x, n) - peak);
        im.probs(y, x, n) = e;
        total += e;
      }
      for (int n = 0; n < tokens; ++n) im.probs(y, x, n) /= total;
    }

  const auto taps = gaussian_taps(config.smoothing);
  im.result.abar = Tensor3(S, S, tokens);
  im.result.t = stack.t;
  Map2D channel(S, S);
  for (int n = 0; n < tokens; ++n) {
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) channel(y, x) = im.probs(y, x, n);
    const Map2D smoothed = smooth(channel, taps);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) im.result.abar(y, x, n) = smoothed(y, x);
  }
  return im;
}

struct Peak {
  int y = 0;
  int x = 0;
  double value = -std::numeric_limits<double>::infinity();
};

Peak masked_peak(const Map2D& map, const BinaryMask& mask16) {
  Peak best;
  for (int y = 0; y < map.rows(); ++y)
    for (int x = 0; x < map.cols(); ++x)
      if (mask16(y, x) && map(y, x) > best.value) best = {y, x, map(y, x)};
  return best;
}

}  // namespace

std::vector<double> gaussian_taps(const SmoothingConfig& config) {
  if (config.kernel_size < 1 || config.kernel_size % 2 == 0 || !(config.sigma > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "smoothing kernel needs an odd size and sigma > 0");
  }
  const int half = config.kernel_size / 2;
  std::vector<double> taps(config.kernel_size);
  double total = 0.0;
  for (int k = -half; k <= half; ++k) {
    taps[k + half] = std::exp(-(k * k) / (2.0 * config.sigma * config.sigma));
    total += taps[k + half];
  }
  for (double& w : taps) w /= total;
  return taps;
}

AggregatedAttention aggregate_attention(const AttentionStack& stack, const AggregationConfig& config) {
  return aggregate_impl(stack, config).result;
}

Map2D token_map(const AggregatedAttention& abar, std::span<const int> j_set) {
  check_j_set(j_set, abar.tokens());
  const int S = abar.abar.dim0();
  Map2D out(S, abar.abar.dim1());
  const double inv = 1.0 / static_cast<double>(j_set.size());
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < out.cols(); ++x) {
      double acc = 0.0;
      for (int j : j_set) acc += abar.abar(y, x, j);
      out(y, x) = acc * inv;
    }
  return out;
}

double latt(const AggregatedAttention& abar, std::span<const int> j_set, const BinaryMask& mask16) {
  check_mask16(mask16);
  const Map2D map = token_map(abar, j_set);
  return std::clamp(1.0 - masked_peak(map, mask16).value, 0.0, 1.0);
}

diffusion::StackLossResult latt_with_grad(const AttentionStack& stack, std::span<const int> j_set,
                                          const BinaryMask& mask16, const AggregationConfig& config) {
  check_mask16(mask16);
  const Intermediate im = aggregate_impl(stack, config);
  const Map2D map = token_map(im.result, j_set);
  const Peak peak = masked_peak(map, mask16);

  diffusion::StackLossResult out;
  out.value = 1.0 - peak.value;
  out.grad.reserve(stack.maps.size());
  for (const Tensor3& m : stack.maps) out.grad.emplace_back(m.dim0(), m.dim1(), m.dim2());

  const int S = kAttentionSide;
  const int tokens = im.result.tokens();
  const auto taps = gaussian_taps(config.smoothing);

  // d/d(smoothed) is -1/|J| at the peak for each anomaly token; pull back
  // through the smoothing to the softmax output.
  Tensor3 d_probs(S, S, tokens);
  Map2D seed(S, S);
  seed(peak.y, peak.x) = -1.0 / static_cast<double>(j_set.size());
  const Map2D pulled = smooth_adjoint(seed, taps);
  for (int j : j_set)
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) d_probs(y, x, j) += pulled(y, x);

  // softmax(scale * mean) backward, then the mean.
  const double inv = 1.0 / static_cast<double>(im.used.size());
  Tensor3 d_mean(S, S, tokens);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      double dot = 0.0;
      for (int n = 0; n < tokens; ++n) dot += im.probs(y, x, n) * d_probs(y, x, n);
      for (int n = 0; n < tokens; ++n) {
        d_mean(y, x, n) = config.softmax_scale * im.probs(y, x, n) * (d_probs(y, x, n) - dot);
      }
    }
  for (std::size_t idx : im.used) {
    Tensor3& g = out.grad[idx];
    for (std::size_t k = 0; k < g.size(); ++k) g[k] = d_mean[k] * inv;
  }
  return out;
}

diffusion::StackLoss make_latt_loss(std::vector<int> j_set, BinaryMask mask16, AggregationConfig config) {
  return [j_set = std::move(j_set), mask16 = std::move(mask16), config](const AttentionStack& stack) {
    return latt_with_grad(stack, j_set, mask16, config);
  };
}

int count_activated(const Map2D& abar_j, const BinaryMask& mask16) {
  if (!abar_j.same_shape(Map2D(mask16.rows(), mask16.cols()))) {
    throw Error(ErrorCode::kShapeMismatch, "count_activated: map and mask shapes differ");
  }
  double total = 0.0;
  std::size_t n = 0;
  for (int y = 0; y < abar_j.rows(); ++y)
    for (int x = 0; x < abar_j.cols(); ++x)
      if (mask16(y, x)) {
        total += abar_j(y, x);
        ++n;
      }
  if (n == 0) return 0;
  const double mean = total / static_cast<double>(n);
  int count = 0;
  for (int y = 0; y < abar_j.rows(); ++y)
    for (int x = 0; x < abar_j.cols(); ++x)
      if (mask16(y, x) && abar_j(y, x) > mean) ++count;
  return count;
}

void validate(const SchedulerState& state) {
  if (state.n_start < 1) throw Error(ErrorCode::kInvalidArgument, "scheduler n_start must be >= 1");
  if (!(state.delta_t > 0.0) || state.delta_t > 1.0) {
    throw Error(ErrorCode::kInvalidArgument, "scheduler delta_t must be in (0, 1]");
  }
}

double step_size(const SchedulerState& state, int t, int n_t) {
  return state.lambda * (1.0 + state.delta_t * t) *
         (static_cast<double>(n_t) / static_cast<double>(state.n_start));
}

bool should_stop(SchedulerState& state, int steps_done, int n_t) {
  if (state.stopped) return true;
  if (steps_done >= state.warmup_steps && state.min_pixels < n_t && n_t < state.max_pixels_for_stop) {
    state.stopped = true;
  }
  return state.stopped;
}

void validate(const RefinementThresholds& thresholds) {
  if (thresholds.values.size() != thresholds.checkpoints.size()) {
    throw Error(ErrorCode::kInvalidArgument, "each refinement threshold needs a checkpoint");
  }
  for (std::size_t i = 0; i < thresholds.values.size(); ++i) {
    const double v = thresholds.values[i];
    if (!(v > 0.0 && v < 1.0)) throw Error(ErrorCode::kRange, "refinement thresholds must lie in (0, 1)");
    if (i > 0 && !(v > thresholds.values[i - 1])) {
      throw Error(ErrorCode::kInvalidArgument, "refinement thresholds must be strictly increasing");
    }
    const double c = thresholds.checkpoints[i];
    if (c < 0.0 || c > 1.0) throw Error(ErrorCode::kRange, "refinement checkpoints must lie in [0, 1]");
  }
  if (thresholds.max_iterations < 1) {
    throw Error(ErrorCode::kInvalidArgument, "refinement needs max_iterations >= 1");
  }
}

std::optional<double> active_threshold(const RefinementThresholds& thresholds, int step_index, int window) {
  std::optional<double> active;
  for (std::size_t i = 0; i < thresholds.values.size(); ++i) {
    const long at = std::lround(thresholds.checkpoints[i] * window);
    if (at == step_index) active = thresholds.values[i];
  }
  return active;
}

OptimizeResult optimize_step(const diffusion::Backbone& backbone, const LatentState& z,
                             const PromptSpec& prompt, const ForegroundMask& mask,
                             const SchedulerState& state, const RefinementThresholds& thresholds,
                             const AggregationConfig& aggregation, int step_index, int window) {
  if (state.stopped) throw Error(ErrorCode::kPrecondition, "optimize_step called after early stop");
  const BinaryMask& lat = mask.mask_lat;
  if (lat.rows() != z.z.dim1() || lat.cols() != z.z.dim2()) {
    throw Error(ErrorCode::kShapeMismatch, "latent mask does not match the latent grid");
  }
  const auto loss = make_latt_loss(prompt.anomaly_token_indices, mask.mask16, aggregation);

  OptimizeResult out;
  out.z = z;
  auto grad = backbone.attention_gradient(out.z, prompt, loss);
  const auto abar = aggregate_attention(grad.attention, aggregation);
  out.n_t = count_activated(token_map(abar, prompt.anomaly_token_indices), mask.mask16);
  out.alpha = step_size(state, z.t, out.n_t);

  const auto threshold = active_threshold(thresholds, step_index, window);
  const int budget = threshold ? thresholds.max_iterations : 1;
  const int C = z.z.dim0();
  for (;;) {
    out.losses.push_back(grad.loss);
    if (threshold && 1.0 - grad.loss >= *threshold) break;
    if (out.iterations >= budget || out.alpha == 0.0) break;
    for (int ch = 0; ch < C; ++ch)
      for (int y = 0; y < lat.rows(); ++y)
        for (int x = 0; x < lat.cols(); ++x)
          if (lat(y, x)) out.z.z(ch, y, x) -= out.alpha * grad.grad(ch, y, x);
    ++out.iterations;
    grad = backbone.attention_gradient(out.z, prompt, loss);
  }
  out.final_max = 1.0 - grad.loss;
  return out;
}

}  // namespace cut::attention
