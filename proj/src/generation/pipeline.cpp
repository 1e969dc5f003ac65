#include "cut/generation/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <thread>

#include "cut/core/error.hpp"
#include "cut/core/random.hpp"

namespace cut::generation {

namespace {

constexpr std::uint64_t kForwardNoiseSalt = 0x6e6f697365ull;

BinaryMask morph(const BinaryMask& in, bool dilate) {
  BinaryMask out(in.rows(), in.cols());
  for (int r = 0; r < in.rows(); ++r) {
    for (int c = 0; c < in.cols(); ++c) {
      std::uint8_t v = dilate ? 0 : 1;
      for (int dr = -1; dr <= 1; ++dr) {
        for (int dc = -1; dc <= 1; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || cc < 0 || rr >= in.rows() || cc >= in.cols()) continue;
          if (dilate) v = std::max<std::uint8_t>(v, in(rr, cc));
          else v = std::min<std::uint8_t>(v, in(rr, cc));
        }
      }
      out(r, c) = v;
    }
  }
  return out;
}

ForegroundMask all_foreground(int rows, int cols, int latent_side) {
  return {BinaryMask(attention::kAttentionSide, attention::kAttentionSide, 1),
          BinaryMask(latent_side, latent_side, 1), BinaryMask(rows, cols, 1)};
}

}  // namespace

void validate(const GenerationConfig& config) {
  if (!(config.gamma >= 0.0 && config.gamma <= 1.0)) {
    throw Error(ErrorCode::kRange, "gamma must lie in [0, 1]");
  }
  if (config.T < 10) throw Error(ErrorCode::kRange, "T must be at least 10");
  if (config.lambda < 0.0 || !std::isfinite(config.lambda)) {
    throw Error(ErrorCode::kRange, "lambda must be finite and non-negative");
  }
  if (config.delta_t && (*config.delta_t < 0.0 || !std::isfinite(*config.delta_t))) {
    throw Error(ErrorCode::kRange, "delta_t must be finite and non-negative");
  }
  if (config.min_pixels < 0 || config.max_pixels_for_stop <= config.min_pixels) {
    throw Error(ErrorCode::kRange, "need 0 <= min_pixels < max_pixels_for_stop");
  }
  if (config.warmup_steps < 0) throw Error(ErrorCode::kRange, "warmup_steps must be >= 0");
  if (config.prompt_template.find("[cls]") == std::string::npos) {
    throw Error(ErrorCode::kInvalidArgument, "prompt template lacks the [cls] placeholder");
  }
  if (config.anomaly_word.empty()) throw Error(ErrorCode::kInvalidArgument, "empty anomaly word");
  attention::validate(config.thresholds);
}

int start_timestep(double gamma, int T) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw Error(ErrorCode::kRange, "gamma must lie in [0, 1]");
  if (T < 1) throw Error(ErrorCode::kRange, "T must be positive");
  return static_cast<int>(std::lround(T * (1.0 - gamma)));
}

int otsu_threshold(const Map2D& gray) {
  std::vector<double> hist(256, 0.0);
  for (double g : gray.values()) {
    const int b = std::clamp(static_cast<int>(std::lround(g * 255.0)), 0, 255);
    hist[b] += 1.0;
  }
  const double total = static_cast<double>(gray.size());
  double sum_all = 0.0;
  for (int i = 0; i < 256; ++i) sum_all += i * hist[i];

  double w0 = 0.0, sum0 = 0.0, best = -1.0;
  int best_k = -1;
  for (int k = 0; k < 255; ++k) {
    w0 += hist[k];
    sum0 += k * hist[k];
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_k = k;
    }
  }
  return best_k;
}

ForegroundMask foreground_mask(const ImageSample& image, int latent_side) {
  validate_sample(image);
  if (latent_side <= 0) throw Error(ErrorCode::kRange, "latent side must be positive");
  const int H = image.height(), W = image.width();
  const Map2D gray = to_grayscale(image.pixels);
  const int k = otsu_threshold(gray);
  if (k < 0) return all_foreground(H, W, latent_side);

  BinaryMask bin(H, W);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c)
      bin(r, c) = std::lround(gray(r, c) * 255.0) > k ? 1 : 0;

  std::size_t border = 0, border_on = 0;
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      if (r != 0 && c != 0 && r != H - 1 && c != W - 1) continue;
      ++border;
      border_on += bin(r, c);
    }
  }
  if (2 * border_on > border) {
    for (auto& v : bin.values()) v = 1 - v;
  }
  BinaryMask full = morph(morph(bin, true), false);
  if (count_foreground(full) == 0) return all_foreground(H, W, latent_side);

  BinaryMask m16 = resample_mask(full, attention::kAttentionSide);
  BinaryMask mlat = resample_mask(full, latent_side);
  if (count_foreground(m16) == 0 || count_foreground(mlat) == 0) {
    return all_foreground(H, W, latent_side);
  }
  return {std::move(m16), std::move(mlat), std::move(full)};
}

LatentState conditioning_start(const ImageSample& image, const GenerationConfig& config,
                               const diffusion::Backbone& backbone) {
  validate(config);
  const auto& schedule = backbone.schedule();
  if (schedule.T() != config.T) {
    throw Error(ErrorCode::kInvalidArgument, "config T " + std::to_string(config.T) +
                                                 " differs from the backbone schedule T " +
                                                 std::to_string(schedule.T()));
  }
  const int t = start_timestep(config.gamma, config.T);
  const Tensor3 z0 = backbone.encode(image);
  LatentState out;
  out.z = diffusion::forward_noise(schedule, z0, t, mix_seed(config.seed, kForwardNoiseSalt));
  out.t = t;
  out.T = config.T;
  return out;
}

Map2D extract_annotation(const attention::AggregatedAttention& abar_final, std::span<const int> j_set,
                         const ForegroundMask& mask, int rows, int cols) {
  if (rows <= 0 || cols <= 0) throw Error(ErrorCode::kRange, "annotation size must be positive");
  if (mask.mask_full.rows() != rows || mask.mask_full.cols() != cols) {
    throw Error(ErrorCode::kShapeMismatch, "full-resolution mask does not match the annotation size");
  }
  const Map2D a = attention::token_map(abar_final, j_set);
  if (a.rows() != mask.mask16.rows() || a.cols() != mask.mask16.cols()) throw Error(ErrorCode::kShapeMismatch, "mask16 shape mismatch");

  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (int r = 0; r < a.rows(); ++r) {
    for (int c = 0; c < a.cols(); ++c) {
      if (!mask.mask16(r, c)) continue;
      lo = std::min(lo, a(r, c));
      hi = std::max(hi, a(r, c));
    }
  }
  Map2D norm(a.rows(), a.cols(), 0.0);
  if (hi > lo) {
    for (int r = 0; r < a.rows(); ++r)
      for (int c = 0; c < a.cols(); ++c)
        if (mask.mask16(r, c)) norm(r, c) = (a(r, c) - lo) / (hi - lo);
  }
  Map2D up = resize_bilinear(norm, rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      up(r, c) = mask.mask_full(r, c) ? std::clamp(up(r, c), 0.0, 1.0) : 0.0;
  return up;
}

GenerationResult generate(const ImageSample& image, const GenerationConfig& config,
                          diffusion::Backbone& backbone) {
  validate_sample(image);
  GenerationResult result;
  const PromptSpec prompt =
      backbone.make_prompt(config.prompt_template, image.category, config.anomaly_word);
  const auto& j = prompt.anomaly_token_indices;
  result.mask = foreground_mask(image, backbone.latent_side());
  backbone.set_sampler_seed(config.seed);
  LatentState z = conditioning_start(image, config, backbone);
  result.t_start = z.t;

  attention::SchedulerState state;
  state.lambda = config.lambda;
  state.delta_t = config.delta_t.value_or(1.0 / config.T);
  state.t_start = z.t;
  state.min_pixels = config.min_pixels;
  state.max_pixels_for_stop = config.max_pixels_for_stop;
  state.warmup_steps = config.warmup_steps;
  {
    const auto abar = attention::aggregate_attention(backbone.capture_attention(z, prompt), config.aggregation);
    result.n_start = std::max(1, attention::count_activated(attention::token_map(abar, j), result.mask.mask16));
    state.n_start = result.n_start;
  }
  attention::validate(state);

  const int window = z.t;
  for (int step = 0; z.t >= 1; ++step) {
    StepRecord rec;
    rec.t = z.t;
    const auto abar = attention::aggregate_attention(backbone.capture_attention(z, prompt), config.aggregation);
    const Map2D a = attention::token_map(abar, j);
    rec.n_t = attention::count_activated(a, result.mask.mask16);
    for (int r = 0; r < a.rows(); ++r)
      for (int c = 0; c < a.cols(); ++c)
        if (result.mask.mask16(r, c)) rec.max_attention = std::max(rec.max_attention, a(r, c));

    if (config.optimize && config.lambda > 0.0 && !state.stopped &&
        !attention::should_stop(state, step, rec.n_t)) {
      auto opt = attention::optimize_step(backbone, z, prompt, result.mask, state, config.thresholds,
                                          config.aggregation, step, window);
      z = std::move(opt.z);
      rec.alpha = opt.alpha;
      rec.iterations = opt.iterations;
      rec.optimized = true;
    }
    z = backbone.denoise_step(z, prompt, false).next;
    result.trace.push_back(rec);
  }

  result.final_attention =
      attention::aggregate_attention(backbone.capture_attention(z, prompt), config.aggregation);
  {
    const Map2D a = attention::token_map(result.final_attention, j);
    for (int r = 0; r < a.rows(); ++r)
      for (int c = 0; c < a.cols(); ++c)
        if (result.mask.mask16(r, c)) result.final_in_mask_max = std::max(result.final_in_mask_max, a(r, c));
  }

  const int H = image.height(), W = image.width();
  Tensor3 pixels = backbone.decode(z.z, H, W);
  for (double& v : pixels.values()) v = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;

  AnnotatedSample& s = result.sample;
  s.image.pixels = std::move(pixels);
  s.image.category = image.category;
  s.y_img = 1;
  s.y_pix = extract_annotation(result.final_attention, j, result.mask, H, W);
  s.prompt = prompt;
  s.seed = config.seed;
  s.gamma = config.gamma;
  s.source_normal = image.path.value_or(std::string{});
  return result;
}

BatchResult batch_generate(std::span<const ImageSample> normals, int per_image,
                           const GenerationConfig& config, const diffusion::BackboneFactory& factory,
                           int workers) {
  validate(config);
  if (normals.empty()) throw Error(ErrorCode::kInvalidArgument, "no conditioning normals");
  if (per_image < 1) throw Error(ErrorCode::kPrecondition, "per_image must be >= 1");
  if (!factory) throw Error(ErrorCode::kInvalidArgument, "empty backbone factory");
  for (const auto& n : normals) validate_sample(n);

  const std::size_t total = normals.size() * static_cast<std::size_t>(per_image);
  std::vector<std::optional<AnnotatedSample>> slots(total);
  std::vector<GenerationFailure> failures;
  std::mutex failure_mutex;
  std::atomic<std::size_t> next{0};

  auto run = [&]() {
    std::unique_ptr<diffusion::Backbone> backbone;
    try {
      backbone = factory();
    } catch (const std::exception& e) {
      // Nothing this worker can do; record against the first index it would have taken.
      std::lock_guard lock(failure_mutex);
      failures.push_back({next.load(), std::string("backbone construction failed: ") + e.what()});
      return;
    }
    for (std::size_t i = next++; i < total; i = next++) {
      GenerationConfig cfg = config;
      cfg.seed = config.seed + i;
      const ImageSample& normal = normals[i / static_cast<std::size_t>(per_image)];
      try {
        auto res = generate(normal, cfg, *backbone);
        if (res.sample.source_normal.empty()) {
          res.sample.source_normal = "normal_" + std::to_string(i / static_cast<std::size_t>(per_image));
        }
        slots[i] = std::move(res.sample);
      } catch (const std::exception& e) {
        std::lock_guard lock(failure_mutex);
        failures.push_back({i, e.what()});
      }
    }
  };

  const int n_workers = std::max(1, std::min<int>(workers, static_cast<int>(total)));
  if (n_workers == 1) {
    run();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(run);
    for (auto& th : pool) th.join();
  }

  BatchResult out;
  for (auto& s : slots)
    if (s) out.samples.push_back(std::move(*s));
  if (out.samples.empty()) {
    std::string msg = "every generation failed";
    if (!failures.empty()) msg += ": " + failures.front().message;
    throw Error(ErrorCode::kBackend, msg);
  }
  std::sort(failures.begin(), failures.end(),
            [](const auto& a, const auto& b) { return a.index < b.index; });
  out.failures = std::move(failures);

  for (std::size_t n = 0; n < normals.size(); ++n) {
    AnnotatedSample s;
    s.image = normals[n];
    s.y_img = 0;
    s.y_pix = Map2D(normals[n].height(), normals[n].width(), 0.0);
    s.gamma = config.gamma;
    s.source_normal = normals[n].path.value_or("normal_" + std::to_string(n));
    out.samples.push_back(std::move(s));
  }
  return out;
}

}  // namespace cut::generation
