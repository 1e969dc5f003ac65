#include "cut/diffusion/toy_backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "cut/core/error.hpp"
#include "cut/core/random.hpp"

namespace cut::diffusion {

namespace {

constexpr std::uint64_t kTokenSalt = 0x746f6b656e;   // "token"
constexpr std::uint64_t kSamplerSalt = 0x73616d706c;  // "sampl"

void fill_gaussian(std::mt19937_64& rng, std::vector<double>& out, std::size_t n, double stddev) {
  out = gaussian_vector(rng, n, stddev);
}

double texture_pattern(int r, int c) {
  const auto h = mix_seed(static_cast<std::uint64_t>(r / 2) * 7919u + static_cast<std::uint64_t>(c / 2),
                          0x7465787475);
  return (h & 1u) ? 1.0 : -1.0;
}

// 3x3 binomial blur with reflect padding, per channel of a C x P x P tensor.
Tensor3 blur3(const Tensor3& z) {
  static constexpr double k[3] = {0.25, 0.5, 0.25};
  const int P0 = z.dim1();
  const int P1 = z.dim2();
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
  };
  Tensor3 out(z.dim0(), P0, P1);
  for (int ch = 0; ch < z.dim0(); ++ch)
    for (int y = 0; y < P0; ++y)
      for (int x = 0; x < P1; ++x) {
        double acc = 0.0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            acc += k[dy + 1] * k[dx + 1] * z(ch, reflect(y + dy, P0), reflect(x + dx, P1));
        out(ch, y, x) = acc;
      }
  return out;
}

}  // namespace

void validate(const ToyBackboneConfig& c) {
  const int dims[] = {c.latent_side, c.channels, c.token_limit, c.text_dim,
                      c.hidden_dim,  c.head_dim, c.attention_side};
  for (int d : dims) {
    if (d < 2) throw Error(ErrorCode::kInvalidArgument, "toy backbone dimensions must be >= 2");
  }
  if (c.attention_side % c.latent_side != 0 && c.latent_side % c.attention_side != 0) {
    throw Error(ErrorCode::kInvalidArgument,
                "toy backbone attention_side must be a multiple or divisor of latent_side");
  }
  if (c.eta < 0.0 || c.eta > 1.0) throw Error(ErrorCode::kInvalidArgument, "eta must be in [0, 1]");
  if (c.paint_threshold < 0.0 || c.paint_threshold > 1.0) {
    throw Error(ErrorCode::kInvalidArgument, "paint_threshold must be in [0, 1]");
  }
  if (c.prior_spread <= 0.0) throw Error(ErrorCode::kInvalidArgument, "prior_spread must be positive");
  if (!std::isfinite(c.novelty_gain) || !std::isfinite(c.object_gain)) {
    throw Error(ErrorCode::kInvalidArgument, "novelty and object gains must be finite");
  }
}

ToyBackbone::ToyBackbone(const ToyBackboneConfig& config)
    : config_(config), schedule_((validate(config), config.schedule)) {
  const int F = config_.hidden_dim;
  const int C = config_.channels;
  const int d = config_.head_dim;
  const int D = config_.text_dim;
  std::mt19937_64 rng(config_.weight_seed);
  fill_gaussian(rng, weights_.conv, static_cast<std::size_t>(F) * C * 9, 1.5 / std::sqrt(C * 9.0));
  fill_gaussian(rng, weights_.conv_bias, F, 0.1);
  fill_gaussian(rng, weights_.time_embed, F, 0.1);
  fill_gaussian(rng, weights_.wq, static_cast<std::size_t>(d) * F,
                config_.query_gain / std::sqrt(static_cast<double>(F)));
  fill_gaussian(rng, weights_.wk, static_cast<std::size_t>(d) * D, 1.0 / std::sqrt(static_cast<double>(D)));
  fill_gaussian(rng, weights_.wv, static_cast<std::size_t>(C) * D, 1.0 / std::sqrt(static_cast<double>(D)));
  fill_gaussian(rng, weights_.position, static_cast<std::size_t>(config_.token_limit) * D, 0.5);
}

PromptSpec ToyBackbone::make_prompt(const std::string& prompt_template, const std::string& class_name,
                                    const std::string& anomaly_word) const {
  return diffusion::make_prompt(tokenizer_, prompt_template, class_name, anomaly_word,
                                config_.token_limit);
}

void ToyBackbone::check_inputs(const LatentState& z, const PromptSpec& prompt) const {
  if (prompt.token_count() == 0) throw Error(ErrorCode::kInvalidArgument, "prompt has no tokens");
  if (prompt.token_count() > config_.token_limit) {
    throw Error(ErrorCode::kRange, "prompt has " + std::to_string(prompt.token_count()) +
                                       " tokens, toy backbone limit is " +
                                       std::to_string(config_.token_limit));
  }
  if (z.z.dim0() != config_.channels || z.z.dim1() != config_.latent_side ||
      z.z.dim2() != config_.latent_side) {
    throw Error(ErrorCode::kShapeMismatch, "latent shape does not match the toy backbone");
  }
  if (z.t < 0 || z.t > schedule_.T()) throw Error(ErrorCode::kRange, "timestep out of range");
}

Tensor3 ToyBackbone::text_encode(const PromptSpec& prompt) const {
  if (prompt.token_count() > config_.token_limit) {
    throw Error(ErrorCode::kRange, "prompt exceeds the token limit");
  }
  const int D = config_.text_dim;
  Tensor3 e(1, prompt.token_count(), D);
  for (int n = 0; n < prompt.token_count(); ++n) {
    std::mt19937_64 rng(mix_seed(config_.weight_seed ^ kTokenSalt,
                                 static_cast<std::uint64_t>(prompt.tokens[n])));
    const auto emb = gaussian_vector(rng, D);
    for (int k = 0; k < D; ++k) e(0, n, k) = emb[k] + weights_.position[n * D + k];
  }
  return e;
}

Tensor3 ToyBackbone::to_attention_grid(const Tensor3& z) const {
  const int C = config_.channels;
  const int P = config_.latent_side;
  const int G = config_.attention_side;
  Tensor3 up(C, G, G);
  if (G >= P) {
    const int r = G / P;
    for (int ch = 0; ch < C; ++ch)
      for (int y = 0; y < G; ++y)
        for (int x = 0; x < G; ++x) up(ch, y, x) = z(ch, y / r, x / r);
  } else {
    const int r = P / G;
    const double inv = 1.0 / (r * r);
    for (int ch = 0; ch < C; ++ch)
      for (int y = 0; y < P; ++y)
        for (int x = 0; x < P; ++x) up(ch, y / r, x / r) += z(ch, y, x) * inv;
  }
  return up;
}

Tensor3 ToyBackbone::from_attention_grid_adjoint(const Tensor3& g) const {
  const int C = config_.channels;
  const int P = config_.latent_side;
  const int G = config_.attention_side;
  Tensor3 out(C, P, P);
  if (G >= P) {
    const int r = G / P;
    for (int ch = 0; ch < C; ++ch)
      for (int y = 0; y < G; ++y)
        for (int x = 0; x < G; ++x) out(ch, y / r, x / r) += g(ch, y, x);
  } else {
    const int r = P / G;
    const double inv = 1.0 / (r * r);
    for (int ch = 0; ch < C; ++ch)
      for (int y = 0; y < P; ++y)
        for (int x = 0; x < P; ++x) out(ch, y, x) = g(ch, y / r, x / r) * inv;
  }
  return out;
}

Tensor3 ToyBackbone::pool_to_latent(const Tensor3& grid) const {
  const int C = grid.dim0();
  const int P = config_.latent_side;
  const int G = config_.attention_side;
  Tensor3 out(C, P, P);
  if (G >= P) {
    const int r = G / P;
    const double inv = 1.0 / (r * r);
    for (int ch = 0; ch < C; ++ch)
      for (int y = 0; y < G; ++y)
        for (int x = 0; x < G; ++x) out(ch, y / r, x / r) += grid(ch, y, x) * inv;
  } else {
    const int r = P / G;
    for (int ch = 0; ch < C; ++ch)
      for (int y = 0; y < P; ++y)
        for (int x = 0; x < P; ++x) out(ch, y, x) = grid(ch, y / r, x / r);
  }
  return out;
}

ToyBackbone::Forward ToyBackbone::forward(const LatentState& z, const PromptSpec& prompt) const {
  check_inputs(z, prompt);
  const int C = config_.channels;
  const int G = config_.attention_side;
  const int F = config_.hidden_dim;
  const int d = config_.head_dim;
  const int D = config_.text_dim;
  const int N = prompt.token_count();

  Forward fwd;
  const Tensor3 up = to_attention_grid(z.z);
  const double time_phase = std::cos(std::numbers::pi * z.t / schedule_.T());

  fwd.hidden = Tensor3(F, G, G);
  for (int f = 0; f < F; ++f) {
    const double bias = weights_.conv_bias[f] + time_phase * weights_.time_embed[f];
    for (int y = 0; y < G; ++y)
      for (int x = 0; x < G; ++x) {
        double acc = bias;
        for (int ch = 0; ch < C; ++ch)
          for (int ky = 0; ky < 3; ++ky) {
            const int yy = y + ky - 1;
            if (yy < 0 || yy >= G) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int xx = x + kx - 1;
              if (xx < 0 || xx >= G) continue;
              acc += weights_.conv[((f * C + ch) * 3 + ky) * 3 + kx] * up(ch, yy, xx);
            }
          }
        fwd.hidden(f, y, x) = std::tanh(acc);
      }
  }

  fwd.queries = Tensor3(G, G, d);
  for (int y = 0; y < G; ++y)
    for (int x = 0; x < G; ++x)
      for (int k = 0; k < d; ++k) {
        double acc = 0.0;
        for (int f = 0; f < F; ++f) acc += weights_.wq[k * F + f] * fwd.hidden(f, y, x);
        fwd.queries(y, x, k) = acc;
      }

  const Tensor3 e = text_encode(prompt);
  fwd.keys = Tensor3(1, N, d);
  fwd.values = Tensor3(1, N, C);
  for (int n = 0; n < N; ++n) {
    for (int k = 0; k < d; ++k) {
      double acc = 0.0;
      for (int j = 0; j < D; ++j) acc += weights_.wk[k * D + j] * e(0, n, j);
      fwd.keys(0, n, k) = acc;
    }
    for (int ch = 0; ch < C; ++ch) {
      double acc = 0.0;
      for (int j = 0; j < D; ++j) acc += weights_.wv[ch * D + j] * e(0, n, j);
      fwd.values(0, n, ch) = acc;
    }
  }

  fwd.appearance = fwd.values;
  for (double& v : fwd.appearance.values()) v = std::tanh(v);

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<char> is_anomaly(N, 0);
  for (int j : prompt.anomaly_token_indices) {
    if (j < 0 || j >= N) throw Error(ErrorCode::kRange, "anomaly token index out of range");
    is_anomaly[j] = 1;
  }
  Map2D novelty(G, G, 0.0);
  if (!prior_.empty() && config_.novelty_gain != 0.0) {
    const double abar = schedule_.alpha_bar(z.t);
    const double a = std::sqrt(abar);
    const double tau2 = config_.prior_spread * config_.prior_spread;
    fwd.novelty_scale = 1.0 / (C * (abar * tau2 + 1.0 - abar));
    fwd.deviation = Tensor3(C, G, G);
    for (int ch = 0; ch < C; ++ch)
      for (int y = 0; y < G; ++y)
        for (int x = 0; x < G; ++x) {
          const double dv = up(ch, y, x) - a * reference_grid_(ch, y, x);
          fwd.deviation(ch, y, x) = dv;
          novelty(y, x) += dv * dv;
        }
    for (double& v : novelty.values()) v = config_.novelty_gain * (v * fwd.novelty_scale - 1.0);
  }
  if (!objectness_.empty()) {
    for (std::size_t i = 0; i < novelty.size(); ++i) {
      novelty.values()[i] += config_.object_gain * (objectness_.values()[i] - 1.0);
    }
  }
  fwd.attention = Tensor3(G, G, N);
  std::vector<double> logits(N);
  for (int y = 0; y < G; ++y)
    for (int x = 0; x < G; ++x) {
      double peak = -INFINITY;
      for (int n = 0; n < N; ++n) {
        double acc = 0.0;
        for (int k = 0; k < d; ++k) acc += fwd.queries(y, x, k) * fwd.keys(0, n, k);
        logits[n] = acc * inv_sqrt_d + (is_anomaly[n] ? novelty(y, x) : 0.0);
        peak = std::max(peak, logits[n]);
      }
      double total = 0.0;
      for (int n = 0; n < N; ++n) {
        logits[n] = std::exp(logits[n] - peak);
        total += logits[n];
      }
      for (int n = 0; n < N; ++n) fwd.attention(y, x, n) = logits[n] / total;
    }
  return fwd;
}

AttentionStack ToyBackbone::capture_attention(const LatentState& z, const PromptSpec& prompt) const {
  AttentionStack stack;
  stack.maps.push_back(forward(z, prompt).attention);
  stack.layer_ids.push_back("toy.cross_attn." + std::to_string(config_.attention_side));
  stack.t = z.t;
  return stack;
}

void ToyBackbone::fit_prior(std::vector<Tensor3> latents) {
  for (const auto& l : latents) {
    if (l.dim0() != config_.channels || l.dim1() != config_.latent_side || l.dim2() != config_.latent_side) {
      throw Error(ErrorCode::kShapeMismatch, "prior latent shape does not match the toy backbone");
    }
  }
  prior_ = std::move(latents);
  reference_grid_ = Tensor3();
  objectness_ = Map2D();
  if (prior_.empty()) return;
  Tensor3 mean(config_.channels, config_.latent_side, config_.latent_side);
  for (const auto& l : prior_)
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += l[i] / static_cast<double>(prior_.size());
  reference_grid_ = to_attention_grid(mean);

  const int G = config_.attention_side;
  std::vector<double> border(config_.channels, 0.0);
  int n_border = 0;
  for (int y = 0; y < G; ++y)
    for (int x = 0; x < G; ++x) {
      if (y != 0 && x != 0 && y != G - 1 && x != G - 1) continue;
      for (int ch = 0; ch < config_.channels; ++ch) border[ch] += reference_grid_(ch, y, x);
      ++n_border;
    }
  for (double& b : border) b /= n_border;
  objectness_ = Map2D(G, G, 0.0);
  for (int y = 0; y < G; ++y)
    for (int x = 0; x < G; ++x)
      for (int ch = 0; ch < config_.channels; ++ch) {
        const double dv = reference_grid_(ch, y, x) - border[ch];
        objectness_(y, x) += dv * dv;
      }
  const double peak = *std::max_element(objectness_.values().begin(), objectness_.values().end());
  for (double& v : objectness_.values()) v = peak > 0.0 ? v / peak : 1.0;
}

void ToyBackbone::fit_prior(std::span<const ImageSample> images) {
  std::vector<Tensor3> latents;
  for (const auto& img : images) latents.push_back(encode(img));
  fit_prior(std::move(latents));
}

Tensor3 ToyBackbone::predict_x0(const LatentState& z, const PromptSpec& prompt, const Forward& fwd) const {
  const int C = config_.channels;
  const int G = config_.attention_side;
  const double abar = schedule_.alpha_bar(z.t);
  const double a = std::sqrt(abar);

  Tensor3 base(z.z.dim0(), z.z.dim1(), z.z.dim2());
  if (!prior_.empty()) {
    // z = a x0 + s eps with x0 ~ N(mu_k, tau^2 I) per component.
    const double tau2 = config_.prior_spread * config_.prior_spread;
    const double var = std::max(abar * tau2 + (1.0 - abar), 1e-12);
    const double shrink = a * tau2 / var;
    std::vector<double> logw(prior_.size());
    for (std::size_t k = 0; k < prior_.size(); ++k) {
      double d2 = 0.0;
      for (std::size_t i = 0; i < base.size(); ++i) {
        const double r = z.z[i] - a * prior_[k][i];
        d2 += r * r;
      }
      logw[k] = -d2 / (2.0 * var);
    }
    const double peak = *std::max_element(logw.begin(), logw.end());
    double total = 0.0;
    for (double& w : logw) total += (w = std::exp(w - peak));
    for (std::size_t k = 0; k < prior_.size(); ++k) {
      const double w = logw[k] / total;
      for (std::size_t i = 0; i < base.size(); ++i) {
        base[i] += w * (prior_[k][i] + shrink * (z.z[i] - a * prior_[k][i]));
      }
    }
  } else {
    const double noise_ratio_sq = (1.0 - abar) / abar;
    const double blend = noise_ratio_sq / (noise_ratio_sq + config_.smoothing_tau * config_.smoothing_tau);
    Tensor3 scaled = z.z;
    for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] /= a;
    const Tensor3 blurred = blur3(scaled);
    for (std::size_t i = 0; i < base.size(); ++i) base[i] = blend * blurred[i] + (1.0 - blend) * scaled[i];
  }

  // Paint weight: share of the anomaly tokens under a sharpened softmax.
  const int N = fwd.attention.dim2();
  Tensor3 weight_grid(1, G, G);
  std::vector<double> e(N);
  for (int y = 0; y < G; ++y)
    for (int x = 0; x < G; ++x) {
      double peak = -INFINITY;
      for (int n = 0; n < N; ++n) peak = std::max(peak, config_.paint_sharpness * fwd.attention(y, x, n));
      double total = 0.0;
      for (int n = 0; n < N; ++n) total += (e[n] = std::exp(config_.paint_sharpness * fwd.attention(y, x, n) - peak));
      double w = 0.0;
      for (int j : prompt.anomaly_token_indices) w += e[j] / total;
      const double th = config_.paint_threshold;
      weight_grid(0, y, x) = th < 1.0 ? std::clamp((w - th) / (1.0 - th), 0.0, 1.0) : 0.0;
    }
  const Tensor3 weight = pool_to_latent(weight_grid);

  std::vector<double> target(C, 0.0);
  for (int j : prompt.anomaly_token_indices)
    for (int ch = 0; ch < C; ++ch) target[ch] += fwd.appearance(0, j, ch);
  for (double& v : target) v /= static_cast<double>(std::max<std::size_t>(1, prompt.anomaly_token_indices.size()));

  const double gain = std::clamp(config_.guidance_scale * config_.attention_gain, 0.0, 1.0);
  const int P = z.z.dim1();
  Tensor3 x0(z.z.dim0(), P, z.z.dim2());
  for (int ch = 0; ch < C; ++ch)
    for (int y = 0; y < P; ++y)
      for (int x = 0; x < z.z.dim2(); ++x) {
        const double p = gain * weight(0, y, x);
        x0(ch, y, x) = std::clamp((1.0 - p) * base(ch, y, x) + p * target[ch], -1.0, 1.0);
      }
  return x0;
}

StepOutput ToyBackbone::denoise_step(const LatentState& z, const PromptSpec& prompt, bool capture) {
  if (z.t <= 0) throw Error(ErrorCode::kPrecondition, "denoise_step needs t >= 1");
  const Forward fwd = forward(z, prompt);
  const Tensor3 x0 = predict_x0(z, prompt, fwd);

  const int t = z.t;
  const double abar_t = schedule_.alpha_bar(t);
  const double abar_prev = schedule_.alpha_bar(t - 1);
  const double sigma = config_.eta * std::sqrt((1.0 - abar_prev) / (1.0 - abar_t)) *
                       std::sqrt(1.0 - abar_t / abar_prev);
  const double dir = std::sqrt(std::max(0.0, 1.0 - abar_prev - sigma * sigma));
  const double a_t = std::sqrt(abar_t);
  const double s_t = std::sqrt(1.0 - abar_t);
  const double a_prev = std::sqrt(abar_prev);

  std::mt19937_64 rng(mix_seed(sampler_seed_ ^ kSamplerSalt, static_cast<std::uint64_t>(t)));
  std::normal_distribution<double> normal(0.0, 1.0);

  StepOutput out;
  out.next.t = t - 1;
  out.next.T = z.T;
  out.next.z = Tensor3(z.z.dim0(), z.z.dim1(), z.z.dim2());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const double eps = (z.z[i] - a_t * x0[i]) / s_t;
    double next = a_prev * x0[i] + dir * eps;
    if (sigma > 0.0) next += sigma * normal(rng);
    out.next.z[i] = next;
  }
  if (capture) {
    out.attention.maps.push_back(fwd.attention);
    out.attention.layer_ids.push_back("toy.cross_attn." + std::to_string(config_.attention_side));
    out.attention.t = t;
  }
  return out;
}

GradientOutput ToyBackbone::attention_gradient(const LatentState& z, const PromptSpec& prompt,
                                               const StackLoss& loss) const {
  const Forward fwd = forward(z, prompt);
  GradientOutput out;
  out.attention.maps.push_back(fwd.attention);
  out.attention.layer_ids.push_back("toy.cross_attn." + std::to_string(config_.attention_side));
  out.attention.t = z.t;

  const StackLossResult lr = loss(out.attention);
  out.loss = lr.value;
  if (lr.grad.size() != 1 || !lr.grad[0].same_shape(fwd.attention)) {
    throw Error(ErrorCode::kBackend, "stack loss gradient does not match the captured maps");
  }
  const Tensor3& dA = lr.grad[0];

  const int C = config_.channels;
  const int G = config_.attention_side;
  const int F = config_.hidden_dim;
  const int d = config_.head_dim;
  const int N = prompt.token_count();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  // softmax -> logits -> queries -> hidden pre-activation
  Tensor3 d_pre(F, G, G);
  Tensor3 d_up(C, G, G);
  std::vector<double> d_logit(N);
  std::vector<double> d_query(d);
  for (int y = 0; y < G; ++y)
    for (int x = 0; x < G; ++x) {
      double dot = 0.0;
      for (int n = 0; n < N; ++n) dot += fwd.attention(y, x, n) * dA(y, x, n);
      bool any = false;
      for (int n = 0; n < N; ++n) {
        d_logit[n] = fwd.attention(y, x, n) * (dA(y, x, n) - dot);
        any = any || d_logit[n] != 0.0;
      }
      if (!any) continue;
      if (!fwd.deviation.empty()) {
        double dj = 0.0;
        for (int j : prompt.anomaly_token_indices) dj += d_logit[j];
        const double k = dj * config_.novelty_gain * 2.0 * fwd.novelty_scale;
        for (int ch = 0; ch < C; ++ch) d_up(ch, y, x) += k * fwd.deviation(ch, y, x);
      }
      for (int k = 0; k < d; ++k) {
        double acc = 0.0;
        for (int n = 0; n < N; ++n) acc += d_logit[n] * fwd.keys(0, n, k);
        d_query[k] = acc * inv_sqrt_d;
      }
      for (int f = 0; f < F; ++f) {
        double acc = 0.0;
        for (int k = 0; k < d; ++k) acc += weights_.wq[k * F + f] * d_query[k];
        const double h = fwd.hidden(f, y, x);
        d_pre(f, y, x) = acc * (1.0 - h * h);
      }
    }

  // transpose of the zero-padded 3x3 convolution
  for (int f = 0; f < F; ++f)
    for (int y = 0; y < G; ++y)
      for (int x = 0; x < G; ++x) {
        const double g = d_pre(f, y, x);
        if (g == 0.0) continue;
        for (int ch = 0; ch < C; ++ch)
          for (int ky = 0; ky < 3; ++ky) {
            const int yy = y + ky - 1;
            if (yy < 0 || yy >= G) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int xx = x + kx - 1;
              if (xx < 0 || xx >= G) continue;
              d_up(ch, yy, xx) += weights_.conv[((f * C + ch) * 3 + ky) * 3 + kx] * g;
            }
          }
      }
  out.grad = from_attention_grid_adjoint(d_up);
  return out;
}

namespace {

// Block-average pooling of an H x W plane onto a P x P grid.
std::vector<double> block_means(const Tensor3& image, int channel, int P) {
  std::vector<double> sum(static_cast<std::size_t>(P) * P, 0.0);
  std::vector<int> count(sum.size(), 0);
  const int H = image.dim0();
  const int W = image.dim1();
  for (int r = 0; r < H; ++r) {
    const int by = static_cast<int>(static_cast<long>(r) * P / H);
    for (int c = 0; c < W; ++c) {
      const int bx = static_cast<int>(static_cast<long>(c) * P / W);
      sum[by * P + bx] += image(r, c, channel);
      ++count[by * P + bx];
    }
  }
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] /= std::max(count[i], 1);
  return sum;
}

}  // namespace

Tensor3 ToyBackbone::encode(const ImageSample& image) const {
  const int P = config_.latent_side;
  const int C = config_.channels;
  Tensor3 z(C, P, P);
  std::vector<std::vector<double>> rgb(3);
  for (int ch = 0; ch < 3; ++ch) rgb[ch] = block_means(image.pixels, ch, P);
  for (int i = 0; i < P * P; ++i) {
    const int y = i / P;
    const int x = i % P;
    for (int ch = 0; ch < std::min(C, 3); ++ch) z(ch, y, x) = 2.0 * rgb[ch][i] - 1.0;
    if (C >= 4) {
      const double luma = 0.299 * rgb[0][i] + 0.587 * rgb[1][i] + 0.114 * rgb[2][i];
      z(3, y, x) = 2.0 * luma - 1.0;
    }
  }
  return z;
}

Tensor3 ToyBackbone::decode(const Tensor3& latent, int rows, int cols) const {
  const int P = latent.dim1();
  Tensor3 image(rows, cols, 3);
  std::vector<Map2D> planes;
  for (int ch = 0; ch < 3; ++ch) {
    Map2D plane(P, P);
    for (int y = 0; y < P; ++y)
      for (int x = 0; x < latent.dim2(); ++x)
        plane(y, x) = ch < latent.dim0() ? 0.5 * (latent(ch, y, x) + 1.0) : 0.5;
    planes.push_back(resize_bilinear(plane, rows, cols));
  }
  Map2D texture(rows, cols);
  if (latent.dim0() >= 4) {
    Map2D amp(P, P);
    for (int y = 0; y < P; ++y)
      for (int x = 0; x < latent.dim2(); ++x) {
        const double luma = 0.299 * latent(0, y, x) + 0.587 * latent(1, y, x) + 0.114 * latent(2, y, x);
        amp(y, x) = config_.texture_amplitude * std::abs(latent(3, y, x) - luma);
      }
    texture = resize_bilinear(amp, rows, cols);
  }
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const double tex = texture(r, c) * texture_pattern(r, c);
      for (int ch = 0; ch < 3; ++ch) image(r, c, ch) = std::clamp(planes[ch](r, c) + tex, 0.0, 1.0);
    }
  return image;
}

}  // namespace cut::diffusion
