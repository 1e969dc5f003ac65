#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cut/diffusion/backbone.hpp"
#include "cut/diffusion/tokenizer.hpp"

namespace cut::diffusion {

struct ToyBackboneConfig {
  int latent_side = 16;
  int channels = 4;
  int token_limit = 8;
  std::uint64_t weight_seed = 1234;

  int text_dim = 8;
  int hidden_dim = 8;
  int head_dim = 8;
  // Resolution of the cross-attention layer. Must be an integer multiple or
  // divisor of latent_side.
  int attention_side = 16;
  double query_gain = 2.0;

  ScheduleConfig schedule{};
  // 1 = DDPM ancestral sampling, 0 = deterministic (DDIM-style) updates.
  double eta = 0.0;
  // Scale on the text-conditioned term of the x0 prediction (classifier-free
  // guidance: the unconditional branch has no attention term).
  double guidance_scale = 1.0;
  double attention_gain = 0.5;
  // Spread of each empirical prior component around its reference latent.
  double prior_spread = 0.05;
  // Softmax scale turning raw attention into the anomaly paint weight.
  double paint_sharpness = 100.0;
  // Anomaly share below which nothing is painted; the weight then rises
  // linearly to 1 at a share of 1.
  double paint_threshold = 0.5;
  // Weight of the novelty term added to the anomaly tokens' logits.
  double novelty_gain = 0.5;
  // Penalty on the anomaly tokens' logits away from the object, where the
  // fitted reference looks like its own border.
  double object_gain = 4.0;
  // Noise-dependent blending of the blurred estimate into the x0 prediction.
  double smoothing_tau = 0.1;
  double texture_amplitude = 0.25;
};

void validate(const ToyBackboneConfig& config);

// Small deterministic backbone with one genuine cross-attention layer:
//
//   u  = resample(z) to attention_side              (C x G x G)
//   h  = tanh(conv3x3(u) + b + cos(pi t / T) e)     (F x G x G)
//   Q  = Wq h,  K = Wk E,  V = Wv E                 (E: token guidance)
//   A  = softmax(Q K^T / sqrt(d) + (k nu + o) 1_J)  (captured)
//   p  = pool(ramp(sum_j softmax(s A)_j))           (j: anomaly tokens)
//   x0 = (1 - g p) prior(z) + g p tanh(V_J)
//
// nu is the novelty of each location: the squared distance of u from the
// fitted reference (scaled by sqrt(alpha_bar)), normalised by its expected
// value under the noise, minus one. Only anomaly tokens J receive it, so
// "damaged" attends to departures from the normal appearance. Without a
// fitted prior nu is zero. o = object_gain (s - 1) where s in [0, 1] is the
// squared distance of the reference from its mean border cell, divided by
// its maximum: anomaly tokens lose attention where the reference shows
// background.
//
// prior(z) is the posterior mean of x0 under a Gaussian mixture around the
// fitted reference latents (fit_prior), or a noise-adaptive blur when none
// are fitted. Only the anomaly tokens paint, pulling the prediction towards
// the anomaly token's appearance where that token dominates; the rest of the
// prompt describes the object the prior already knows.
//
// followed by a DDPM/DDIM posterior step. The attention path is
// differentiated by hand so gradients are exact.
//
// The toy codec pools the image into latent blocks: channels 0-2 hold colour
// mapped to [-1, 1], channel 3 holds luma. Decoding renders any disagreement
// between channel 3 and the colour channels as a fine high-frequency texture.
class ToyBackbone final : public Backbone {
 public:
  explicit ToyBackbone(const ToyBackboneConfig& config = {});

  std::string name() const override { return "toy"; }
  int latent_side() const override { return config_.latent_side; }
  int latent_channels() const override { return config_.channels; }
  int token_limit() const override { return config_.token_limit; }
  const NoiseSchedule& schedule() const override { return schedule_; }

  PromptSpec make_prompt(const std::string& prompt_template, const std::string& class_name,
                         const std::string& anomaly_word) const override;

  Tensor3 encode(const ImageSample& image) const override;
  Tensor3 decode(const Tensor3& latent, int rows, int cols) const override;
  Tensor3 text_encode(const PromptSpec& prompt) const override;

  void set_sampler_seed(std::uint64_t seed) override { sampler_seed_ = seed; }

  AttentionStack capture_attention(const LatentState& z, const PromptSpec& prompt) const override;
  StepOutput denoise_step(const LatentState& z, const PromptSpec& prompt, bool capture) override;
  GradientOutput attention_gradient(const LatentState& z, const PromptSpec& prompt,
                                    const StackLoss& loss) const override;

  const ToyBackboneConfig& config() const noexcept { return config_; }

  // Reference latents for the empirical prior (all of latent shape). An
  // empty list removes the prior.
  void fit_prior(std::vector<Tensor3> latents);
  void fit_prior(std::span<const ImageSample> images);
  const std::vector<Tensor3>& prior() const noexcept { return prior_; }

  // Raw parameters, exposed so tests can rebuild the attention layer
  // independently.
  struct Weights {
    std::vector<double> conv;        // F x C x 3 x 3
    std::vector<double> conv_bias;   // F
    std::vector<double> time_embed;  // F
    std::vector<double> wq;          // d x F
    std::vector<double> wk;          // d x D
    std::vector<double> wv;          // C x D
    std::vector<double> position;    // token_limit x D
  };
  const Weights& weights() const noexcept { return weights_; }

  // Latent resampled onto the attention grid (C x G x G).
  Tensor3 to_attention_grid(const Tensor3& z) const;

 private:
  struct Forward {
    Tensor3 hidden;     // F x G x G, post-tanh
    Tensor3 queries;    // G x G x d
    Tensor3 keys;       // 1 x N x d
    Tensor3 values;     // 1 x N x C
    Tensor3 appearance; // 1 x N x C, tanh(values)
    Tensor3 deviation;  // C x G x G, u - sqrt(abar) * reference (empty without prior)
    double novelty_scale = 0.0;
    Tensor3 attention;  // G x G x N
  };

  void check_inputs(const LatentState& z, const PromptSpec& prompt) const;
  Forward forward(const LatentState& z, const PromptSpec& prompt) const;
  Tensor3 predict_x0(const LatentState& z, const PromptSpec& prompt, const Forward& fwd) const;
  Tensor3 from_attention_grid_adjoint(const Tensor3& grad_grid) const;
  Tensor3 pool_to_latent(const Tensor3& grid) const;

  ToyBackboneConfig config_;
  NoiseSchedule schedule_;
  WordTokenizer tokenizer_;
  Weights weights_;
  std::uint64_t sampler_seed_ = 0;
  std::vector<Tensor3> prior_;
  Tensor3 reference_grid_;
  Map2D objectness_;  // G x G, empty without prior  // mean prior latent on the attention grid
};

}  // namespace cut::diffusion
