#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cut/core/types.hpp"
#include "cut/diffusion/noise_schedule.hpp"

namespace cut::diffusion {

// Value of a scalar loss on an AttentionStack plus its gradient with respect
// to every captured map (same shapes as AttentionStack::maps).
struct StackLossResult {
  double value = 0.0;
  std::vector<Tensor3> grad;
};

using StackLoss = std::function<StackLossResult(const AttentionStack&)>;

struct StepOutput {
  LatentState next;
  AttentionStack attention;  // empty unless capture was requested
};

struct GradientOutput {
  double loss = 0.0;
  Tensor3 grad;  // shape of the latent
  AttentionStack attention;
};

// A latent denoising backbone. The capture contract: every map in an
// AttentionStack is the softmax(QK^T / sqrt(d)) probability map (before the
// multiplication by V) of one cross-attention layer, so each spatial
// location's token vector sums to one.
//
// Implementations must be deterministic for identical (latent, t, prompt,
// sampler seed). A handle belongs to one generation job at a time.
class Backbone {
 public:
  virtual ~Backbone() = default;

  virtual std::string name() const = 0;
  virtual int latent_side() const = 0;
  virtual int latent_channels() const = 0;
  virtual int token_limit() const = 0;
  virtual const NoiseSchedule& schedule() const = 0;

  virtual PromptSpec make_prompt(const std::string& prompt_template, const std::string& class_name,
                                 const std::string& anomaly_word) const = 0;

  virtual Tensor3 encode(const ImageSample& image) const = 0;
  virtual Tensor3 decode(const Tensor3& latent, int rows, int cols) const = 0;

  // Guidance vectors, one row per token (N x D stored as 1 x N x D).
  virtual Tensor3 text_encode(const PromptSpec& prompt) const = 0;

  // Seeds the ancestral sampling noise used by denoise_step.
  virtual void set_sampler_seed(std::uint64_t seed) = 0;

  // Runs the attention layers only; valid for any t in [0, T].
  virtual AttentionStack capture_attention(const LatentState& z, const PromptSpec& prompt) const = 0;

  // One reverse step t -> t-1. Throws kPrecondition for t == 0 and kRange when
  // the prompt exceeds the token limit.
  virtual StepOutput denoise_step(const LatentState& z, const PromptSpec& prompt, bool capture) = 0;

  // Gradient of loss(capture_attention(z)) with respect to z.
  virtual GradientOutput attention_gradient(const LatentState& z, const PromptSpec& prompt,
                                            const StackLoss& loss) const = 0;
};

using BackboneFactory = std::function<std::unique_ptr<Backbone>()>;

// Free-function surface of the backbone contract.
StepOutput denoise_step(Backbone& backbone, const LatentState& z, const PromptSpec& prompt,
                        bool capture);
Tensor3 grad_latt_wrt_latent(const Backbone& backbone, const LatentState& z,
                             const PromptSpec& prompt, const StackLoss& loss);

// Builds a backbone from a selector string: "toy" or
// "toy:key=value,key=value" (keys: latent, channels, tokens, seed, steps,
// eta, guidance, beta_start, beta_end, schedule, gain, spread, novelty, object,
// sharpness, paint_threshold, texture, query_gain). Any other selector names a
// pretrained latent-diffusion checkpoint; loading one needs an external
// adapter build and throws kBackend here. `cache_dir` is where such an
// adapter would look for weights.
std::unique_ptr<Backbone> make_backbone(const std::string& selector, const std::string& cache_dir = {});

}  // namespace cut::diffusion
