#include "cut/diffusion/backbone.hpp"

#include <sstream>

#include "cut/core/error.hpp"
#include "cut/diffusion/toy_backbone.hpp"

namespace cut::diffusion {

StepOutput denoise_step(Backbone& backbone, const LatentState& z, const PromptSpec& prompt,
                        bool capture) {
  return backbone.denoise_step(z, prompt, capture);
}

Tensor3 grad_latt_wrt_latent(const Backbone& backbone, const LatentState& z,
                             const PromptSpec& prompt, const StackLoss& loss) {
  return backbone.attention_gradient(z, prompt, loss).grad;
}

namespace {

ToyBackboneConfig parse_toy_options(const std::string& options) {
  ToyBackboneConfig config;
  std::istringstream in(options);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::kInvalidArgument, "toy backbone option '" + item + "' is not key=value");
    }
    const std::string key = item.substr(0, eq);
    const std::string value = item.substr(eq + 1);
    try {
      if (key == "latent") config.latent_side = std::stoi(value);
      else if (key == "channels") config.channels = std::stoi(value);
      else if (key == "tokens") config.token_limit = std::stoi(value);
      else if (key == "seed") config.weight_seed = std::stoull(value);
      else if (key == "steps") config.schedule.T = std::stoi(value);
      else if (key == "eta") config.eta = std::stod(value);
      else if (key == "guidance") config.guidance_scale = std::stod(value);
      else if (key == "beta_start") config.schedule.beta_start = std::stod(value);
      else if (key == "beta_end") config.schedule.beta_end = std::stod(value);
      else if (key == "gain") config.attention_gain = std::stod(value);
      else if (key == "spread") config.prior_spread = std::stod(value);
      else if (key == "novelty") config.novelty_gain = std::stod(value);
      else if (key == "object") config.object_gain = std::stod(value);
      else if (key == "sharpness") config.paint_sharpness = std::stod(value);
      else if (key == "paint_threshold") config.paint_threshold = std::stod(value);
      else if (key == "texture") config.texture_amplitude = std::stod(value);
      else if (key == "query_gain") config.query_gain = std::stod(value);
      else if (key == "schedule") config.schedule.family = parse_schedule_family(value);
      else throw Error(ErrorCode::kInvalidArgument, "unknown toy backbone option '" + key + "'");
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::kInvalidArgument, "bad value for toy backbone option '" + key + "'");
    }
  }
  return config;
}

}  // namespace

std::unique_ptr<Backbone> make_backbone(const std::string& selector, const std::string& cache_dir) {
  if (selector == "toy") return std::make_unique<ToyBackbone>();
  if (selector.rfind("toy:", 0) == 0) {
    return std::make_unique<ToyBackbone>(parse_toy_options(selector.substr(4)));
  }
  std::string where = cache_dir.empty() ? std::string("(no cache directory set)") : cache_dir;
  throw Error(ErrorCode::kBackend,
              "backbone '" + selector +
                  "' needs a pretrained latent-diffusion adapter, which is not part of this build; "
                  "cache directory: " + where);
}

}  // namespace cut::diffusion
