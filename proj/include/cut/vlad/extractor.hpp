#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "cut/core/types.hpp"

namespace cut::vlad {

struct StageInfo {
  std::string id;
  int rows = 0;
  int cols = 0;
  int channels = 0;
};

// Normal / abnormal text embeddings, each unit norm and of the joint
// embedding dimension.
struct TextEmbedding {
  std::vector<double> normal;
  std::vector<double> abnormal;

  int dim() const noexcept { return static_cast<int>(normal.size()); }
};

// Normal and abnormal prompt templates; "[cls]" is replaced by the category.
struct PromptEnsemble {
  int version = 0;
  std::vector<std::string> normal;
  std::vector<std::string> abnormal;
};

// The ensemble shipped in resources/prompt_ensemble.json (compiled in).
const PromptEnsemble& default_prompt_ensemble();
PromptEnsemble parse_prompt_ensemble(const std::string& json_text);
std::vector<std::string> instantiate(const std::vector<std::string>& templates, const std::string& category);

// Frozen two-tower feature extractor. Implementations are deterministic per
// input and safe to call concurrently.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;

  virtual std::string name() const = 0;
  virtual int embed_dim() const = 0;
  virtual const std::vector<StageInfo>& stages() const = 0;

  virtual std::vector<double> image_token(const ImageSample& image) const = 0;

  // One H_i x W_i x C_i tensor per stage, in stage order.
  virtual std::vector<Tensor3> patch_tokens(const ImageSample& image) const = 0;
  Tensor3 patch_tokens(const ImageSample& image, int stage) const;

  // Means over each prompt set of the per-prompt unit embeddings,
  // renormalised.
  virtual TextEmbedding text_embed(const std::vector<std::string>& normal_prompts,
                                   const std::vector<std::string>& abnormal_prompts) const = 0;

  TextEmbedding text_embed_for(const std::string& category,
                               const PromptEnsemble& ensemble = default_prompt_ensemble()) const;
};

struct ToyExtractorConfig {
  int grid = 16;            // patch grid side, shared by every stage
  int stages = 4;           // stage i pools a (2i+1)^2 cell neighbourhood
  int channels = 64;        // C_i
  int embed_dim = 32;       // C
  double position_gain = 2.0;
  double projection_gain = 1.5;
  std::uint64_t weight_seed = 7;
};

void validate(const ToyExtractorConfig& config);

// Hand-crafted cell statistics (colour, luma spread, gradient energy, range)
// plus a positional code, pooled over growing neighbourhoods and pushed
// through a seeded tanh projection per stage. Text prompts embed as sums of
// hashed word vectors. The toy image tower has no zero-shot knowledge, so its
// image token is the bisector of the category's default text embeddings and
// S_VL is 0.5 for every image.
class ToyExtractor final : public FeatureExtractor {
 public:
  explicit ToyExtractor(ToyExtractorConfig config = {});

  std::string name() const override { return "toy"; }
  int embed_dim() const override { return config_.embed_dim; }
  const std::vector<StageInfo>& stages() const override { return stages_; }
  const ToyExtractorConfig& config() const noexcept { return config_; }

  std::vector<double> image_token(const ImageSample& image) const override;
  std::vector<Tensor3> patch_tokens(const ImageSample& image) const override;
  TextEmbedding text_embed(const std::vector<std::string>& normal_prompts,
                           const std::vector<std::string>& abnormal_prompts) const override;

  static constexpr int kCellFeatures = 8;

  // grid x grid x kCellFeatures statistics before pooling and projection.
  Tensor3 cell_features(const ImageSample& image) const;

 private:
  std::vector<double> embed_prompt(const std::string& prompt) const;

  ToyExtractorConfig config_;
  std::vector<StageInfo> stages_;
  std::vector<std::vector<double>> weights_;  // per stage, channels x in_dim
  std::vector<std::vector<double>> biases_;
};

// "toy" or "toy:key=value,..." (keys: grid, stages, channels, dim, position,
// gain, seed). Other selectors name pretrained two-tower models, which need
// an external adapter build and throw kBackend.
std::unique_ptr<FeatureExtractor> make_extractor(const std::string& selector, const std::string& cache_dir = {});

}  // namespace cut::vlad
