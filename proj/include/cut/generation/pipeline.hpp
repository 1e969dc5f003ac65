#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cut/attention/engine.hpp"
#include "cut/core/types.hpp"
#include "cut/diffusion/backbone.hpp"

namespace cut::generation {

inline constexpr const char* kDefaultPromptTemplate = "A photo of a [cls] that is damaged";
inline constexpr const char* kDefaultAnomalyWord = "damaged";

struct GenerationConfig {
  double gamma = 0.25;
  int T = 200;
  std::string prompt_template = kDefaultPromptTemplate;
  std::string anomaly_word = kDefaultAnomalyWord;
  std::uint64_t seed = 0;

  // Localisation-aware scheduler; delta_t defaults to 1 / T.
  double lambda = 10.0;
  std::optional<double> delta_t;
  int min_pixels = 10;
  int max_pixels_for_stop = 50;
  int warmup_steps = 10;

  attention::RefinementThresholds thresholds{};
  attention::AggregationConfig aggregation{};
  bool optimize = true;
};

void validate(const GenerationConfig& config);

// round(T * (1 - gamma))
int start_timestep(double gamma, int T);

// Otsu threshold on luma, polarity chosen so the border majority is
// background, then a 3x3 closing. Falls back to all-foreground when any
// rendering would be empty.
ForegroundMask foreground_mask(const ImageSample& image, int latent_side);

// Otsu threshold over 256 luma bins: pixels with round(255 * luma) > result
// are one class. Returns -1 when the histogram has a single occupied bin.
int otsu_threshold(const Map2D& gray);

LatentState conditioning_start(const ImageSample& image, const GenerationConfig& config,
                               const diffusion::Backbone& backbone);

// Coarse pixel annotation: foreground-masked anomaly map, min-max normalised
// over the foreground (all zeros when min == max), bilinearly upsampled and
// zeroed outside the full-resolution mask.
Map2D extract_annotation(const attention::AggregatedAttention& abar_final, std::span<const int> j_set,
                         const ForegroundMask& mask, int rows, int cols);

struct StepRecord {
  int t = 0;
  int n_t = 0;
  double alpha = 0.0;
  int iterations = 0;
  double max_attention = 0.0;  // in-mask max of the anomaly map before optimising
  bool optimized = false;
};

struct GenerationResult {
  AnnotatedSample sample;
  ForegroundMask mask;
  attention::AggregatedAttention final_attention;
  double final_in_mask_max = 0.0;
  int n_start = 0;
  int t_start = 0;
  std::vector<StepRecord> trace;
};

GenerationResult generate(const ImageSample& image, const GenerationConfig& config,
                          diffusion::Backbone& backbone);

struct GenerationFailure {
  std::size_t index = 0;
  std::string message;
};

struct BatchResult {
  // Anomalous samples in index order, followed by one y_img = 0 sample per
  // conditioning normal.
  std::vector<AnnotatedSample> samples;
  std::vector<GenerationFailure> failures;
};

// per_image generations for every normal; sample i (counting across all
// normals) uses seed config.seed + i. Individual failures are recorded and
// skipped; the call throws only when every generation fails.
BatchResult batch_generate(std::span<const ImageSample> normals, int per_image,
                           const GenerationConfig& config, const diffusion::BackboneFactory& factory,
                           int workers = 1);

}  // namespace cut::generation
