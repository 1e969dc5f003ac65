#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cut/core/types.hpp"
#include "cut/losses/losses.hpp"
#include "cut/metrics/metrics.hpp"
#include "cut/vlad/detector.hpp"

namespace cut::trainer {

struct TrainConfig {
  int epochs = 200;
  int batch_size = 16;
  double lr = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int input_side = 512;
  double logit_scale = 100.0;
  losses::LossConfig loss{};
  std::uint64_t seed = 0;
};

void validate(const TrainConfig& config);

// Cosine annealing from lr at epoch 0 to 0 at the last epoch.
double cosine_lr(double base_lr, int epoch, int epochs);

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  losses::LossTerms terms;  // means over the epoch's samples
};

std::string to_jsonl(const EpochLog& entry);

// Batches of indices for one epoch. Every batch holds at least one normal
// whenever the dataset has one; normals are reused when there are more
// batches than normals.
std::vector<std::vector<std::size_t>> stratified_batches(std::span<const int> labels, int batch_size,
                                                         std::uint64_t seed, int epoch);

struct TrainOptions {
  // Written after every completed epoch: adapter, Adam moments and the epoch
  // counter. Empty disables it.
  std::string state_path;
  bool resume = false;     // continue from state_path when it exists
  std::string log_path;    // JSONL, rewritten from the state on resume
  int stop_after = -1;     // stop once this many epochs are complete (-1: run all)
};

struct TrainResult {
  vlad::FeatureAdapter adapter;
  std::vector<EpochLog> log;
  int epochs_completed = 0;
};

// Fits the adapter to the generated samples under the focal + omega (BCE +
// adapted Dice) objective. The pixel prediction is the stage-averaged M_VL
// at the annotation resolution and the image prediction is its maximum.
// Throws kPrecondition for a single-class dataset and kDiverged when a loss
// goes non-finite (the state file then still holds the last good epoch).
TrainResult train(std::span<const AnnotatedSample> dataset, const vlad::FeatureExtractor& extractor,
                  const TrainConfig& config, const TrainOptions& options = {});

// Per-sample loss and adapter gradient; exposed for gradient checks.
struct SampleGradient {
  losses::LossTerms terms;
  vlad::FeatureAdapter grad;  // same layout as the adapter
};

SampleGradient sample_gradient(const vlad::FeatureAdapter& adapter, const std::vector<Tensor3>& patches,
                               const vlad::TextEmbedding& text, int y_img, const Map2D& y_pix,
                               const TrainConfig& config);

// Adapted, normalised patch tokens of every normal, stage by stage.
vlad::MemoryBank build_bank(std::span<const ImageSample> normals, const vlad::FeatureExtractor& extractor,
                            const vlad::FeatureAdapter& adapter, int input_side);

struct TestSample {
  ImageSample image;
  int y_img = 0;
  BinaryMask mask;  // H x W ground truth
};

struct Score {
  double image = 0.0;
  Map2D pixels;
};

using Scorer = std::function<Score(const ImageSample&)>;

// Scorer backed by detect().
Scorer detector_scorer(const vlad::FeatureExtractor& extractor, const vlad::FeatureAdapter& adapter,
                       const vlad::MemoryBank* bank, const vlad::DetectorConfig& config);

// Runs the scorer over every sample and computes all five metrics for the
// category. Text embeddings are per category so the scorer is per category.
metrics::CategoryMetrics evaluate(const Scorer& scorer, std::span<const TestSample> samples);

}  // namespace cut::trainer
