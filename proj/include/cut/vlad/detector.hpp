#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cut/core/types.hpp"
#include "cut/vlad/extractor.hpp"

namespace cut::vlad {

// Linear map C_i -> C for one stage. weight is row-major C x C_i.
struct AdapterStage {
  std::string id;
  int in_dim = 0;
  int out_dim = 0;
  std::vector<double> weight;
  std::vector<double> bias;

  bool operator==(const AdapterStage&) const = default;
};

struct FeatureAdapter {
  int dim = 0;
  std::vector<AdapterStage> stages;

  bool operator==(const FeatureAdapter&) const = default;
};

// Weights ~ N(0, 1 / C_i), zero bias.
FeatureAdapter init_adapter(const std::vector<StageInfo>& stages, int dim, std::uint64_t seed);

// Checks stage ids and dimensions against the extractor.
void check_compatible(const FeatureAdapter& adapter, const FeatureExtractor& extractor);

// W x + b for every patch, no normalisation.
Tensor3 adapt_raw(const AdapterStage& stage, const Tensor3& tokens);

// Scales every C-vector along the last axis to unit norm; zero vectors stay
// zero.
Tensor3 normalize_rows(const Tensor3& tokens);

// Adapted and L2-normalised tokens for every stage.
std::vector<Tensor3> adapt(const FeatureAdapter& adapter, const std::vector<Tensor3>& patches);

struct BankStage {
  std::string id;
  int dim = 0;
  std::vector<double> rows;  // count x dim, unit rows

  std::size_t count() const noexcept { return dim == 0 ? 0 : rows.size() / dim; }
  bool operator==(const BankStage&) const = default;
};

struct MemoryBank {
  std::vector<BankStage> stages;

  bool empty() const noexcept;
  bool operator==(const MemoryBank&) const = default;
};

// Appends every patch of the adapted stages as a bank row.
void append_to_bank(MemoryBank& bank, const std::vector<Tensor3>& adapted, const std::vector<std::string>& ids);

struct DetectorConfig {
  double logit_scale = 100.0;
  bool rescale_vl = true;  // M_VL divided by the number of stages
  int input_side = 512;    // images are resized to this square before extraction; 0 keeps the size
};

void validate(const DetectorConfig& config);

// softmax(scale * [f . t_n, f . t_a]) abnormal entry.
double vl_image_score(std::span<const double> f_img, const TextEmbedding& text, double scale = 1.0);

// Per-patch abnormal probability for one stage (H_i x W_i).
Map2D vl_patch_probabilities(const Tensor3& adapted, const TextEmbedding& text, double scale);

// Sum over stages of the upsampled abnormal probability; values in [0, |H|].
Map2D vl_pixel_map(const std::vector<Tensor3>& adapted, const TextEmbedding& text, int rows, int cols,
                   double scale);

// 1 - max cosine similarity to the bank rows of the same stage (H_i x W_i).
Map2D vv_patch_scores(const Tensor3& adapted, const BankStage& bank);

// Sum over stages of the upsampled vv_patch_scores.
Map2D vv_pixel_map(const std::vector<Tensor3>& adapted, const MemoryBank& bank, int rows, int cols);

struct DetectionResult {
  double s_img = 0.0;
  Map2D m_pix;
  double s_vl = 0.0;
  double s_vv = 0.0;
  Map2D m_vl;  // after the optional 1 / |H| rescale
  Map2D m_vv;  // all zeros without a bank
};

ImageSample prepare_input(const ImageSample& image, int input_side);

// s_img = S_VL + max(M_VV), m_pix = M_VL + M_VV. bank may be null or empty.
DetectionResult detect(const ImageSample& image, const FeatureExtractor& extractor, const FeatureAdapter& adapter,
                       const MemoryBank* bank, const TextEmbedding& text, const DetectorConfig& config = {});

// Checkpoint container: 8-byte magic, little-endian u64 header length, JSON
// header, then little-endian doubles.
void save_adapter(const FeatureAdapter& adapter, const std::string& path);
FeatureAdapter load_adapter(const std::string& path);
void save_bank(const MemoryBank& bank, const std::string& path);
MemoryBank load_bank(const std::string& path);

}  // namespace cut::vlad
