#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cut/core/tensor.hpp"

namespace cut {

inline constexpr int kMinImageSide = 64;

// Channel-last RGB image with values in [0, 1].
struct ImageSample {
  Tensor3 pixels;  // H x W x 3
  std::string category;
  std::optional<std::string> path;

  int height() const noexcept { return pixels.dim0(); }
  int width() const noexcept { return pixels.dim1(); }
};

struct LatentState {
  Tensor3 z;  // C x P x P
  int t = 0;
  int T = 0;
};

struct PromptSpec {
  std::string text;
  std::vector<int> tokens;
  // Zero-based positions into `tokens` of the subword tokens that spell the
  // anomaly word.
  std::vector<int> anomaly_token_indices;
  std::string class_name;

  int token_count() const noexcept { return static_cast<int>(tokens.size()); }
};

// Cross-attention probability maps captured during one denoise step.
struct AttentionStack {
  std::vector<Tensor3> maps;  // each P x P x N
  std::vector<std::string> layer_ids;
  int t = 0;
};

// One foreground mask rendered at the three resolutions the pipeline needs.
struct ForegroundMask {
  BinaryMask mask16;
  BinaryMask mask_lat;
  BinaryMask mask_full;
};

struct AnnotatedSample {
  ImageSample image;
  int y_img = 0;
  Map2D y_pix;  // H x W, values in [0, 1]
  PromptSpec prompt;
  std::uint64_t seed = 0;
  double gamma = 0.0;
  std::string source_normal;
};

// Throws cut::Error (kUndersized, kNonFinite or kRange) when an invariant is
// violated; otherwise returns the sample unchanged.
const ImageSample& validate_sample(const ImageSample& sample);

// Checks the AnnotatedSample invariants (label/map consistency, range, shape).
void validate_annotated(const AnnotatedSample& sample);

// Nearest-neighbour resampling. Output pixel (r, c) reads source pixel
// (floor((r + 0.5) * rows / out_rows), floor((c + 0.5) * cols / out_cols)).
BinaryMask resample_mask(const BinaryMask& mask, int out_rows, int out_cols);
BinaryMask resample_mask(const BinaryMask& mask, int side);

std::size_t count_foreground(const BinaryMask& mask);

// Bilinear resize with half-pixel centres and edge clamping
// (align_corners = false).
Map2D resize_bilinear(const Map2D& map, int out_rows, int out_cols);

// Adjoint of resize_bilinear: scatters a gradient on the resized grid back to
// the source grid.
Map2D resize_bilinear_adjoint(const Map2D& grad, int src_rows, int src_cols);

// Bilinear resize of every channel of an H x W x C tensor.
Tensor3 resize_image(const Tensor3& image, int out_rows, int out_cols);

// ITU-R BT.601 luma.
Map2D to_grayscale(const Tensor3& image);

}  // namespace cut
