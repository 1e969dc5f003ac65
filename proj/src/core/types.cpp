#include "cut/core/types.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cut/core/error.hpp"

namespace cut {

const ImageSample& validate_sample(const ImageSample& sample) {
  const Tensor3& px = sample.pixels;
  if (px.dim2() != 3) {
    throw Error(ErrorCode::kShapeMismatch, "image must have 3 channels, got " +
                                               std::to_string(px.dim2()));
  }
  if (px.dim0() < kMinImageSide || px.dim1() < kMinImageSide) {
    std::ostringstream msg;
    msg << "image is " << px.dim0() << "x" << px.dim1() << ", minimum side is " << kMinImageSide;
    throw Error(ErrorCode::kUndersized, msg.str());
  }
  for (std::size_t i = 0; i < px.size(); ++i) {
    const double v = px[i];
    if (!std::isfinite(v)) {
      throw Error(ErrorCode::kNonFinite, "image contains a non-finite value at flat index " +
                                             std::to_string(i));
    }
    if (v < 0.0 || v > 1.0) {
      throw Error(ErrorCode::kRange, "image value " + std::to_string(v) +
                                         " outside [0, 1] at flat index " + std::to_string(i));
    }
  }
  return sample;
}

void validate_annotated(const AnnotatedSample& sample) {
  validate_sample(sample.image);
  if (sample.y_img != 0 && sample.y_img != 1) {
    throw Error(ErrorCode::kRange, "y_img must be 0 or 1");
  }
  if (sample.y_pix.rows() != sample.image.height() || sample.y_pix.cols() != sample.image.width()) {
    throw Error(ErrorCode::kShapeMismatch, "y_pix shape does not match the image");
  }
  for (double v : sample.y_pix.values()) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
      throw Error(ErrorCode::kRange, "y_pix value outside [0, 1]");
    }
    if (sample.y_img == 0 && v != 0.0) {
      throw Error(ErrorCode::kPrecondition, "normal sample carries a nonzero pixel annotation");
    }
  }
  if (sample.gamma < 0.0 || sample.gamma > 1.0) {
    throw Error(ErrorCode::kRange, "gamma outside [0, 1]");
  }
}

BinaryMask resample_mask(const BinaryMask& mask, int out_rows, int out_cols) {
  if (out_rows <= 0 || out_cols <= 0) {
    throw Error(ErrorCode::kInvalidArgument, "resample target must be positive");
  }
  if (mask.empty()) {
    throw Error(ErrorCode::kPrecondition, "cannot resample an empty mask");
  }
  BinaryMask out(out_rows, out_cols);
  for (int r = 0; r < out_rows; ++r) {
    const int sr = std::min(mask.rows() - 1, static_cast<int>(std::floor(
                                                 (r + 0.5) * mask.rows() / out_rows)));
    for (int c = 0; c < out_cols; ++c) {
      const int sc = std::min(mask.cols() - 1, static_cast<int>(std::floor(
                                                   (c + 0.5) * mask.cols() / out_cols)));
      out(r, c) = mask(sr, sc) ? 1 : 0;
    }
  }
  return out;
}

BinaryMask resample_mask(const BinaryMask& mask, int side) {
  return resample_mask(mask, side, side);
}

std::size_t count_foreground(const BinaryMask& mask) {
  return static_cast<std::size_t>(
      std::count_if(mask.values().begin(), mask.values().end(), [](auto v) { return v != 0; }));
}

namespace {

struct Tap {
  int lo;
  int hi;
  double w_hi;
};

Tap bilinear_tap(int dst, int src_len, int dst_len) {
  const double scale = static_cast<double>(src_len) / dst_len;
  double x = (dst + 0.5) * scale - 0.5;
  x = std::max(x, 0.0);
  int lo = static_cast<int>(std::floor(x));
  lo = std::min(lo, src_len - 1);
  const int hi = std::min(lo + 1, src_len - 1);
  return {lo, hi, x - lo};
}

}  // namespace

Map2D resize_bilinear(const Map2D& map, int out_rows, int out_cols) {
  if (out_rows <= 0 || out_cols <= 0 || map.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "resize_bilinear needs a nonempty source and target");
  }
  Map2D out(out_rows, out_cols);
  std::vector<Tap> col_taps(out_cols);
  for (int c = 0; c < out_cols; ++c) col_taps[c] = bilinear_tap(c, map.cols(), out_cols);
  for (int r = 0; r < out_rows; ++r) {
    const Tap tr = bilinear_tap(r, map.rows(), out_rows);
    for (int c = 0; c < out_cols; ++c) {
      const Tap& tc = col_taps[c];
      const double top = map(tr.lo, tc.lo) * (1.0 - tc.w_hi) + map(tr.lo, tc.hi) * tc.w_hi;
      const double bot = map(tr.hi, tc.lo) * (1.0 - tc.w_hi) + map(tr.hi, tc.hi) * tc.w_hi;
      out(r, c) = top * (1.0 - tr.w_hi) + bot * tr.w_hi;
    }
  }
  return out;
}

Map2D resize_bilinear_adjoint(const Map2D& grad, int src_rows, int src_cols) {
  Map2D out(src_rows, src_cols);
  std::vector<Tap> col_taps(grad.cols());
  for (int c = 0; c < grad.cols(); ++c) col_taps[c] = bilinear_tap(c, src_cols, grad.cols());
  for (int r = 0; r < grad.rows(); ++r) {
    const Tap tr = bilinear_tap(r, src_rows, grad.rows());
    for (int c = 0; c < grad.cols(); ++c) {
      const Tap& tc = col_taps[c];
      const double g = grad(r, c);
      out(tr.lo, tc.lo) += g * (1.0 - tr.w_hi) * (1.0 - tc.w_hi);
      out(tr.lo, tc.hi) += g * (1.0 - tr.w_hi) * tc.w_hi;
      out(tr.hi, tc.lo) += g * tr.w_hi * (1.0 - tc.w_hi);
      out(tr.hi, tc.hi) += g * tr.w_hi * tc.w_hi;
    }
  }
  return out;
}

Tensor3 resize_image(const Tensor3& image, int out_rows, int out_cols) {
  Tensor3 out(out_rows, out_cols, image.dim2());
  for (int ch = 0; ch < image.dim2(); ++ch) {
    Map2D plane(image.dim0(), image.dim1());
    for (int r = 0; r < image.dim0(); ++r)
      for (int c = 0; c < image.dim1(); ++c) plane(r, c) = image(r, c, ch);
    const Map2D resized = resize_bilinear(plane, out_rows, out_cols);
    for (int r = 0; r < out_rows; ++r)
      for (int c = 0; c < out_cols; ++c) out(r, c, ch) = resized(r, c);
  }
  return out;
}

Map2D to_grayscale(const Tensor3& image) {
  Map2D gray(image.dim0(), image.dim1());
  for (int r = 0; r < image.dim0(); ++r)
    for (int c = 0; c < image.dim1(); ++c)
      gray(r, c) = 0.299 * image(r, c, 0) + 0.587 * image(r, c, 1) + 0.114 * image(r, c, 2);
  return gray;
}

}  // namespace cut
