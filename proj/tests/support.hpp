#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>

#include "cut/core/error.hpp"
#include "cut/core/types.hpp"
#include "cut/data/dataset.hpp"

namespace cut::test {

inline Map2D random_map(std::mt19937_64& rng, int rows, int cols, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Map2D m(rows, cols);
  for (double& v : m.values()) v = u(rng);
  return m;
}

inline BinaryMask random_mask(std::mt19937_64& rng, int rows, int cols, double p = 0.5) {
  std::bernoulli_distribution b(p);
  BinaryMask m(rows, cols);
  for (auto& v : m.values()) v = b(rng) ? 1 : 0;
  return m;
}

inline Tensor3 random_tensor(std::mt19937_64& rng, int d0, int d1, int d2, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor3 t(d0, d1, d2);
  for (double& v : t.values()) v = u(rng);
  return t;
}

inline ImageSample toy_image(std::uint64_t seed, std::size_t index = 0,
                             data::ToyDefect defect = data::ToyDefect::kNone) {
  const auto r = data::render_toy(seed, 1, index, defect);
  return ImageSample{defect == data::ToyDefect::kNone ? r.clean : r.defective, data::kToyCategory, std::nullopt};
}

// Bilinear with half-pixel centres, written straight from the definition.
inline double bilinear_at(const Map2D& src, int out_rows, int out_cols, int r, int c) {
  const double sy = std::clamp((r + 0.5) * src.rows() / out_rows - 0.5, 0.0, src.rows() - 1.0);
  const double sx = std::clamp((c + 0.5) * src.cols() / out_cols - 0.5, 0.0, src.cols() - 1.0);
  const int y0 = static_cast<int>(std::floor(sy));
  const int x0 = static_cast<int>(std::floor(sx));
  const int y1 = std::min(y0 + 1, src.rows() - 1);
  const int x1 = std::min(x0 + 1, src.cols() - 1);
  const double fy = sy - y0;
  const double fx = sx - x0;
  return (1 - fy) * ((1 - fx) * src(y0, x0) + fx * src(y0, x1)) + fy * ((1 - fx) * src(y1, x0) + fx * src(y1, x1));
}

// Code of the cut::Error thrown by f, or nullopt when f returns normally.
template <typename F>
std::optional<ErrorCode> error_code(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("cut_" + tag + "_" + std::to_string((static_cast<std::uint64_t>(rd()) << 32) | rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& child) const { return path_ / child; }

 private:
  std::filesystem::path path_;
};

}  // namespace cut::test
