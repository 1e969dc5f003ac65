#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "cut/core/types.hpp"
#include "support.hpp"

using namespace cut;
using cut::test::error_code;

namespace {

ImageSample flat_image(int side, double value) {
  return ImageSample{Tensor3(side, side, 3, value), "x", std::nullopt};
}

}  // namespace

TEST_CASE("validate_sample accepts an in-range image unchanged") {
  const auto img = flat_image(256, 0.5);
  const auto& out = validate_sample(img);
  CHECK(&out == &img);
  CHECK(out.pixels == img.pixels);
}

TEST_CASE("validate_sample rejects NaN, out-of-range and undersized images") {
  auto img = flat_image(64, 0.5);
  img.pixels(3, 4, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK(error_code([&] { validate_sample(img); }) == ErrorCode::kNonFinite);

  auto hot = flat_image(64, 0.5);
  hot.pixels(0, 0, 0) = 1.5;
  CHECK(error_code([&] { validate_sample(hot); }) == ErrorCode::kRange);

  CHECK(error_code([&] { validate_sample(flat_image(32, 0.5)); }) == ErrorCode::kUndersized);
  CHECK_FALSE(error_code([&] { validate_sample(flat_image(64, 0.0)); }));
}

TEST_CASE("validate_annotated enforces label and map consistency") {
  AnnotatedSample s;
  s.image = flat_image(64, 0.2);
  s.y_img = 0;
  s.y_pix = Map2D(64, 64, 0.0);
  CHECK_FALSE(error_code([&] { validate_annotated(s); }));

  s.y_pix(10, 10) = 0.3;
  CHECK(error_code([&] { validate_annotated(s); }) == ErrorCode::kPrecondition);

  s.y_img = 1;
  CHECK_FALSE(error_code([&] { validate_annotated(s); }));
  s.y_pix(0, 0) = 1.2;
  CHECK(error_code([&] { validate_annotated(s); }) == ErrorCode::kRange);
  s.y_pix = Map2D(32, 64, 0.0);
  CHECK(error_code([&] { validate_annotated(s); }) == ErrorCode::kShapeMismatch);
}

TEST_CASE("resample_mask fixed cases") {
  const BinaryMask ones(64, 64, 1);
  CHECK(resample_mask(ones, 16) == BinaryMask(16, 16, 1));

  std::mt19937_64 rng(3);
  const auto m16 = cut::test::random_mask(rng, 16, 16);
  CHECK(resample_mask(m16, 16) == m16);

  BinaryMask checker(4, 4);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) checker(r, c) = (r + c) % 2;
  const auto out = resample_mask(checker, 2);
  REQUIRE(out.rows() == 2);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) {
      // nearest source index of the output pixel centre
      const int sr = static_cast<int>((r + 0.5) * 4 / 2);
      const int sc = static_cast<int>((c + 0.5) * 4 / 2);
      CHECK(out(r, c) == checker(sr, sc));
    }
}

TEST_CASE("resample_mask nearest-index oracle on random shapes") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> side(1, 40);
  for (int trial = 0; trial < 200; ++trial) {
    const auto m = cut::test::random_mask(rng, side(rng), side(rng), 0.4);
    const int orows = side(rng), ocols = side(rng);
    const auto out = resample_mask(m, orows, ocols);
    REQUIRE(out.rows() == orows);
    REQUIRE(out.cols() == ocols);
    for (int r = 0; r < orows; ++r)
      for (int c = 0; c < ocols; ++c) {
        const int sr = static_cast<int>(std::floor((r + 0.5) * m.rows() / orows));
        const int sc = static_cast<int>(std::floor((c + 0.5) * m.cols() / ocols));
        REQUIRE(out(r, c) == m(sr, sc));
      }
  }
}

TEST_CASE("resample_mask integer upscale round-trips") {
  std::mt19937_64 rng(5);
  for (int s = 1; s <= 16; ++s)
    for (int k = 1; k <= 5; ++k) {
      const auto m = cut::test::random_mask(rng, s, s, 0.3);
      CHECK(resample_mask(resample_mask(m, k * s), s) == m);
    }
}

TEST_CASE("resample_mask rejects empty input and bad targets") {
  CHECK(error_code([] { resample_mask(BinaryMask(), 4); }) == ErrorCode::kPrecondition);
  CHECK(error_code([] { resample_mask(BinaryMask(4, 4, 1), 0); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("resize_bilinear matches a per-pixel oracle") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> side(1, 24);
  for (int trial = 0; trial < 100; ++trial) {
    const auto src = cut::test::random_map(rng, side(rng), side(rng));
    const int orows = side(rng), ocols = side(rng);
    const auto out = resize_bilinear(src, orows, ocols);
    for (int r = 0; r < orows; ++r)
      for (int c = 0; c < ocols; ++c) REQUIRE(out(r, c) == doctest::Approx(cut::test::bilinear_at(src, orows, ocols, r, c)).epsilon(1e-12));
  }
}

TEST_CASE("resize_bilinear_adjoint is the transpose of resize_bilinear") {
  std::mt19937_64 rng(19);
  std::uniform_int_distribution<int> side(1, 20);
  for (int trial = 0; trial < 100; ++trial) {
    const int sr = side(rng), sc = side(rng), orows = side(rng), ocols = side(rng);
    const auto x = cut::test::random_map(rng, sr, sc, -1, 1);
    const auto y = cut::test::random_map(rng, orows, ocols, -1, 1);
    const auto ax = resize_bilinear(x, orows, ocols);
    const auto aty = resize_bilinear_adjoint(y, sr, sc);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < ax.size(); ++i) lhs += ax.values()[i] * y.values()[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x.values()[i] * aty.values()[i];
    REQUIRE(lhs == doctest::Approx(rhs).epsilon(1e-10));
  }
}

TEST_CASE("to_grayscale uses BT.601 weights") {
  Tensor3 px(1, 1, 3);
  px(0, 0, 0) = 0.2;
  px(0, 0, 1) = 0.6;
  px(0, 0, 2) = 0.9;
  CHECK(to_grayscale(px)(0, 0) == doctest::Approx(0.299 * 0.2 + 0.587 * 0.6 + 0.114 * 0.9).epsilon(1e-12));
}

TEST_CASE("error codes split validation from runtime failures") {
  CHECK(Error(ErrorCode::kRange, "x").is_validation());
  CHECK(Error(ErrorCode::kNotFound, "x").is_validation());
  CHECK_FALSE(Error(ErrorCode::kIo, "x").is_validation());
  CHECK_FALSE(Error(ErrorCode::kBackend, "x").is_validation());
  CHECK_FALSE(Error(ErrorCode::kDiverged, "x").is_validation());
}
