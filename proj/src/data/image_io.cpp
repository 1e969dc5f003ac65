#include "cut/data/image_io.hpp"

#include <algorithm>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <memory>
#include <string>

#include <jpeglib.h>
#include <png.h>

#include "cut/core/error.hpp"

namespace cut::data {

namespace fs = std::filesystem;

namespace {

std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e;
}

std::vector<std::uint8_t> read_png_raw(const fs::path& path, std::uint32_t format, int& w, int& h) {
  if (!fs::exists(path)) throw Error(ErrorCode::kNotFound, "missing image file: " + path.string());
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw Error(ErrorCode::kIo, "cannot read PNG " + path.string() + ": " + img.message);
  }
  img.format = format;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw Error(ErrorCode::kIo, "cannot decode PNG " + path.string() + ": " + img.message);
  }
  w = static_cast<int>(img.width);
  h = static_cast<int>(img.height);
  return buf;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

void jpeg_fail(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

std::vector<std::uint8_t> read_jpeg_raw(const fs::path& path, bool gray, int& w, int& h) {
  if (!fs::exists(path)) throw Error(ErrorCode::kNotFound, "missing image file: " + path.string());
  std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!file) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  jpeg_decompress_struct cinfo;
  JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_fail;
  std::vector<std::uint8_t> buf;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw Error(ErrorCode::kIo, "cannot decode JPEG " + path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = gray ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  w = static_cast<int>(cinfo.output_width);
  h = static_cast<int>(cinfo.output_height);
  const int ch = cinfo.output_components;
  buf.resize(static_cast<std::size_t>(w) * h * ch);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = buf.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * ch;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return buf;
}

bool is_jpeg(const fs::path& p) {
  const auto e = lower_ext(p);
  return e == ".jpg" || e == ".jpeg";
}

}  // namespace

Tensor3 read_image(const fs::path& path) {
  int w = 0, h = 0;
  const auto buf = is_jpeg(path) ? read_jpeg_raw(path, false, w, h) : read_png_raw(path, PNG_FORMAT_RGB, w, h);
  Tensor3 out(h, w, 3);
  for (std::size_t i = 0; i < buf.size(); ++i) out[i] = buf[i] / 255.0;
  return out;
}

Map2D read_gray(const fs::path& path) {
  int w = 0, h = 0;
  const auto buf = is_jpeg(path) ? read_jpeg_raw(path, true, w, h) : read_png_raw(path, PNG_FORMAT_GRAY, w, h);
  Map2D out(h, w);
  auto v = out.values();
  for (std::size_t i = 0; i < buf.size(); ++i) v[i] = buf[i] / 255.0;
  return out;
}

void write_png_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes, int width, int height,
                     int channels) {
  if (channels != 1 && channels != 3) throw Error(ErrorCode::kInvalidArgument, "PNG writer supports 1 or 3 channels");
  if (bytes.size() != static_cast<std::size_t>(width) * height * channels) {
    throw Error(ErrorCode::kShapeMismatch, "PNG buffer size does not match its dimensions");
  }
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw Error(ErrorCode::kIo, "cannot create " + path.parent_path().string() + ": " + ec.message());
  }
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(width);
  img.height = static_cast<png_uint_32>(height);
  img.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw Error(ErrorCode::kIo, "cannot write PNG " + path.string() + ": " + img.message);
  }
}

void write_png_rgb(const fs::path& path, const Tensor3& image) {
  if (image.dim2() != 3) throw Error(ErrorCode::kShapeMismatch, "RGB image must have 3 channels");
  std::vector<std::uint8_t> bytes(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) bytes[i] = to_byte(image[i]);
  write_png_bytes(path, bytes, image.dim1(), image.dim0(), 3);
}

void write_png_gray(const fs::path& path, const Map2D& values) {
  std::vector<std::uint8_t> bytes(values.size());
  const auto v = values.values();
  for (std::size_t i = 0; i < v.size(); ++i) bytes[i] = to_byte(v[i]);
  write_png_bytes(path, bytes, values.cols(), values.rows(), 1);
}

}  // namespace cut::data
