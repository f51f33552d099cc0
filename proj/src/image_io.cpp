#include "patchflow/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "patchflow/util.hpp"

namespace patchflow {

namespace {

std::vector<unsigned char> quantize(const Image& im) {
  std::vector<unsigned char> bytes(3 * im.plane());
  std::size_t o = 0;
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(im.at(c, y, x), 0.0, 1.0);
        bytes[o++] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
  return bytes;
}

Image dequantize(const std::vector<unsigned char>& bytes, int h, int w) {
  Image im = Image::zeros(h, w);
  std::size_t o = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) im.at(c, y, x) = bytes[o++] / 255.0;
  return im;
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_png(const std::filesystem::path& path, const Image& im) {
  FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw IoError("cannot open for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png writer allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png info allocation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png write failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(im.width),
               static_cast<png_uint_32>(im.height), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<unsigned char> bytes = quantize(im);
  for (int y = 0; y < im.height; ++y)
    png_write_row(png, bytes.data() + static_cast<std::size_t>(y) * im.width * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw IoError("cannot open for reading: " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8))
    throw IoError("not a PNG file: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png reader allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("png info allocation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png read failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  // normalize any input layout to 8-bit RGB
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  if (png_get_rowbytes(png, info) != static_cast<std::size_t>(w) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unsupported PNG layout in " + path.string());
  }
  std::vector<unsigned char> bytes(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    png_read_row(png, bytes.data() + static_cast<std::size_t>(y) * w * 3, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return dequantize(bytes, h, w);
}

void write_ppm(const std::filesystem::path& path, const Image& im) {
  std::string buf = "P6\n" + std::to_string(im.width) + " " + std::to_string(im.height) + "\n255\n";
  std::vector<unsigned char> bytes = quantize(im);
  buf.append(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  write_text_file(path, buf);
}

Image read_ppm(const std::filesystem::path& path) {
  const std::string buf = read_text_file(path);
  std::size_t pos = 0;
  auto next_token = [&]() -> std::string {
    while (pos < buf.size()) {
      if (std::isspace(static_cast<unsigned char>(buf[pos]))) {
        ++pos;
      } else if (buf[pos] == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
    std::size_t start = pos;
    while (pos < buf.size() && !std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
    return buf.substr(start, pos - start);
  };
  if (next_token() != "P6") throw IoError("not a binary PPM (P6): " + path.string());
  const int w = std::stoi(next_token());
  const int h = std::stoi(next_token());
  const int maxval = std::stoi(next_token());
  if (w <= 0 || h <= 0 || maxval != 255)
    throw IoError("unsupported PPM header in " + path.string());
  ++pos;  // single whitespace after maxval
  const std::size_t need = static_cast<std::size_t>(h) * w * 3;
  if (buf.size() - pos < need)
    throw IoError("truncated PPM payload in " + path.string());
  std::vector<unsigned char> bytes(buf.begin() + pos, buf.begin() + pos + need);
  return dequantize(bytes, h, w);
}

}  // namespace

void write_image(const std::filesystem::path& path, const Image& image) {
  const std::string ext = path.extension().string();
  if (ext == ".png")
    write_png(path, image);
  else if (ext == ".ppm")
    write_ppm(path, image);
  else
    throw IoError("unsupported image format '" + ext + "' (use .png or .ppm): " + path.string());
}

Image read_image(const std::filesystem::path& path) {
  const std::string ext = path.extension().string();
  if (ext == ".png") return read_png(path);
  if (ext == ".ppm") return read_ppm(path);
  throw IoError("unsupported image format '" + ext + "' (use .png or .ppm): " + path.string());
}

}  // namespace patchflow
