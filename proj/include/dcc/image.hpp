#pragma once

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcc/util.hpp"

namespace dcc {

// Interleaved float image, values nominally in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, int c, float fill = 0.0f)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  float& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  bool empty() const { return data.empty(); }
  std::string size_str() const { return std::to_string(width) + "x" + std::to_string(height); }
};

inline Image to_grayscale(const Image& img) {
  if (img.channels == 1) return img;
  Image out(img.width, img.height, 1);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      if (img.channels >= 3) {
        out.at(x, y, 0) = 0.299f * img.at(x, y, 0) + 0.587f * img.at(x, y, 1) + 0.114f * img.at(x, y, 2);
      } else {
        out.at(x, y, 0) = img.at(x, y, 0);
      }
    }
  return out;
}

inline Image to_rgb(const Image& img) {
  if (img.channels == 3) return img;
  Image out(img.width, img.height, 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = img.at(x, y, std::min(c, img.channels - 1));
  return out;
}

// Bilinear resampling with half-pixel centres.
inline Image resize_bilinear(const Image& img, int w, int h) {
  if (img.width == w && img.height == h) return img;
  Image out(w, h, img.channels);
  const double sx = static_cast<double>(img.width) / w;
  const double sy = static_cast<double>(img.height) / h;
  for (int y = 0; y < h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < img.channels; ++c) {
        const double top = (1 - wx) * img.at(x0, y0, c) + wx * img.at(x1, y0, c);
        const double bot = (1 - wx) * img.at(x0, y1, c) + wx * img.at(x1, y1, c);
        out.at(x, y, c) = static_cast<float>((1 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

namespace detail {

struct PngReadState {
  const unsigned char* data;
  std::size_t size;
  std::size_t pos;
};

inline void png_read_mem(png_structp png, png_bytep out, png_size_t n) {
  auto* st = static_cast<PngReadState*>(png_get_io_ptr(png));
  if (st->pos + n > st->size) png_error(png, "truncated PNG");
  std::memcpy(out, st->data + st->pos, n);
  st->pos += n;
}

inline void png_write_mem(png_structp png, png_bytep in, png_size_t n) {
  auto* out = static_cast<std::vector<unsigned char>*>(png_get_io_ptr(png));
  out->insert(out->end(), in, in + n);
}

inline void png_flush_noop(png_structp) {}

inline void png_error_throw(png_structp png, png_const_charp msg) {
  auto* buf = static_cast<std::string*>(png_get_error_ptr(png));
  if (buf != nullptr) *buf = msg;
  png_longjmp(png, 1);
}

inline void png_warning_ignore(png_structp, png_const_charp) {}

}  // namespace detail

inline bool is_png(std::span<const unsigned char> bytes) {
  return bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0;
}

inline bool is_jpeg(std::span<const unsigned char> bytes) {
  return bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF;
}

inline Image decode_png(std::span<const unsigned char> bytes) {
  if (!is_png(bytes)) throw FormatError("not a PNG stream");
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_throw,
                                           detail::png_warning_ignore);
  png_infop info = png_create_info_struct(png);
  detail::PngReadState st{bytes.data(), bytes.size(), 0};
  std::vector<png_bytep> rows;
  std::vector<unsigned char> pixels;
  Image img;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("PNG decode failed: " + err);
  }
  png_set_read_fn(png, &st, detail::png_read_mem);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  png_set_expand(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int c = png_get_channels(png, info);
  pixels.resize(static_cast<std::size_t>(w) * h * c);
  rows.resize(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) rows[y] = pixels.data() + static_cast<std::size_t>(y) * w * c;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  img = Image(w, h, c);
  for (std::size_t i = 0; i < pixels.size(); ++i) img.data[i] = pixels[i] / 255.0f;
  return img;
}

inline std::vector<unsigned char> encode_png(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("encode_png: 1 or 3 channels only");
  std::vector<unsigned char> pixels(img.data.size());
  for (std::size_t i = 0; i < pixels.size(); ++i)
    pixels[i] = static_cast<unsigned char>(std::lround(std::clamp(img.data[i], 0.0f, 1.0f) * 255.0f));
  std::vector<unsigned char> out;
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_throw,
                                            detail::png_warning_ignore);
  png_infop info = png_create_info_struct(png);
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("PNG encode failed: " + err);
  }
  png_set_write_fn(png, &out, detail::png_write_mem, detail::png_flush_noop);
  png_set_IHDR(png, info, img.width, img.height, 8, img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y)
    rows[y] = pixels.data() + static_cast<std::size_t>(y) * img.width * img.channels;
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

namespace detail {
struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* e = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, e->message);
  std::longjmp(e->jump, 1);
}
}  // namespace detail

inline Image decode_jpeg(std::span<const unsigned char> bytes) {
  jpeg_decompress_struct cinfo{};
  detail::JpegError jerr{};
  cinfo.err = jpeg_std_error(&jerr.mgr);
  jerr.mgr.error_exit = detail::jpeg_error_exit;
  std::vector<unsigned char> pixels;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw FormatError(std::string("JPEG decode failed: ") + jerr.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const int w = static_cast<int>(cinfo.output_width);
  const int h = static_cast<int>(cinfo.output_height);
  const int c = cinfo.output_components;
  pixels.resize(static_cast<std::size_t>(w) * h * c);
  while (cinfo.output_scanline < cinfo.output_height) {
    unsigned char* row = pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * c;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  Image img(w, h, c);
  for (std::size_t i = 0; i < pixels.size(); ++i) img.data[i] = pixels[i] / 255.0f;
  return img;
}

inline Image decode_image(std::span<const unsigned char> bytes) {
  if (is_png(bytes)) return decode_png(bytes);
  if (is_jpeg(bytes)) return decode_jpeg(bytes);
  throw FormatError("unrecognised image format (expected PNG or JPEG)");
}

inline Image read_image(const std::filesystem::path& p) {
  const auto bytes = read_file(p);
  try {
    return decode_image(bytes);
  } catch (const FormatError& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

inline void write_png(const std::filesystem::path& p, const Image& img) { write_file_atomic(p, encode_png(img)); }

// Sketch contract: single channel, strokes = 1 on a 0 background.
inline Image normalise_sketch(const Image& img) {
  Image g = to_grayscale(img);
  for (auto& v : g.data) v = v >= 0.5f ? 1.0f : 0.0f;
  return g;
}

}  // namespace dcc
