#pragma once

// Gray/RGB rasters in [0,1], PNG and binary PGM decoding, deterministic PNG
// encoding, and bilinear resampling.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cctype>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "beamsight/error.hpp"

namespace beamsight {

/// Interleaved HWC raster, values in [0,1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c = 1, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c = 0) const { return pixels[(y * width + x) * channels + c]; }
  std::size_t size() const { return pixels.size(); }

  friend bool operator==(const Image&, const Image&) = default;
};

inline constexpr float kLumaR = 0.299f, kLumaG = 0.587f, kLumaB = 0.114f;

inline Image to_gray(const Image& img) {
  if (img.channels == 1) return img;
  if (img.channels != 3) fail(ErrorKind::UnsupportedFormat, "expected 1 or 3 channels");
  Image out(img.height, img.width, 1);
  for (std::size_t i = 0; i < img.height * img.width; ++i) {
    const float* p = &img.pixels[i * 3];
    out.pixels[i] = kLumaR * p[0] + kLumaG * p[1] + kLumaB * p[2];
  }
  return out;
}

namespace detail {

struct PngReadResult {
  png_uint_32 width = 0, height = 0;
  int bit_depth = 0, channels = 0;
  std::vector<unsigned char> data;  // rows, big-endian for 16-bit
  std::vector<unsigned char*> rows;
  char message[256] = {};
};

inline void png_error_fn(png_structp png, png_const_charp msg) {
  auto* res = static_cast<PngReadResult*>(png_get_error_ptr(png));
  std::snprintf(res->message, sizeof(res->message), "%s", msg);
  png_longjmp(png, 1);
}

inline void png_warning_fn(png_structp, png_const_charp) {}

struct PngSource {
  const std::vector<std::uint8_t>* bytes;
  std::size_t pos;
};

inline void png_read_fn(png_structp png, png_bytep out, png_size_t n) {
  auto* src = static_cast<PngSource*>(png_get_io_ptr(png));
  if (src->pos + n > src->bytes->size()) png_error(png, "unexpected end of file");
  std::memcpy(out, src->bytes->data() + src->pos, n);
  src->pos += n;
}

// Kept free of objects with destructors between setjmp and the longjmp target.
inline bool decode_png_raw(const std::vector<std::uint8_t>& bytes, PngReadResult& res) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &res, png_error_fn, png_warning_fn);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return false;
  }
  PngSource src{&bytes, 0};
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_set_read_fn(png, &src, png_read_fn);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_set_interlace_handling(png);
  png_read_update_info(png, info);
  res.width = png_get_image_width(png, info);
  res.height = png_get_image_height(png, info);
  res.bit_depth = png_get_bit_depth(png, info);
  res.channels = png_get_channels(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  res.data.resize(rowbytes * res.height);
  res.rows.resize(res.height);
  for (png_uint_32 y = 0; y < res.height; ++y) res.rows[y] = res.data.data() + y * rowbytes;
  png_read_image(png, res.rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

inline Image decode_png(const std::vector<std::uint8_t>& bytes) {
  PngReadResult res;
  if (!decode_png_raw(bytes, res)) fail(ErrorKind::DecodeError, std::string("PNG decode failed: ") + res.message);
  if (res.channels != 1 && res.channels != 3) fail(ErrorKind::UnsupportedFormat, "unsupported PNG channel layout");
  Image img(res.height, res.width, static_cast<std::size_t>(res.channels));
  const std::size_t n = img.pixels.size();
  if (res.bit_depth == 16) {
    for (std::size_t i = 0; i < n; ++i)
      img.pixels[i] = static_cast<float>((res.data[2 * i] << 8) | res.data[2 * i + 1]) / 65535.0f;
  } else {
    for (std::size_t i = 0; i < n; ++i) img.pixels[i] = static_cast<float>(res.data[i]) / 255.0f;
  }
  return img;
}

inline Image decode_pgm(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 2;
  auto next_int = [&]() -> long {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    long v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      any = true;
      if (v > 1 << 24) fail(ErrorKind::DecodeError, "PGM header value too large");
    }
    if (!any) fail(ErrorKind::DecodeError, "malformed PGM header");
    return v;
  };
  const long w = next_int(), h = next_int(), maxval = next_int();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) fail(ErrorKind::DecodeError, "invalid PGM header values");
  ++pos;  // single whitespace before the raster
  const std::size_t bpp = maxval > 255 ? 2 : 1;
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (bytes.size() < pos + n * bpp) fail(ErrorKind::DecodeError, "truncated PGM raster");
  Image img(static_cast<std::size_t>(h), static_cast<std::size_t>(w), 1);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned v = bpp == 2 ? (bytes[pos + 2 * i] << 8) | bytes[pos + 2 * i + 1] : bytes[pos + i];
    img.pixels[i] = std::min(1.0f, static_cast<float>(v) / static_cast<float>(maxval));
  }
  return img;
}

inline void png_write_fn(png_structp png, png_bytep data, png_size_t n) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + n);
}

inline void png_flush_fn(png_structp) {}

inline bool encode_png_raw(const std::vector<unsigned char>& raster, png_uint_32 w, png_uint_32 h, int color,
                           std::size_t channels, std::vector<std::uint8_t>& out, PngReadResult& err) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_set_write_fn(png, &out, png_write_fn, png_flush_fn);
  png_set_compression_level(png, 6);
  png_set_filter(png, 0, PNG_FILTER_NONE);
  png_set_IHDR(png, info, w, h, 8, color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (png_uint_32 y = 0; y < h; ++y)
    png_write_row(png, const_cast<png_bytep>(raster.data() + static_cast<std::size_t>(y) * w * channels));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

}  // namespace detail

inline std::uint8_t quantize8(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

/// 8-bit PNG, no timestamps or text chunks, fixed zlib settings.
inline std::vector<std::uint8_t> encode_png(const Image& img) {
  if (img.channels != 1 && img.channels != 3) fail(ErrorKind::UnsupportedFormat, "PNG output needs 1 or 3 channels");
  std::vector<unsigned char> raster(img.pixels.size());
  for (std::size_t i = 0; i < raster.size(); ++i) raster[i] = quantize8(img.pixels[i]);
  std::vector<std::uint8_t> out;
  detail::PngReadResult err;
  const int color = img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
  if (!detail::encode_png_raw(raster, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), color,
                              img.channels, out, err))
    fail(ErrorKind::IOError, std::string("PNG encode failed: ") + err.message);
  return out;
}

inline std::vector<std::uint8_t> encode_pgm(const Image& img) {
  const Image gray = to_gray(img);
  const std::string header = "P5\n" + std::to_string(gray.width) + " " + std::to_string(gray.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (float v : gray.pixels) out.push_back(quantize8(v));
  return out;
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::IOError, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::IOError, "failed writing " + path.string());
}

inline void save_png(const Image& img, const std::filesystem::path& path) { write_bytes(path, encode_png(img)); }

/// Decodes PNG or binary PGM (P5) by signature. `luma` collapses RGB to one channel.
inline Image decode_image(const std::vector<std::uint8_t>& bytes, bool luma = true) {
  static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  Image img;
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), sig, 8) == 0)
    img = detail::decode_png(bytes);
  else if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5')
    img = detail::decode_pgm(bytes);
  else
    fail(ErrorKind::UnsupportedFormat, "not a PNG or binary PGM file");
  return luma ? to_gray(img) : img;
}

inline Image load_image_file(const std::filesystem::path& path, bool luma = true) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::IOError, "cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), {});
  try {
    return decode_image(bytes, luma);
  } catch (const Error& e) {
    fail(e.kind(), path.string() + ": " + e.what());
  }
}

/// Bilinear sample with edge clamping at continuous coordinates (pixel centers at integers).
inline float sample_clamped(const Image& img, double y, double x, std::size_t c) {
  y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  const std::size_t y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
  const std::size_t y1 = std::min(y0 + 1, img.height - 1), x1 = std::min(x0 + 1, img.width - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  const double top = img.at(y0, x0, c) * (1 - fx) + img.at(y0, x1, c) * fx;
  const double bot = img.at(y1, x0, c) * (1 - fx) + img.at(y1, x1, c) * fx;
  return static_cast<float>(top * (1 - fy) + bot * fy);
}

/// Bilinear resample with the half-pixel convention: output pixel centre d maps
/// to source coordinate (d + 0.5) * in / out - 0.5.
inline Image resize(const Image& img, std::size_t out_h, std::size_t out_w) {
  if (img.height < 2 || img.width < 2) fail(ErrorKind::TooSmall, "resize needs at least 2x2 input");
  if (out_h == 0 || out_w == 0) fail(ErrorKind::InvalidConfig, "resize target must be positive");
  if (out_h == img.height && out_w == img.width) return img;
  Image out(out_h, out_w, img.channels);
  const double sy = static_cast<double>(img.height) / static_cast<double>(out_h);
  const double sx = static_cast<double>(img.width) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double src_y = (static_cast<double>(y) + 0.5) * sy - 0.5;
    for (std::size_t x = 0; x < out_w; ++x) {
      const double src_x = (static_cast<double>(x) + 0.5) * sx - 0.5;
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = sample_clamped(img, src_y, src_x, c);
    }
  }
  return out;
}

inline Image resize(const Image& img, std::size_t side = 224) { return resize(img, side, side); }

}  // namespace beamsight
