#pragma once

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "tokedit/common.hpp"
#include "tokedit/tensor.hpp"

namespace tokedit {

// HWC float image, values in [0,1].
struct ImageRGB {
  int h = 0, w = 0;
  std::vector<float> data;  // (y*w + x)*3 + c

  ImageRGB() = default;
  ImageRGB(int h_, int w_) : h(h_), w(w_), data(static_cast<size_t>(h_) * w_ * 3, 0.0f) {}

  float& at(int y, int x, int c) { return data[(static_cast<size_t>(y) * w + x) * 3 + c]; }
  float at(int y, int x, int c) const { return data[(static_cast<size_t>(y) * w + x) * 3 + c]; }
};

inline bool images_equal(const ImageRGB& a, const ImageRGB& b) {
  return a.h == b.h && a.w == b.w && a.data == b.data;
}

inline double image_mse(const ImageRGB& a, const ImageRGB& b) {
  TOKEDIT_CHECK(a.h == b.h && a.w == b.w, ShapeError, "image_mse: size mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < a.data.size(); i++) {
    double d = static_cast<double>(a.data[i]) - b.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.data.size());
}

// Rec.601 luma replicated to three channels.
inline ImageRGB to_grayscale(const ImageRGB& img) {
  ImageRGB out(img.h, img.w);
  for (int y = 0; y < img.h; y++)
    for (int x = 0; x < img.w; x++) {
      float l = 0.299f * img.at(y, x, 0) + 0.587f * img.at(y, x, 1) + 0.114f * img.at(y, x, 2);
      out.at(y, x, 0) = out.at(y, x, 1) = out.at(y, x, 2) = l;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Area-consistent bilinear resampling (separable triangle kernel).
// Output sample i maps to input coordinate (i+0.5)*scale - 0.5; on
// downsampling the kernel widens to the scale factor so every input pixel
// contributes to some output. Weights are nonnegative, so resampling a
// nonnegative plane is positive wherever any covered input is positive.
// ---------------------------------------------------------------------------

namespace detail {
struct ResampleTap {
  int lo;                     // first source index
  std::vector<float> weight;  // normalized
};

inline std::vector<ResampleTap> resample_taps(int src, int dst) {
  TOKEDIT_CHECK(src > 0 && dst > 0, ShapeError, "resample: empty axis");
  double scale = static_cast<double>(src) / dst;
  double radius = std::max(1.0, scale);
  std::vector<ResampleTap> taps(static_cast<size_t>(dst));
  for (int i = 0; i < dst; i++) {
    double center = (i + 0.5) * scale - 0.5;
    int lo = static_cast<int>(std::ceil(center - radius));
    int hi = static_cast<int>(std::floor(center + radius));
    ResampleTap tap;
    tap.lo = std::max(lo, 0);
    int last = std::min(hi, src - 1);
    double sum = 0.0;
    for (int s = tap.lo; s <= last; s++) {
      double wgt = 1.0 - std::abs(s - center) / radius;
      if (wgt <= 0.0) wgt = 0.0;
      tap.weight.push_back(static_cast<float>(wgt));
      sum += wgt;
    }
    TOKEDIT_CHECK(sum > 0.0, NumericError, "resample: empty kernel at %d", i);
    for (auto& wgt : tap.weight) wgt = static_cast<float>(wgt / sum);
    taps[static_cast<size_t>(i)] = std::move(tap);
  }
  return taps;
}
}  // namespace detail

// Single-channel plane, row-major [sh x sw] -> [dh x dw].
inline std::vector<float> resample_plane(const std::vector<float>& src, int sh, int sw, int dh,
                                         int dw) {
  TOKEDIT_CHECK(src.size() == static_cast<size_t>(sh) * sw, ShapeError, "resample_plane: size");
  auto xt = detail::resample_taps(sw, dw);
  auto yt = detail::resample_taps(sh, dh);
  std::vector<float> tmp(static_cast<size_t>(sh) * dw, 0.0f);
  for (int y = 0; y < sh; y++)
    for (int x = 0; x < dw; x++) {
      const auto& t = xt[static_cast<size_t>(x)];
      double acc = 0.0;
      for (size_t k = 0; k < t.weight.size(); k++)
        acc += static_cast<double>(t.weight[k]) * src[static_cast<size_t>(y) * sw + t.lo + k];
      tmp[static_cast<size_t>(y) * dw + x] = static_cast<float>(acc);
    }
  std::vector<float> out(static_cast<size_t>(dh) * dw, 0.0f);
  for (int y = 0; y < dh; y++) {
    const auto& t = yt[static_cast<size_t>(y)];
    for (int x = 0; x < dw; x++) {
      double acc = 0.0;
      for (size_t k = 0; k < t.weight.size(); k++)
        acc += static_cast<double>(t.weight[k]) * tmp[static_cast<size_t>(t.lo + k) * dw + x];
      out[static_cast<size_t>(y) * dw + x] = static_cast<float>(acc);
    }
  }
  return out;
}

inline ImageRGB resample_image(const ImageRGB& img, int dh, int dw) {
  ImageRGB out(dh, dw);
  std::vector<float> plane(static_cast<size_t>(img.h) * img.w);
  for (int c = 0; c < 3; c++) {
    for (int y = 0; y < img.h; y++)
      for (int x = 0; x < img.w; x++) plane[static_cast<size_t>(y) * img.w + x] = img.at(y, x, c);
    auto res = resample_plane(plane, img.h, img.w, dh, dw);
    for (int y = 0; y < dh; y++)
      for (int x = 0; x < dw; x++) out.at(y, x, c) = res[static_cast<size_t>(y) * dw + x];
  }
  return out;
}

// ---------------------------------------------------------------------------
// PNG I/O (8-bit RGB). The synthetic palette uses only n/255 values, so the
// float->byte->float round trip is lossless on rendered images.
// ---------------------------------------------------------------------------

inline void write_png(const std::string& path, const ImageRGB& img) {
  FILE* f = std::fopen(path.c_str(), "wb");
  TOKEDIT_CHECK(f, IoError, "cannot open %s for writing", path.c_str());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(f);
    throw IoError("png write failed: " + path);
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<size_t>(img.w) * 3);
  for (int y = 0; y < img.h; y++) {
    for (int x = 0; x < img.w; x++)
      for (int c = 0; c < 3; c++) {
        float v = img.at(y, x, c);
        v = std::min(1.0f, std::max(0.0f, v));
        row[static_cast<size_t>(x) * 3 + c] = static_cast<png_byte>(std::lround(v * 255.0f));
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(f);
}

inline ImageRGB read_png(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  TOKEDIT_CHECK(f, IoError, "cannot open %s", path.c_str());
  png_byte header[8];
  if (std::fread(header, 1, 8, f) != 8 || png_sig_cmp(header, 0, 8)) {
    std::fclose(f);
    throw FormatError("not a png file: " + path);
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(f);
    throw FormatError("png read failed: " + path);
  }
  png_init_io(png, f);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  png_byte color = png_get_color_type(png, info);
  png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  ImageRGB img(static_cast<int>(h), static_cast<int>(w));
  std::vector<png_byte> row(static_cast<size_t>(w) * 3);
  for (png_uint_32 y = 0; y < h; y++) {
    png_read_row(png, row.data(), nullptr);
    for (png_uint_32 x = 0; x < w; x++)
      for (int c = 0; c < 3; c++)
        img.at(static_cast<int>(y), static_cast<int>(x), c) =
            static_cast<float>(row[static_cast<size_t>(x) * 3 + c]) / 255.0f;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(f);
  return img;
}

// ---------------------------------------------------------------------------
// Tensor bridges (NCHW batches)
// ---------------------------------------------------------------------------

inline Tensor images_to_tensor(const std::vector<ImageRGB>& imgs) {
  TOKEDIT_CHECK(!imgs.empty(), ShapeError, "images_to_tensor: empty batch");
  int h = imgs[0].h, w = imgs[0].w;
  Tensor t = Tensor::zeros({static_cast<int>(imgs.size()), 3, h, w});
  for (size_t n = 0; n < imgs.size(); n++) {
    TOKEDIT_CHECK(imgs[n].h == h && imgs[n].w == w, ShapeError, "images_to_tensor: mixed sizes");
    for (int c = 0; c < 3; c++)
      for (int y = 0; y < h; y++)
        for (int x = 0; x < w; x++)
          t.data()[((n * 3 + c) * static_cast<size_t>(h) + y) * w + x] = imgs[n].at(y, x, c);
  }
  return t;
}

inline ImageRGB tensor_to_image(const Tensor& t, int n, bool clamp = true) {
  TOKEDIT_CHECK(t.ndim() == 4 && t.dim(1) == 3, ShapeError, "tensor_to_image: NCHW expected");
  int h = t.dim(2), w = t.dim(3);
  ImageRGB img(h, w);
  for (int c = 0; c < 3; c++)
    for (int y = 0; y < h; y++)
      for (int x = 0; x < w; x++) {
        float v = t.data()[(((static_cast<size_t>(n) * 3) + c) * h + y) * w + x];
        if (clamp) v = std::min(1.0f, std::max(0.0f, v));
        img.at(y, x, c) = v;
      }
  return img;
}

}  // namespace tokedit
