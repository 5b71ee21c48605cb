#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "hfd/core/error.hpp"

namespace hfd {

// Row-major, channel-interleaved grid of reals. Used for images in [0,1] and
// equally for latents, noise fields and model outputs, which are unbounded.
struct ImageBuffer {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  ImageBuffer() = default;
  ImageBuffer(int h, int w, int c, double fill = 0.0) : height(h), width(w), channels(c) {
    require(h >= 0 && w >= 0 && c >= 0, "ImageBuffer: negative dimension");
    data.assign(static_cast<std::size_t>(h) * w * c, fill);
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }

  std::size_t index(int r, int c, int ch) const {
    return (static_cast<std::size_t>(r) * width + c) * channels + ch;
  }
  double& at(int r, int c, int ch) { return data[index(r, c, ch)]; }
  double at(int r, int c, int ch) const { return data[index(r, c, ch)]; }

  bool same_shape(const ImageBuffer& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }

  friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;
};

inline std::string shape_string(const ImageBuffer& img) {
  return std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
         std::to_string(img.channels);
}

inline void require_same_shape(const ImageBuffer& a, const ImageBuffer& b, const char* what) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(what) + ": shape mismatch (" + shape_string(a) +
                                " vs " + shape_string(b) + ")");
}

inline void clamp01(ImageBuffer& img) {
  for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
}

inline ImageBuffer clamped01(ImageBuffer img) {
  clamp01(img);
  return img;
}

inline bool all_finite(const ImageBuffer& img) {
  return std::all_of(img.data.begin(), img.data.end(), [](double v) { return std::isfinite(v); });
}

// [0,1] real -> 8-bit code, round half away from zero.
inline std::uint8_t to_u8(double v) {
  const double s = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<std::uint8_t>(s);
}

inline double from_u8(std::uint8_t v) { return static_cast<double>(v) / 255.0; }

// Snap every value onto the 8-bit grid.
inline ImageBuffer quantize_8bit(const ImageBuffer& img) {
  ImageBuffer out = img;
  for (double& v : out.data) v = from_u8(to_u8(v));
  return out;
}

// Channels concatenated pixel by pixel; both inputs share height and width.
inline ImageBuffer concat_channels(const ImageBuffer& a, const ImageBuffer& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.height != b.height || a.width != b.width)
    throw std::invalid_argument("concat_channels: spatial mismatch");
  ImageBuffer out(a.height, a.width, a.channels + b.channels);
  double* dst = out.data.data();
  for (std::size_t p = 0; p < a.pixels(); ++p) {
    for (int c = 0; c < a.channels; ++c) *dst++ = a.data[p * a.channels + c];
    for (int c = 0; c < b.channels; ++c) *dst++ = b.data[p * b.channels + c];
  }
  return out;
}

// Mean over channels, one output channel.
inline ImageBuffer to_gray(const ImageBuffer& img) {
  ImageBuffer out(img.height, img.width, 1);
  for (std::size_t p = 0; p < img.pixels(); ++p) {
    double s = 0.0;
    for (int c = 0; c < img.channels; ++c) s += img.data[p * img.channels + c];
    out.data[p] = s / img.channels;
  }
  return out;
}

}  // namespace hfd
