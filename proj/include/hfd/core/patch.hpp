#pragma once

#include <string>

#include "hfd/core/image.hpp"

namespace hfd {

struct Rect {
  int row = 0;
  int col = 0;
  int height = 0;
  int width = 0;

  int bottom() const { return row + height; }
  int right() const { return col + width; }
  bool contains(int r, int c) const { return r >= row && r < bottom() && c >= col && c < right(); }
  bool contains(const Rect& o) const {
    return o.row >= row && o.col >= col && o.bottom() <= bottom() && o.right() <= right();
  }
  bool intersects(const Rect& o) const {
    return row < o.bottom() && o.row < bottom() && col < o.right() && o.col < right();
  }
  long area() const { return static_cast<long>(height) * width; }

  friend bool operator==(const Rect&, const Rect&) = default;
};

inline bool rect_in_bounds(const Rect& r, const ImageBuffer& img) {
  return r.row >= 0 && r.col >= 0 && r.height >= 0 && r.width >= 0 && r.bottom() <= img.height &&
         r.right() <= img.width;
}

// A rectangular copy of part of a parent image; origin is its top-left corner there.
struct Patch {
  Rect region;
  ImageBuffer data;
};

inline Patch extract_patch(const ImageBuffer& img, const Rect& region) {
  if (!rect_in_bounds(region, img))
    throw std::out_of_range("extract_patch: rectangle outside image");
  Patch p{region, ImageBuffer(region.height, region.width, img.channels)};
  const std::size_t row_len = static_cast<std::size_t>(region.width) * img.channels;
  for (int r = 0; r < region.height; ++r) {
    const double* src = &img.data[img.index(region.row + r, region.col, 0)];
    std::copy(src, src + row_len, &p.data.data[p.data.index(r, 0, 0)]);
  }
  return p;
}

inline Patch extract_patch(const ImageBuffer& img, int row, int col, int size) {
  return extract_patch(img, Rect{row, col, size, size});
}

inline void paste_patch(ImageBuffer& img, const Patch& patch) {
  const Rect& region = patch.region;
  if (!rect_in_bounds(region, img))
    throw std::out_of_range("paste_patch: rectangle outside image");
  if (patch.data.height != region.height || patch.data.width != region.width ||
      patch.data.channels != img.channels)
    throw std::invalid_argument("paste_patch: patch data does not match its region");
  const std::size_t row_len = static_cast<std::size_t>(region.width) * img.channels;
  for (int r = 0; r < region.height; ++r) {
    const double* src = &patch.data.data[patch.data.index(r, 0, 0)];
    std::copy(src, src + row_len, &img.data[img.index(region.row + r, region.col, 0)]);
  }
}

// Copy `src_region` of src into dst at the same coordinates.
inline void copy_region(const ImageBuffer& src, ImageBuffer& dst, const Rect& region) {
  paste_patch(dst, extract_patch(src, region));
}

}  // namespace hfd
