#pragma once

// PNG (via libpng's simplified API) and binary PPM (P6) reading and writing.
// Pixels are converted to [0,1] on load; saving rounds half away from zero.

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "hfd/core/error.hpp"
#include "hfd/core/image.hpp"

namespace hfd {

inline constexpr std::uint64_t kMaxImagePixels = 1ull << 28;

namespace detail {

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

inline void check_dimensions(std::uint64_t w, std::uint64_t h) {
  if (w == 0 || h == 0) throw DataError("image has zero size");
  if (w > (1u << 20) || h > (1u << 20) || w * h > kMaxImagePixels)
    throw DataError("image dimensions too large: " + std::to_string(w) + "x" + std::to_string(h));
}

inline ImageBuffer from_u8_pixels(const std::uint8_t* px, int h, int w, int c) {
  ImageBuffer img(h, w, c);
  for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = from_u8(px[i]);
  return img;
}

inline std::vector<std::uint8_t> to_u8_pixels(const ImageBuffer& img) {
  std::vector<std::uint8_t> px(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) px[i] = to_u8(img.data[i]);
  return px;
}

inline ImageBuffer decode_png(const std::vector<std::uint8_t>& bytes) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw DataError(std::string("png: ") + image.message);
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  try {
    check_dimensions(image.width, image.height);
  } catch (...) {
    png_image_free(&image);
    throw;
  }
  const int channels = color ? 3 : 1;
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, px.data(), 0, nullptr))
    throw DataError(std::string("png: ") + image.message);
  return from_u8_pixels(px.data(), static_cast<int>(image.height), static_cast<int>(image.width), channels);
}

inline std::vector<std::uint8_t> encode_png(const ImageBuffer& img) {
  require(img.channels == 1 || img.channels == 3, "encode_png: need 1 or 3 channels");
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const auto px = to_u8_pixels(img);
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, px.data(), 0, nullptr))
    throw DataError(std::string("png: ") + image.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, px.data(), 0, nullptr))
    throw DataError(std::string("png: ") + image.message);
  out.resize(size);
  return out;
}

// P6 with maxval 255. Header tokens may be separated by whitespace and comments.
inline ImageBuffer decode_ppm(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 2;
  auto next_token = [&]() -> std::uint64_t {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw DataError("ppm: malformed header");
    std::uint64_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > (1ull << 32)) throw DataError("ppm: header value overflow");
    }
    return v;
  };
  const std::uint64_t w = next_token();
  const std::uint64_t h = next_token();
  const std::uint64_t maxval = next_token();
  if (maxval != 255) throw DataError("ppm: only maxval 255 is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw DataError("ppm: malformed header");
  ++pos;
  check_dimensions(w, h);
  const std::uint64_t need = w * h * 3;
  if (bytes.size() - pos < need) throw DataError("ppm: truncated pixel data");
  return from_u8_pixels(bytes.data() + pos, static_cast<int>(h), static_cast<int>(w), 3);
}

inline std::vector<std::uint8_t> encode_ppm(const ImageBuffer& img) {
  require(img.channels == 3 || img.channels == 1, "encode_ppm: need 1 or 3 channels");
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + img.pixels() * 3);
  for (std::size_t p = 0; p < img.pixels(); ++p)
    for (int c = 0; c < 3; ++c) out.push_back(to_u8(img.data[p * img.channels + (img.channels == 3 ? c : 0)]));
  return out;
}

inline bool has_extension(const std::filesystem::path& path, const char* ext) {
  std::string e = path.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return e == ext;
}

}  // namespace detail

inline ImageBuffer decode_image(const std::vector<std::uint8_t>& bytes) {
  static constexpr std::uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  if (bytes.size() >= 8 && std::equal(kPngSig, kPngSig + 8, bytes.begin())) return detail::decode_png(bytes);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return detail::decode_ppm(bytes);
  throw DataError("unsupported image format");
}

inline ImageBuffer load_image(const std::filesystem::path& path) {
  return decode_image(detail::read_file_bytes(path));
}

// Format follows the extension: .ppm writes P6, anything else PNG.
inline void save_image(const ImageBuffer& img, const std::filesystem::path& path) {
  if (img.empty()) throw std::invalid_argument("save_image: empty image");
  const auto parent = path.parent_path();
  if (!parent.empty() && !std::filesystem::is_directory(parent))
    throw DataError("directory does not exist: " + parent.string());
  detail::write_file_bytes(path, detail::has_extension(path, ".ppm") ? detail::encode_ppm(img)
                                                                     : detail::encode_png(img));
}

}  // namespace hfd
