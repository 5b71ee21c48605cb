#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "hfd/core/image.hpp"
#include "hfd/core/image_io.hpp"
#include "hfd/core/patch.hpp"
#include "hfd/core/random.hpp"

namespace fs = std::filesystem;
using namespace hfd;

namespace {

fs::path temp_dir() {
  fs::path p = fs::temp_directory_path() / "hfd_core_test";
  fs::create_directories(p);
  return p;
}

ImageBuffer random_8bit_image(int h, int w, int c, std::uint64_t seed) {
  SeededStream s(seed);
  ImageBuffer img(h, w, c);
  for (double& v : img.data) v = from_u8(static_cast<std::uint8_t>(s.next_u32() & 0xFF));
  return img;
}

}  // namespace

// Known-answer vectors published with the Random123 library.
TEST(Philox, KnownAnswerVectors) {
  auto zero = philox4x32({0, 0, 0, 0}, {0, 0});
  EXPECT_EQ(zero, (std::array<std::uint32_t, 4>{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
  auto ones = philox4x32({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu});
  EXPECT_EQ(ones, (std::array<std::uint32_t, 4>{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
  auto pi = philox4x32({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u});
  EXPECT_EQ(pi, (std::array<std::uint32_t, 4>{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(SeededStream, SamePathReproduces) {
  SeededStream root(42);
  SeededStream a = root.substream({3, 7});
  SeededStream b = root.substream(3).substream(7);
  EXPECT_EQ(sample_standard_normal(a, 100), sample_standard_normal(b, 100));
}

TEST(SeededStream, IndependentOfInterleaving) {
  SeededStream root(9);
  SeededStream a = root.substream(1);
  const auto expected = a.normals(50);
  // Drawing heavily from a sibling in between must not matter.
  SeededStream sibling = root.substream(2);
  sibling.normals(1000);
  SeededStream again = root.substream(1);
  EXPECT_EQ(again.normals(50), expected);
}

TEST(SeededStream, ChunkingDoesNotChangeSequence) {
  SeededStream a(5), b(5);
  auto whole = a.normals(11);
  std::vector<double> parts;
  for (int n : {3, 1, 7}) {
    auto p = b.normals(static_cast<std::size_t>(n));
    parts.insert(parts.end(), p.begin(), p.end());
  }
  EXPECT_EQ(whole, parts);
}

TEST(SeededStream, NormalMoments) {
  SeededStream s(2024);
  const auto v = sample_standard_normal(s, 1000000);
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  double var = 0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= (v.size() - 1);
  EXPECT_NEAR(mean, 0.0, 0.01);
  EXPECT_NEAR(var, 1.0, 0.01);
}

TEST(SeededStream, DifferentPathsUncorrelated) {
  SeededStream root(77);
  SeededStream a = root.substream(0), b = root.substream(1);
  const auto x = a.normals(100000), y = b.normals(100000);
  double sx = 0, sy = 0, sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i]; sy += y[i]; sxy += x[i] * y[i]; sxx += x[i] * x[i]; syy += y[i] * y[i];
  }
  const double n = static_cast<double>(x.size());
  const double cov = sxy / n - sx / n * sy / n;
  const double corr = cov / std::sqrt((sxx / n - sx / n * sx / n) * (syy / n - sy / n * sy / n));
  EXPECT_LT(std::abs(corr), 0.02);
}

TEST(SeededStream, ZeroDrawsRejected) {
  SeededStream s(1);
  EXPECT_THROW(sample_standard_normal(s, 0), std::invalid_argument);
}

TEST(EightBit, RoundHalfAwayFromZero) {
  EXPECT_EQ(to_u8(0.5 / 255.0), 1);
  EXPECT_EQ(to_u8(1.5 / 255.0), 2);
  EXPECT_EQ(to_u8(-0.2), 0);
  EXPECT_EQ(to_u8(1.7), 255);
  for (int v = 0; v < 256; ++v) EXPECT_EQ(to_u8(from_u8(static_cast<std::uint8_t>(v))), v);
}

TEST(ImageIO, PngRoundTripIsBitExact) {
  for (int c : {1, 3}) {
    const auto img = random_8bit_image(16, 16, c, 10 + c);
    const auto path = temp_dir() / ("rt" + std::to_string(c) + ".png");
    save_image(img, path);
    const auto back = load_image(path);
    EXPECT_EQ(back, img);
  }
}

TEST(ImageIO, PpmRoundTripIsBitExact) {
  const auto img = random_8bit_image(16, 13, 3, 4);
  const auto path = temp_dir() / "rt.ppm";
  save_image(img, path);
  EXPECT_EQ(load_image(path), img);
}

TEST(ImageIO, OnePixelImage) {
  const auto img = random_8bit_image(1, 1, 3, 8);
  const auto path = temp_dir() / "one.png";
  save_image(img, path);
  const auto back = load_image(path);
  EXPECT_EQ(back.size(), 3u);
  EXPECT_EQ(back, img);
}

TEST(ImageIO, TruncatedFilesAreErrors) {
  const auto img = random_8bit_image(32, 32, 3, 3);
  for (const char* name : {"trunc.png", "trunc.ppm"}) {
    const auto path = temp_dir() / name;
    save_image(img, path);
    const auto size = fs::file_size(path);
    fs::resize_file(path, size / 2);
    EXPECT_THROW(load_image(path), DataError) << name;
  }
}

TEST(ImageIO, UnsupportedAndMissing) {
  const auto path = temp_dir() / "junk.bin";
  std::ofstream(path) << "GIF89a nothing to see";
  EXPECT_THROW(load_image(path), DataError);
  EXPECT_THROW(load_image(temp_dir() / "does_not_exist.png"), DataError);
  EXPECT_THROW(save_image(random_8bit_image(2, 2, 3, 1), temp_dir() / "no_such_dir" / "x.png"), DataError);
}

TEST(ImageIO, PpmDimensionOverflow) {
  const auto path = temp_dir() / "huge.ppm";
  std::ofstream(path, std::ios::binary) << "P6\n4000000 4000000\n255\n";
  EXPECT_THROW(load_image(path), DataError);
}

TEST(Patch, FullExtractIsIdentity) {
  const auto img = random_8bit_image(20, 30, 3, 1);
  const Patch p = extract_patch(img, Rect{0, 0, 20, 30});
  EXPECT_EQ(p.data, img);
}

TEST(Patch, ExtractPasteRoundTrip) {
  auto img = random_8bit_image(40, 40, 3, 2);
  const auto orig = img;
  paste_patch(img, extract_patch(img, Rect{5, 7, 11, 13}));
  EXPECT_EQ(img, orig);
}

TEST(Patch, TopLeftIndexing) {
  const auto img = random_8bit_image(512, 512, 1, 3);
  const Patch p = extract_patch(img, 0, 0, 128);
  ASSERT_EQ(p.data.height, 128);
  ASSERT_EQ(p.data.width, 128);
  for (int r = 0; r < 128; ++r)
    for (int c = 0; c < 128; ++c) ASSERT_EQ(p.data.at(r, c, 0), img.at(r, c, 0));
}

TEST(Patch, PasteWritesExactlyTheRectangle) {
  ImageBuffer img(10, 10, 1, 0.0);
  Patch p{Rect{2, 3, 4, 5}, ImageBuffer(4, 5, 1, 1.0)};
  paste_patch(img, p);
  double total = std::accumulate(img.data.begin(), img.data.end(), 0.0);
  EXPECT_EQ(total, 20.0);
  EXPECT_EQ(img.at(2, 3, 0), 1.0);
  EXPECT_EQ(img.at(5, 7, 0), 1.0);
  EXPECT_EQ(img.at(6, 7, 0), 0.0);
}

TEST(Patch, OutOfBoundsRejected) {
  ImageBuffer img(10, 10, 1);
  EXPECT_THROW(extract_patch(img, Rect{5, 5, 6, 2}), std::out_of_range);
  EXPECT_THROW(extract_patch(img, Rect{-1, 0, 2, 2}), std::out_of_range);
  Patch p{Rect{9, 9, 2, 2}, ImageBuffer(2, 2, 1)};
  EXPECT_THROW(paste_patch(img, p), std::out_of_range);
}

// Any partition into disjoint rectangles reassembles the image exactly.
TEST(Patch, RandomPartitionsReassemble) {
  SeededStream s(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int h = 1 + static_cast<int>(s.next_u32() % 40), w = 1 + static_cast<int>(s.next_u32() % 40);
    const auto img = random_8bit_image(h, w, 3, trial);
    std::vector<int> rows{0, h}, cols{0, w};
    for (int k = 0; k < 3; ++k) {
      rows.push_back(static_cast<int>(s.next_u32() % static_cast<unsigned>(h)));
      cols.push_back(static_cast<int>(s.next_u32() % static_cast<unsigned>(w)));
    }
    std::sort(rows.begin(), rows.end());
    rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
    std::sort(cols.begin(), cols.end());
    cols.erase(std::unique(cols.begin(), cols.end()), cols.end());
    ImageBuffer out(h, w, 3, -1.0);
    for (std::size_t i = 0; i + 1 < rows.size(); ++i)
      for (std::size_t j = 0; j + 1 < cols.size(); ++j)
        paste_patch(out, extract_patch(img, Rect{rows[i], cols[j], rows[i + 1] - rows[i], cols[j + 1] - cols[j]}));
    ASSERT_EQ(out, img);
  }
}
