#pragma once

// Stage-one transform codec: box-downsample analysis, uniform scalar
// quantizer, adaptive arithmetic coding of the latents, bilinear synthesis.
// Byte layout of the HFDC container is documented in docs/bitstream.md.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hfd/codec/entropy.hpp"
#include "hfd/core/error.hpp"
#include "hfd/core/image.hpp"

namespace hfd::codec {

inline constexpr std::uint8_t kBitstreamVersion = 1;
inline constexpr std::size_t kBitstreamHeaderBytes = 4 + 1 + 4 + 4 + 1 + 1 + 8 + 1 + 4;
inline constexpr std::uint8_t kFlagResidual = 1;

struct CodecConfig {
  int downsample = 4;
  double delta = 1.0 / 32;

  void validate() const {
    if (downsample != 2 && downsample != 4 && downsample != 8)
      throw std::invalid_argument("CodecConfig: downsample must be 2, 4 or 8");
    if (!(delta > 0) || !std::isfinite(delta)) throw std::invalid_argument("CodecConfig: delta must be > 0");
    if (max_level() + 1 > kMaxAlphabet)
      throw std::invalid_argument("CodecConfig: delta too small for a " + std::to_string(kMaxAlphabet) +
                                  "-symbol alphabet");
  }
  // Largest quantizer index, reached by a latent value of 1.
  std::uint32_t max_level() const { return static_cast<std::uint32_t>(std::lround(1.0 / delta)); }
  std::uint32_t alphabet() const { return max_level() + 1; }
};

// --- transform ------------------------------------------------------------

inline int ceil_div(int a, int b) { return (a + b - 1) / b; }

// Mean over each d x d block; edge blocks average only the pixels they cover.
inline ImageBuffer box_downsample(const ImageBuffer& img, int d) {
  const int lh = ceil_div(img.height, d), lw = ceil_div(img.width, d), c = img.channels;
  ImageBuffer out(lh, lw, c);
  for (int by = 0; by < lh; ++by)
    for (int bx = 0; bx < lw; ++bx) {
      const int y1 = std::min(img.height, (by + 1) * d), x1 = std::min(img.width, (bx + 1) * d);
      const double n = static_cast<double>((y1 - by * d) * (x1 - bx * d));
      for (int k = 0; k < c; ++k) {
        double s = 0;
        for (int y = by * d; y < y1; ++y)
          for (int x = bx * d; x < x1; ++x) s += img.at(y, x, k);
        out.at(by, bx, k) = s / n;
      }
    }
  return out;
}

// Bilinear interpolation of a grid whose cell centers sit at the centers of
// d x d pixel blocks; edges replicate.
inline ImageBuffer bilinear_upsample(const ImageBuffer& grid, int d, int h, int w) {
  ImageBuffer out(h, w, grid.channels);
  auto coord = [d](int p, int n, int& i0, int& i1, double& f) {
    const double u = std::clamp((p + 0.5) / d - 0.5, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<int>(std::floor(u));
    i1 = std::min(i0 + 1, n - 1);
    f = u - i0;
  };
  for (int y = 0; y < h; ++y) {
    int y0, y1;
    double fy;
    coord(y, grid.height, y0, y1, fy);
    for (int x = 0; x < w; ++x) {
      int x0, x1;
      double fx;
      coord(x, grid.width, x0, x1, fx);
      for (int k = 0; k < grid.channels; ++k) {
        const double top = (1 - fx) * grid.at(y0, x0, k) + fx * grid.at(y0, x1, k);
        const double bot = (1 - fx) * grid.at(y1, x0, k) + fx * grid.at(y1, x1, k);
        out.at(y, x, k) = (1 - fy) * top + fy * bot;
      }
    }
  }
  return out;
}

inline std::vector<std::uint32_t> quantize_latents(const ImageBuffer& latent, const CodecConfig& cfg) {
  std::vector<std::uint32_t> q(latent.size());
  const double top = cfg.max_level();
  for (std::size_t i = 0; i < q.size(); ++i)
    q[i] = static_cast<std::uint32_t>(std::clamp(std::round(latent.data[i] / cfg.delta), 0.0, top));
  return q;
}

inline ImageBuffer dequantize_latents(std::span<const std::uint32_t> q, int lh, int lw, int c,
                                      const CodecConfig& cfg) {
  ImageBuffer out(lh, lw, c);
  for (std::size_t i = 0; i < q.size(); ++i) out.data[i] = std::min(1.0, q[i] * cfg.delta);
  return out;
}

// Shift every block (per channel) so the mean of the clamped block equals
// its latent value. Re-encoding the result then reproduces the latents.
inline void match_block_means(ImageBuffer& img, const ImageBuffer& latent, int d) {
  std::vector<double> vals;
  for (int by = 0; by < latent.height; ++by)
    for (int bx = 0; bx < latent.width; ++bx) {
      const int y1 = std::min(img.height, (by + 1) * d), x1 = std::min(img.width, (bx + 1) * d);
      for (int k = 0; k < img.channels; ++k) {
        vals.clear();
        for (int y = by * d; y < y1; ++y)
          for (int x = bx * d; x < x1; ++x) vals.push_back(img.at(y, x, k));
        const double n = static_cast<double>(vals.size());
        const double target = latent.at(by, bx, k);
        auto mean_at = [&](double c) {
          double s = 0;
          for (double v : vals) s += std::clamp(v + c, 0.0, 1.0);
          return s / n;
        };
        double mean = 0;
        for (double v : vals) mean += v;
        mean /= n;
        double c = target - mean;
        const auto [mn, mx] = std::minmax_element(vals.begin(), vals.end());
        if (*mn + c < 0 || *mx + c > 1) {
          double lo = -*mx, hi = 1 - *mn;
          for (int it = 0; it < 80; ++it) {
            const double mid = 0.5 * (lo + hi);
            (mean_at(mid) < target ? lo : hi) = mid;
          }
          c = 0.5 * (lo + hi);
        }
        std::size_t i = 0;
        for (int y = by * d; y < y1; ++y)
          for (int x = bx * d; x < x1; ++x) img.at(y, x, k) = std::clamp(vals[i++] + c, 0.0, 1.0);
      }
    }
}

inline ImageBuffer synthesize(const ImageBuffer& latent, const CodecConfig& cfg, int h, int w) {
  ImageBuffer img = bilinear_upsample(latent, cfg.downsample, h, w);
  match_block_means(img, latent, cfg.downsample);
  return img;
}

// --- residual-energy side channel -----------------------------------------

struct ResidualEnergyMap {
  static constexpr int kFactor = 8;
  static constexpr std::uint32_t kLevels = 4;
  static constexpr double kStep = 0.25 / (kLevels - 1);

  int height = 0, width = 0;
  std::vector<std::uint32_t> levels;

  double value(int r, int c) const { return levels[static_cast<std::size_t>(r) * width + c] * kStep; }
  ImageBuffer values() const {
    ImageBuffer g(height, width, 1);
    for (std::size_t i = 0; i < levels.size(); ++i) g.data[i] = levels[i] * kStep;
    return g;
  }
  friend bool operator==(const ResidualEnergyMap&, const ResidualEnergyMap&) = default;
};

inline ResidualEnergyMap residual_energy_map(const ImageBuffer& x, const ImageBuffer& x_mse) {
  require_same_shape(x, x_mse, "residual_energy_map");
  ImageBuffer r(x.height, x.width, 1);
  for (std::size_t p = 0; p < x.pixels(); ++p) {
    double s = 0;
    for (int k = 0; k < x.channels; ++k) {
      const std::size_t i = p * x.channels + k;
      s += std::abs(x_mse.data[i] - x.data[i]);
    }
    r.data[p] = x.channels ? s / x.channels : 0.0;
  }
  const ImageBuffer g = box_downsample(r, ResidualEnergyMap::kFactor);
  ResidualEnergyMap m{g.height, g.width, std::vector<std::uint32_t>(g.size())};
  for (std::size_t i = 0; i < g.size(); ++i)
    m.levels[i] = static_cast<std::uint32_t>(
        std::clamp(std::round(g.data[i] / ResidualEnergyMap::kStep), 0.0, ResidualEnergyMap::kLevels - 1.0));
  return m;
}

// Residual map upsampled (nearest) to full resolution.
inline ImageBuffer residual_energy_image(const ResidualEnergyMap& m, int h, int w) {
  ImageBuffer out(h, w, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(y, x, 0) = m.value(y / ResidualEnergyMap::kFactor, x / ResidualEnergyMap::kFactor);
  return out;
}

// --- container ------------------------------------------------------------

struct DecodedBitstream {
  int width = 0, height = 0, channels = 0;
  CodecConfig cfg;
  std::vector<std::uint32_t> symbols;
  std::optional<ResidualEnergyMap> residual;

  int latent_height() const { return ceil_div(height, cfg.downsample); }
  int latent_width() const { return ceil_div(width, cfg.downsample); }
};

namespace detail {

inline void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> d) : d_(d) {}
  std::uint64_t le(int bytes) {
    need(bytes);
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(d_[pos_ + i]) << (8 * i);
    pos_ += bytes;
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = d_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == d_.size(); }

 private:
  void need(std::size_t n) const {
    if (d_.size() - pos_ < n) throw DataError("bitstream: truncated");
  }
  std::span<const std::uint8_t> d_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> write_bitstream(const DecodedBitstream& b) {
  std::vector<std::uint8_t> out{'H', 'F', 'D', 'C', kBitstreamVersion};
  detail::put_le(out, static_cast<std::uint32_t>(b.width), 4);
  detail::put_le(out, static_cast<std::uint32_t>(b.height), 4);
  out.push_back(static_cast<std::uint8_t>(b.channels));
  out.push_back(static_cast<std::uint8_t>(b.cfg.downsample));
  detail::put_le(out, std::bit_cast<std::uint64_t>(b.cfg.delta), 8);
  out.push_back(b.residual ? kFlagResidual : 0);
  const auto payload = entropy_code(b.symbols, b.cfg.alphabet());
  detail::put_le(out, payload.size(), 4);
  out.insert(out.end(), payload.begin(), payload.end());
  if (b.residual) {
    const auto side = entropy_code(b.residual->levels, ResidualEnergyMap::kLevels);
    detail::put_le(out, side.size(), 4);
    out.insert(out.end(), side.begin(), side.end());
  }
  return out;
}

inline DecodedBitstream read_bitstream(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  const auto magic = r.take(4);
  if (!std::equal(magic.begin(), magic.end(), "HFDC")) throw DataError("bitstream: bad magic");
  const auto version = r.le(1);
  if (version != kBitstreamVersion) throw DataError("bitstream: unsupported version " + std::to_string(version));
  DecodedBitstream b;
  const auto w = r.le(4), h = r.le(4);
  b.channels = static_cast<int>(r.le(1));
  b.cfg.downsample = static_cast<int>(r.le(1));
  b.cfg.delta = std::bit_cast<double>(r.le(8));
  const auto flags = r.le(1);
  if (flags & ~static_cast<std::uint64_t>(kFlagResidual)) throw DataError("bitstream: unknown flags");
  if (w == 0 || h == 0 || b.channels == 0 || w * h > (1ull << 28)) throw DataError("bitstream: bad dimensions");
  b.width = static_cast<int>(w);
  b.height = static_cast<int>(h);
  try {
    b.cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("bitstream: ") + e.what());
  }
  const std::size_t count = static_cast<std::size_t>(b.latent_height()) * b.latent_width() * b.channels;
  const auto payload = r.take(r.le(4));
  if (read_entropy_header(payload).alphabet != b.cfg.alphabet())
    throw DataError("bitstream: payload alphabet does not match delta");
  b.symbols = entropy_decode(payload, count);
  for (auto s : b.symbols)
    if (s > b.cfg.max_level()) throw DataError("bitstream: latent symbol out of range");
  if (flags & kFlagResidual) {
    ResidualEnergyMap m;
    m.height = ceil_div(b.height, ResidualEnergyMap::kFactor);
    m.width = ceil_div(b.width, ResidualEnergyMap::kFactor);
    const auto side = r.take(r.le(4));
    if (read_entropy_header(side).alphabet != ResidualEnergyMap::kLevels)
      throw DataError("bitstream: bad side-channel alphabet");
    m.levels = entropy_decode(side, static_cast<std::size_t>(m.height) * m.width);
    b.residual = std::move(m);
  }
  if (!r.done()) throw DataError("bitstream: trailing bytes");
  return b;
}

// --- encode / decode --------------------------------------------------------

inline DecodedBitstream analyze(const ImageBuffer& img, const CodecConfig& cfg) {
  cfg.validate();
  if (img.height < cfg.downsample || img.width < cfg.downsample)
    throw std::invalid_argument("encode: image " + shape_string(img) + " smaller than the downsample factor");
  if (img.channels < 1 || img.channels > 255) throw std::invalid_argument("encode: channels must be in [1,255]");
  DecodedBitstream b;
  b.width = img.width;
  b.height = img.height;
  b.channels = img.channels;
  b.cfg = cfg;
  b.symbols = quantize_latents(box_downsample(img, cfg.downsample), cfg);
  return b;
}

inline ImageBuffer reconstruct(const DecodedBitstream& b) {
  const ImageBuffer latent = dequantize_latents(b.symbols, b.latent_height(), b.latent_width(), b.channels, b.cfg);
  return synthesize(latent, b.cfg, b.height, b.width);
}

inline std::vector<std::uint8_t> encode(const ImageBuffer& img, const CodecConfig& cfg) {
  return write_bitstream(analyze(img, cfg));
}

// Adds the residual-energy side channel computed against the decoder's own
// reconstruction.
inline std::vector<std::uint8_t> encode_with_residual(const ImageBuffer& img, const CodecConfig& cfg) {
  DecodedBitstream b = analyze(img, cfg);
  b.residual = residual_energy_map(img, reconstruct(b));
  return write_bitstream(b);
}

inline ImageBuffer decode(std::span<const std::uint8_t> bytes) { return reconstruct(read_bitstream(bytes)); }

inline double bpp(std::size_t bytes, int width, int height) {
  if (width <= 0 || height <= 0) throw std::invalid_argument("bpp: width and height must be positive");
  return 8.0 * static_cast<double>(bytes) / (static_cast<double>(width) * height);
}

}  // namespace hfd::codec
