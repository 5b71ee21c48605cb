#pragma once

// Adaptive order-0 range coder. 32-bit range with carry propagation through
// a cached byte (the LZMA arrangement), frequencies kept in a Fenwick tree.
//
// Framed payload: u32 symbol count | u16 alphabet size | coder bytes.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hfd/core/error.hpp"

namespace hfd::codec {

inline constexpr std::uint32_t kMaxAlphabet = 4096;

// Counts start at 1, grow by kIncrement and are halved once the total
// would pass kMaxTotal. Encoder and decoder run the identical update.
class AdaptiveModel {
 public:
  static constexpr std::uint32_t kIncrement = 32;
  static constexpr std::uint32_t kMaxTotal = 1u << 16;

  explicit AdaptiveModel(std::uint32_t alphabet) : n_(alphabet), freq_(alphabet, 1), tree_(alphabet + 1, 0) {
    if (alphabet == 0 || alphabet > kMaxAlphabet)
      throw std::invalid_argument("AdaptiveModel: alphabet must be in [1, " + std::to_string(kMaxAlphabet) + "]");
    rebuild();
  }

  std::uint32_t alphabet() const { return n_; }
  std::uint32_t total() const { return total_; }
  std::uint32_t freq(std::uint32_t s) const { return freq_[s]; }

  // Sum of freq over symbols < s.
  std::uint32_t cumulative(std::uint32_t s) const {
    std::uint32_t acc = 0;
    for (std::uint32_t i = s; i > 0; i -= i & (~i + 1)) acc += tree_[i];
    return acc;
  }

  // Largest s with cumulative(s) <= target; target < total.
  std::uint32_t find(std::uint32_t target) const {
    std::uint32_t pos = 0;
    for (std::uint32_t step = top_bit(); step > 0; step >>= 1) {
      const std::uint32_t nxt = pos + step;
      if (nxt <= n_ && tree_[nxt] <= target) {
        pos = nxt;
        target -= tree_[nxt];
      }
    }
    return pos;
  }

  void update(std::uint32_t s) {
    if (total_ + kIncrement > kMaxTotal) {
      for (auto& f : freq_) f = (f + 1) / 2;
      rebuild();
    }
    freq_[s] += kIncrement;
    total_ += kIncrement;
    for (std::uint32_t i = s + 1; i <= n_; i += i & (~i + 1)) tree_[i] += kIncrement;
  }

 private:
  void rebuild() {
    total_ = 0;
    std::fill(tree_.begin(), tree_.end(), 0);
    for (std::uint32_t s = 0; s < n_; ++s) {
      total_ += freq_[s];
      for (std::uint32_t i = s + 1; i <= n_; i += i & (~i + 1)) tree_[i] += freq_[s];
    }
  }
  std::uint32_t top_bit() const {
    std::uint32_t b = 1;
    while (b * 2 <= n_) b *= 2;
    return b;
  }

  std::uint32_t n_;
  std::vector<std::uint32_t> freq_;
  std::vector<std::uint32_t> tree_;
  std::uint32_t total_ = 0;
};

class RangeEncoder {
 public:
  void encode(std::uint32_t cum, std::uint32_t freq, std::uint32_t total) {
    range_ /= total;
    low_ += static_cast<std::uint64_t>(cum) * range_;
    range_ *= freq;
    while (range_ < kTop) {
      range_ <<= 8;
      shift_low();
    }
  }

  std::vector<std::uint8_t> finish() {
    for (int i = 0; i < 5; ++i) shift_low();
    return std::move(out_);
  }

 private:
  static constexpr std::uint32_t kTop = 1u << 24;

  void shift_low() {
    if (low_ < 0xFF000000ull || low_ > 0xFFFFFFFFull) {
      const auto carry = static_cast<std::uint8_t>(low_ >> 32);
      std::uint8_t c = cache_;
      do {
        out_.push_back(static_cast<std::uint8_t>(c + carry));
        c = 0xFF;
      } while (--pending_ != 0);
      cache_ = static_cast<std::uint8_t>(low_ >> 24);
    }
    ++pending_;
    low_ = (low_ & 0x00FFFFFFull) << 8;
  }

  std::uint64_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint8_t cache_ = 0;
  std::uint64_t pending_ = 1;
  std::vector<std::uint8_t> out_;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(std::span<const std::uint8_t> in) : in_(in) {
    for (int i = 0; i < 5; ++i) code_ = (code_ << 8) | next();
  }

  std::uint32_t target(std::uint32_t total) {
    range_ /= total;
    const std::uint32_t t = code_ / range_;
    if (t >= total) throw DataError("entropy_decode: corrupt payload");
    return t;
  }

  void consume(std::uint32_t cum, std::uint32_t freq) {
    code_ -= cum * range_;
    range_ *= freq;
    while (range_ < (1u << 24)) {
      code_ = (code_ << 8) | next();
      range_ <<= 8;
    }
  }

  bool exhausted() const { return pos_ == in_.size(); }

 private:
  std::uint32_t next() {
    if (pos_ >= in_.size()) throw DataError("entropy_decode: truncated payload");
    return in_[pos_++];
  }

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
  std::uint32_t code_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
};

inline void check_symbols(std::span<const std::uint32_t> symbols, std::uint32_t alphabet) {
  for (auto s : symbols)
    if (s >= alphabet)
      throw std::invalid_argument("entropy_code: symbol " + std::to_string(s) + " outside alphabet of " +
                                  std::to_string(alphabet));
}

// Coder bytes only, no framing.
inline std::vector<std::uint8_t> range_encode(std::span<const std::uint32_t> symbols, std::uint32_t alphabet) {
  AdaptiveModel m(alphabet);
  check_symbols(symbols, alphabet);
  RangeEncoder enc;
  for (auto s : symbols) {
    enc.encode(m.cumulative(s), m.freq(s), m.total());
    m.update(s);
  }
  return enc.finish();
}

inline std::vector<std::uint32_t> range_decode(std::span<const std::uint8_t> bytes, std::size_t count,
                                               std::uint32_t alphabet) {
  AdaptiveModel m(alphabet);
  RangeDecoder dec(bytes);
  std::vector<std::uint32_t> out(count);
  for (auto& s : out) {
    const std::uint32_t t = dec.target(m.total());
    s = m.find(t);
    dec.consume(m.cumulative(s), m.freq(s));
    m.update(s);
  }
  if (!dec.exhausted()) throw DataError("entropy_decode: trailing bytes after payload");
  return out;
}

// Ideal code length in bits of the stream under the adaptive model.
inline double model_cross_entropy_bits(std::span<const std::uint32_t> symbols, std::uint32_t alphabet) {
  AdaptiveModel m(alphabet);
  check_symbols(symbols, alphabet);
  double bits = 0;
  for (auto s : symbols) {
    bits -= std::log2(static_cast<double>(m.freq(s)) / m.total());
    m.update(s);
  }
  return bits;
}

inline constexpr std::size_t kEntropyHeaderBytes = 6;

inline std::vector<std::uint8_t> entropy_code(std::span<const std::uint32_t> symbols, std::uint32_t alphabet) {
  if (alphabet == 0 || alphabet > kMaxAlphabet) throw std::invalid_argument("entropy_code: alphabet overflow");
  if (symbols.size() > 0xFFFFFFFFull) throw std::invalid_argument("entropy_code: too many symbols");
  std::vector<std::uint8_t> out;
  const auto n = static_cast<std::uint32_t>(symbols.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(n >> (8 * i)));
  // alphabet 4096 does not fit 12 bits but does fit u16
  out.push_back(static_cast<std::uint8_t>(alphabet & 0xFF));
  out.push_back(static_cast<std::uint8_t>(alphabet >> 8));
  if (n == 0) return out;
  const auto body = range_encode(symbols, alphabet);
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

struct EntropyHeader {
  std::uint32_t count = 0;
  std::uint32_t alphabet = 0;
};

inline EntropyHeader read_entropy_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kEntropyHeaderBytes) throw DataError("entropy_decode: truncated header");
  EntropyHeader h;
  for (int i = 0; i < 4; ++i) h.count |= static_cast<std::uint32_t>(bytes[i]) << (8 * i);
  h.alphabet = bytes[4] | (static_cast<std::uint32_t>(bytes[5]) << 8);
  if (h.alphabet == 0 || h.alphabet > kMaxAlphabet) throw DataError("entropy_decode: bad alphabet size");
  return h;
}

// `count` is the number of symbols the caller expects; a mismatch with the
// framed count is an error.
inline std::vector<std::uint32_t> entropy_decode(std::span<const std::uint8_t> bytes, std::size_t count) {
  const EntropyHeader h = read_entropy_header(bytes);
  if (h.count != count)
    throw DataError("entropy_decode: declared count " + std::to_string(h.count) + " but expected " +
                    std::to_string(count));
  if (count == 0) {
    if (bytes.size() != kEntropyHeaderBytes) throw DataError("entropy_decode: trailing bytes after payload");
    return {};
  }
  return range_decode(bytes.subspan(kEntropyHeaderBytes), count, h.alphabet);
}

}  // namespace hfd::codec
