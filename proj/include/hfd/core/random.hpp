#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <span>
#include <string_view>
#include <stdexcept>
#include <vector>

namespace hfd {

// Philox4x32-10 block function (Salmon et al., SC'11).
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                               std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kM0 = 0xD2511F53u, kM1 = 0xCD9E8D57u;
  constexpr std::uint32_t kW0 = 0x9E3779B9u, kW1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += kW0;
      key[1] += kW1;
    }
    const std::uint64_t p0 = static_cast<std::uint64_t>(kM0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kM1) * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  }
  return ctr;
}

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}
}  // namespace detail

// Counter-based random stream identified by (root seed, path). Output depends
// only on that identity and on how many values this object has produced, so
// substreams handed to parallel workers never interact.
// FNV-1a, for stable keys derived from names and config text.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

class SeededStream {
 public:
  explicit SeededStream(std::uint64_t root_seed = 0) : root_(root_seed) { rekey(); }

  std::uint64_t root_seed() const { return root_; }
  const std::vector<std::uint64_t>& path() const { return path_; }

  // Fresh stream at path + {index}, counter reset.
  SeededStream substream(std::uint64_t index) const {
    SeededStream s(root_, path_);
    s.path_.push_back(index);
    s.rekey();
    return s;
  }
  SeededStream substream(std::initializer_list<std::uint64_t> indices) const {
    SeededStream s(root_, path_);
    s.path_.insert(s.path_.end(), indices.begin(), indices.end());
    s.rekey();
    return s;
  }

  std::uint32_t next_u32() {
    if (pos_ == 4) {
      block_ = philox4x32({static_cast<std::uint32_t>(counter_),
                           static_cast<std::uint32_t>(counter_ >> 32),
                           static_cast<std::uint32_t>(domain_),
                           static_cast<std::uint32_t>(domain_ >> 32)},
                          {static_cast<std::uint32_t>(key_), static_cast<std::uint32_t>(key_ >> 32)});
      ++counter_;
      pos_ = 0;
    }
    return block_[pos_++];
  }

  std::uint64_t next_u64() {
    const std::uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  // Uniform on [0,1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal by Box-Muller; values come in pairs.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0,1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  void fill_normal(std::span<double> out) {
    for (double& v : out) v = normal();
  }

  std::vector<double> normals(std::size_t n) {
    std::vector<double> v(n);
    fill_normal(v);
    return v;
  }

  // Philox blocks consumed so far.
  std::uint64_t blocks_used() const { return counter_; }

 private:
  SeededStream(std::uint64_t root, std::vector<std::uint64_t> path)
      : root_(root), path_(std::move(path)) {}

  void rekey() {
    std::uint64_t h1 = detail::splitmix64(root_);
    std::uint64_t h2 = detail::splitmix64(root_ ^ 0x5851F42D4C957F2Dull);
    for (std::uint64_t p : path_) {
      h1 = detail::splitmix64(h1 ^ detail::splitmix64(p));
      h2 = detail::splitmix64(h2 + detail::splitmix64(~p));
    }
    key_ = h1;
    domain_ = h2;
    counter_ = 0;
    pos_ = 4;
    has_spare_ = false;
  }

  std::uint64_t root_ = 0;
  std::vector<std::uint64_t> path_;
  std::uint64_t key_ = 0;
  std::uint64_t domain_ = 0;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int pos_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// n standard normal draws from the stream.
inline std::vector<double> sample_standard_normal(SeededStream& stream, std::size_t n) {
  if (n == 0) throw std::invalid_argument("sample_standard_normal: n must be >= 1");
  return stream.normals(n);
}

}  // namespace hfd
