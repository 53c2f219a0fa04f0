#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace aitl {

/// Counter-seeded xoshiro256++ stream. The state is derived from
/// (seed, stream_id) via splitmix64, so equal (seed, stream, draw sequence)
/// reproduces the same values on every platform. Streams forked with
/// distinct ids are independent for practical purposes.
struct RngStream {
  uint64_t seed = 0;
  uint64_t stream = 0;
  uint64_t s[4] = {0, 0, 0, 0};

  RngStream() { reseed(); }
  explicit RngStream(uint64_t seed_, uint64_t stream_ = 0) : seed(seed_), stream(stream_) { reseed(); }

  static uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  void reseed() {
    uint64_t x = seed ^ (stream * 0x9e3779b97f4a7c15ULL + 0x6a09e667f3bcc909ULL);
    for (auto& w : s) w = splitmix64(x);
    if ((s[0] | s[1] | s[2] | s[3]) == 0) s[0] = 1;  // xoshiro state must be nonzero
  }

  static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

  uint64_t next_u64() {
    const uint64_t result = rotl(s[0] + s[3], 23) + s[0];
    const uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return result;
  }

  /// Uniform double in [0,1), 53 significant bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  float uniform(float lo, float hi) { return lo + static_cast<float>(uniform()) * (hi - lo); }

  /// Uniform integer in [0, n). Lemire reduction, no modulo bias.
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) return 0;
    while (true) {
      uint64_t x = next_u64();
      __uint128_t m = static_cast<__uint128_t>(x) * n;
      uint64_t lo = static_cast<uint64_t>(m);
      if (lo >= n || lo >= static_cast<uint64_t>(-static_cast<int64_t>(n)) % n)
        return static_cast<uint64_t>(m >> 64);
    }
  }

  /// Standard normal via Box-Muller; always consumes two uniform draws.
  float normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2));
  }

  /// Child stream with a distinct id; the parent is not advanced.
  RngStream fork(uint64_t i) const {
    uint64_t x = stream ^ (0xd1342543de82ef95ULL * (i + 1));
    return RngStream(seed, splitmix64(x));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }
};

}  // namespace aitl
