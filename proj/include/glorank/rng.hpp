#ifndef GLORANK_RNG_HPP_
#define GLORANK_RNG_HPP_

#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <vector>

#include "glorank/errors.hpp"

namespace glorank {

// xoshiro256++ seeded via splitmix64. Self-contained so that streams are
// bit-identical across standard libraries and platforms; std::<distribution>
// types are implementation-defined and would break run reproducibility.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& s : state_) s = splitmix64(x);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // uniform in [0, 1), 53-bit resolution
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // unbiased integer in [0, n)
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw ArgumentError("uniform_int: n must be positive");
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // standard normal via Box-Muller; one spare cached
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    shuffle(p);
    return p;
  }

  // uniform ordered sample of k distinct indices from [0, n): partial Fisher-Yates
  std::vector<int> k_permutation(int n, int k) {
    if (k > n) throw ArgumentError("k_permutation: k > n");
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[i] = i;
    std::vector<int> out(k);
    for (int i = 0; i < k; ++i) {
      const int j = i + static_cast<int>(uniform_int(static_cast<std::uint64_t>(n - i)));
      std::swap(pool[i], pool[j]);
      out[i] = pool[i];
    }
    return out;
  }

  // derived, decorrelated stream for a keyed substream (per user, per rollout, ...)
  Rng fork(std::uint64_t key) const {
    std::uint64_t x = state_[0] ^ (key * 0x9e3779b97f4a7c15ULL);
    x ^= state_[2] + 0xbf58476d1ce4e5b9ULL;
    return Rng(x);
  }

  std::vector<std::uint64_t> serialize() const {
    std::vector<std::uint64_t> s(state_, state_ + 4);
    s.push_back(has_spare_ ? 1u : 0u);
    std::uint64_t bits = 0;
    std::memcpy(&bits, &spare_, sizeof(double));
    s.push_back(bits);
    return s;
  }

  static Rng deserialize(const std::vector<std::uint64_t>& s) {
    if (s.size() != 6) throw ArgumentError("Rng::deserialize: expected 6 words");
    Rng r(0);
    for (int i = 0; i < 4; ++i) r.state_[i] = s[i];
    r.has_spare_ = s[4] != 0;
    std::memcpy(&r.spare_, &s[5], sizeof(double));
    return r;
  }

 private:
  static std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

  std::uint64_t state_[4] = {};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace glorank

#endif  // GLORANK_RNG_HPP_
