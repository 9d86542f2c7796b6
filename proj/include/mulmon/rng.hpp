#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace mulmon {

// Counter-style deterministic RNG (splitmix64 core). Streams are derived
// from a root seed plus a name and indices, so any point in a run can be
// reconstructed from (seed, stream, counters) without serializing state.
// Identical across platforms; std::normal_distribution is not.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ^ kGolden) {}

  static uint64_t mix(uint64_t a, uint64_t b) {
    // boost::hash_combine flavored 64-bit mix
    a ^= b + kGolden + (a << 12) + (a >> 4);
    return splitmix(a);
  }

  static uint64_t hash_name(std::string_view name) {
    uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (char c : name) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ull;
    }
    return h;
  }

  // Named substream: rng.stream("data", epoch) etc.
  Rng stream(std::string_view name) const {
    return Rng(mix(state_, hash_name(name)));
  }
  Rng stream(std::string_view name, uint64_t i) const {
    return Rng(mix(mix(state_, hash_name(name)), i));
  }
  Rng stream(std::string_view name, uint64_t i, uint64_t j) const {
    return Rng(mix(mix(mix(state_, hash_name(name)), i), j));
  }

  uint64_t next_u64() {
    state_ += kGolden;
    return splitmix(state_);
  }

  // [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [lo, hi] inclusive
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(next_u64() % span);
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // Box-Muller; u1 in (0,1]
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  template <class It>
  void shuffle(It first, It last) {
    auto n = last - first;
    for (decltype(n) i = n - 1; i > 0; --i) {
      auto j = uniform_int(0, i);
      std::swap(first[i], first[j]);
    }
  }

 private:
  static constexpr uint64_t kGolden = 0x9e3779b97f4a7c15ull;

  static uint64_t splitmix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mulmon
