#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace simmt {

// Deterministic random source. All value generation is done with fixed
// arithmetic on raw mt19937_64 draws, never through std distributions, so
// streams are byte-identical across standard libraries and platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), engine_(seed) {}

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], both inclusive. The modulo bias is below
  // range/2^64, negligible for every range used here.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    const uint64_t range = static_cast<uint64_t>(hi - lo) + 1u;
    return lo + static_cast<int64_t>(engine_() % range);
  }

  // Box-Muller without a cached spare: every call consumes exactly two
  // draws, keeping the stream position independent of call history.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    constexpr double kTwoPi = 6.283185307179586476925286766559;
    return mean + stddev * r * std::cos(kTwoPi * u2);
  }

  // Fisher-Yates, descending index, j drawn via uniform_int.
  template <class T>
  void shuffle(std::vector<T>& values) {
    for (size_t i = values.size(); i > 1; --i) {
      const auto j =
          static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(values[i - 1], values[j]);
    }
  }

  // Independent child stream derived from this stream's seed and a label,
  // not from its current position.
  Rng child(const std::string& label) const {
    uint64_t h = 14695981039346656037ull;
    auto mix = [&h](uint64_t byte) {
      h ^= byte;
      h *= 1099511628211ull;
    };
    for (int i = 0; i < 8; ++i) mix((seed_ >> (8 * i)) & 0xffu);
    for (unsigned char c : label) mix(c);
    return Rng(h);
  }

  // mt19937_64 state as the standard textual serialization.
  std::string state() const {
    std::ostringstream out;
    out << engine_;
    return out.str();
  }

  void set_state(const std::string& text) {
    std::istringstream in(text);
    in >> engine_;
  }

 private:
  uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace simmt
