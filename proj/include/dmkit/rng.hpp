#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>
#include <vector>

namespace dmkit {

// Counter-based stream: output depends only on (key, counter), so streams can
// be forked per trajectory / per parameter / per step without any shared
// state. All draws are bit-reproducible across platforms; no std::
// distributions are used anywhere.
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : key_(mix(seed ^ kKeyInit)) {}

  // Independent child stream addressed by an integer tag.
  RngStream child(uint64_t tag) const {
    return RngStream(FromKey{}, mix(key_ ^ mix(tag + kGolden)));
  }

  // Independent child stream addressed by a label, e.g. "policy" or a
  // parameter name. FNV-1a over the bytes, then mixed with the parent key.
  RngStream child(std::string_view label) const {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : label) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return RngStream(FromKey{}, mix(key_ ^ mix(h)));
  }

  uint64_t next_u64() { return mix(key_ + (++counter_) * kGolden); }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // (0, 1]
  double uniform_pos() { return double((next_u64() >> 11) + 1) * 0x1.0p-53; }

  // Box-Muller; always consumes exactly two raw draws.
  double normal() {
    double u1 = uniform_pos();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Inclusive on both ends.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = uint64_t(hi - lo) + 1;
    return lo + int64_t(next_u64() % span);
  }

  // Inverse-CDF walk; probs need not be exactly normalised.
  int categorical(std::span<const double> probs) {
    double total = 0.0;
    for (double p : probs) total += p;
    double u = uniform() * total;
    double acc = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return int(i);
    }
    return int(probs.size()) - 1;
  }

  uint64_t key() const { return key_; }

 private:
  struct FromKey {};
  RngStream(FromKey, uint64_t key) : key_(key) {}

  static uint64_t mix(uint64_t x) {
    // splitmix64 finaliser
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  }

  static constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ull;
  static constexpr uint64_t kKeyInit = 0xD1B54A32D192ED03ull;

  uint64_t key_;
  uint64_t counter_ = 0;
};

}  // namespace dmkit
