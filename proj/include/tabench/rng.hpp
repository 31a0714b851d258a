#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace tabench {

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Stream tags. Values are part of the reproducibility contract; never renumber.
enum class Stream : std::uint64_t {
  dataset = 1,
  init_weights = 2,
  shuffle = 3,
  perturbation_init = 4,
  augment_un = 10,
  augment_dp = 11,
  augment_di2 = 12,
  augment_ti = 13,
  augment_si = 14,
  augment_admix = 15,
  averaged_copy = 20,
  vt_noise = 21,
  fia_mask = 22,
  ensemble_pick = 23,
  benign_select = 30,
  lgv = 31,
};

/// Counter-based generator. The stream is a pure function of the key words, so
/// work may be split across threads in any order without changing draws.
///
/// key   = fold(0x243F6A8885A308D3, k_i) with fold(h, k) = mix64(h ^ k)
/// u64_n = mix64(key + n * 0x9E3779B97F4A7C15), n = 1, 2, ...
/// uniform()  = (u64 >> 11) * 2^-53
/// below(m)   = high 64 bits of u64 * m
class CounterRng {
 public:
  CounterRng(std::initializer_list<std::uint64_t> key) noexcept {
    std::uint64_t h = 0x243F6A8885A308D3ULL;
    for (auto k : key) h = mix64(h ^ k);
    key_ = h;
  }

  std::uint64_t next_u64() noexcept {
    ++counter_;
    return mix64(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  std::uint64_t below(std::uint64_t m) noexcept {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * m) >> 64);
  }

  // Inclusive on both ends.
  long uniform_int(long lo, long hi) noexcept {
    return lo + static_cast<long>(below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  double normal() noexcept {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

inline CounterRng make_rng(std::uint64_t seed, Stream stream, std::uint64_t a = 0,
                           std::uint64_t b = 0, std::uint64_t c = 0) noexcept {
  return CounterRng{seed, static_cast<std::uint64_t>(stream), a, b, c};
}

}  // namespace tabench
