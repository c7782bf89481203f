#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace ecg {

/// Counter-based Philox4x32-10 generator.
///
/// A stream is fully identified by (seed, stream id); every draw increments a
/// 64-bit block counter. Distributions are implemented here rather than taken
/// from <random> so that draws are identical across standard libraries.
class Rng {
 public:
  static constexpr std::string_view kAlgorithm = "philox4x32-10";

  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0);

  std::uint32_t next_u32();
  std::uint64_t next_u64();

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in the closed range [lo, hi]; unbiased (rejection).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  /// Standard normal via Box-Muller.
  double normal();
  bool bernoulli(double p);

  /// Independent generator keyed by this stream and `id`. Does not advance *this.
  Rng substream(std::uint64_t id) const;
  Rng substream(std::string_view name) const;

  /// k distinct indices from [0, n), in draw order (partial Fisher-Yates).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

  template <class T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i - 1)));
      std::swap(items[i - 1], items[j]);
    }
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

 private:
  void refill();

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int used_ = 4;
};

/// One Philox4x32 block with 10 rounds.
std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key);

/// SplitMix64 finalizer; used to derive keys and hash names.
std::uint64_t mix64(std::uint64_t x);
/// FNV-1a 64-bit hash.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace ecg
