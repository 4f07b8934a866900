#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace fdsim {

// Counter-based splittable PRNG (splitmix64 core).
//
// Every consumer derives its own stream from (master seed, component label,
// id, round), so the numbers a worker draws never depend on how many other
// workers ran before it or on thread scheduling. Streams are value types and
// cheap to copy.
class SplitRng {
 public:
  explicit SplitRng(std::uint64_t seed) : key_(seed), counter_(0) {}

  // Derives an independent child stream. Children depend only on the parent
  // key, not on how far the parent has been consumed.
  SplitRng child(std::string_view component, std::uint64_t id = 0,
                 std::uint64_t round = 0) const {
    std::uint64_t k = key_;
    k = mix(k ^ fnv1a(component));
    k = mix(k ^ (0x9e3779b97f4a7c15ULL * (id + 1)));
    k = mix(k ^ (0xbf58476d1ce4e5b9ULL * (round + 1)));
    return SplitRng(k);
  }

  std::uint64_t next_u64() {
    return mix(key_ + (++counter_) * 0x9e3779b97f4a7c15ULL);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return std::ldexp(static_cast<double>(next_u64() >> 11), -53); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // u1 in (0, 1] so the log is finite.
    double u1 = std::ldexp(static_cast<double>((next_u64() >> 11) + 1), -53);
    double u2 = uniform();
    double radius = std::sqrt(-2.0 * std::log(u1));
    double angle = 6.283185307179586476925286766559 * u2;
    spare_ = radius * std::sin(angle);
    have_spare_ = true;
    return radius * std::cos(angle);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, bound). bound must be positive.
  std::uint64_t next_below(std::uint64_t bound) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * bound) >> 64);
  }

  // Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(
                    next_below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static std::uint64_t fnv1a(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : text) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  std::uint64_t key_;
  std::uint64_t counter_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace fdsim
