#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace shardweave {

/// Counter-based deterministic random stream.
///
/// Every draw is a pure function of (seed, stream id, counter), so streams can
/// be checkpointed by recording the counter and replayed bit-exactly on any
/// host. The generator is splitmix64 over a mixed key.
class RngStream {
 public:
  RngStream() = default;
  RngStream(std::uint64_t seed, const std::string& name)
      : seed_(seed), stream_id_(fnv1a(name)), counter_(0) {}
  RngStream(std::uint64_t seed, std::uint64_t stream_id, std::uint64_t counter)
      : seed_(seed), stream_id_(stream_id), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) { counter_ = c; }

  std::uint64_t next_u64() { return draw(counter_++); }

  /// Uniform in [0, 1).
  double next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller (consumes two draws).
  double next_normal() {
    double u1 = next_uniform();
    double u2 = next_uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double pi = 3.14159265358979323846;
    return r * std::cos(2.0 * pi * u2);
  }

  /// Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  /// Derive an independent child stream; does not advance this stream.
  RngStream child(const std::string& name) const {
    return RngStream(mix(seed_ ^ stream_id_), name);
  }
  RngStream child(std::uint64_t index) const {
    return RngStream(mix(seed_ ^ stream_id_), mix(index + 0x9e3779b97f4a7c15ull), 0);
  }

  /// Seeded in-place Fisher-Yates shuffle of indices [0, n).
  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(perm[i - 1], perm[j]);
    }
    return perm;
  }

  static std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    return h;
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t draw(std::uint64_t counter) const {
    return mix(mix(seed_ ^ mix(stream_id_)) + counter);
  }

  std::uint64_t seed_ = 0;
  std::uint64_t stream_id_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace shardweave
