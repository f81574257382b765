#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace mtds {

/// Portable pseudo-random source.
///
/// Wraps std::mt19937_64 (whose output sequence is fixed by the standard) and
/// does its own conversion to doubles and normals, so a seed reproduces the
/// same draws on every conforming platform. Independent streams are derived
/// with splitmix64(seed, stream), which is what `split` uses.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(mix(seed)) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on the open interval (0, 1), 53-bit resolution.
  double uniform() {
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Marsaglia polar method; the spare deviate is cached.
  double normal();

  // Index drawn from normalized probabilities by inversion.
  std::size_t categorical(std::span<const double> probs);

  // Child generator for stream `stream`; does not advance this generator.
  Rng split(std::uint64_t stream) const {
    return Rng(mix(seed_ ^ mix(stream + 0x9E3779B97F4A7C15ULL)));
  }

  static std::uint64_t mix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace mtds
