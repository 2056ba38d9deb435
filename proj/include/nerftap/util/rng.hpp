#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace nerftap {

/// Derives an independent 64-bit seed for the named stream of a run seed.
std::uint64_t stream_seed(std::uint64_t seed, std::string_view stream, std::uint64_t index = 0);

/// Seeded generator. Uniform and normal draws are computed from raw engine output
/// so that sequences do not depend on the standard library's distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  static Rng stream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0) {
    return Rng(stream_seed(seed, name, index));
  }

  std::uint64_t next() { return engine_(); }
  double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  double gamma(double shape);
  /// Beta(a, b) through the gamma ratio X / (X + Y).
  double beta(double a, double b);

  template <class T>
  void fill_normal(std::vector<T>& out, double stddev) {
    for (T& v : out) v = static_cast<T>(normal() * stddev);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace nerftap
