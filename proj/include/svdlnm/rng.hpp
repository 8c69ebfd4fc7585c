#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace svdlnm {

/// SplitMix64 step; used to mix seed components into independent streams.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives a child seed from a master seed and up to two stream labels.
/// Runs of a study are keyed as derive_seed(master, run_index, setting).
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a = 0,
                                 std::uint64_t b = 0) {
  std::uint64_t s = master;
  std::uint64_t h = splitmix64(s);
  s ^= a * 0xff51afd7ed558ccdULL;
  h ^= splitmix64(s);
  s ^= b * 0xc4ceb9fe1a85ec53ULL;
  h ^= splitmix64(s);
  return h;
}

/// Seeded random stream. Normal variates use an explicit Box-Muller pair so
/// draw sequences depend only on the engine state, not on library internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() {
    // (0,1): never returns 0, safe for log().
    return (static_cast<double>(engine_()) + 0.5) *
           (1.0 / 18446744073709551616.0);
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  long poisson(double mu) {
    std::poisson_distribution<long> d(mu);
    return d(engine_);
  }

  double gamma(double shape, double scale) {
    std::gamma_distribution<double> d(shape, scale);
    return d(engine_);
  }

  /// Negative binomial with mean mu and dispersion phi
  /// (Var = mu + mu^2/phi), drawn as a gamma-Poisson mixture.
  long neg_binomial(double mu, double phi) {
    double lambda = gamma(phi, mu / phi);
    return poisson(lambda);
  }

  std::uint64_t next_raw() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace svdlnm
