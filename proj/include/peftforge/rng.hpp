#pragma once

#include <cstdint>

namespace peft {

/// Counter-based pseudo-random generator (splitmix64 core).
///
/// The entire toolkit routes randomness through this class so that a run is a
/// pure function of its seeds. std::random distributions are avoided on
/// purpose: their output is implementation-defined, which would break the
/// identical-seed/identical-stream contract across standard libraries.
class Rng {
  public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();

    /// Uniform in [0, 1).
    double uniform();
    /// Uniform in [lo, hi).
    double uniform(double lo, double hi);
    /// Zero-mean Gaussian with standard deviation sigma (Box-Muller).
    double normal(double sigma);
    bool bernoulli(double p);

    /// Derives an independent generator; same (seed, salt) gives the same child.
    Rng child(std::uint64_t salt) const;

    std::uint64_t seed() const { return seed_; }

  private:
    std::uint64_t seed_;
    std::uint64_t state_;
};

}  // namespace peft
