#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace camo {

// Error taxonomy shared by all modules. The CLI maps these onto exit codes
// (2 = validation, 3 = not ready / missing artifact, 4 = numerical failure).
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NotReadyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct LoadError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// splitmix64 finalizer; used to derive independent seeds.
inline uint64_t mix_bits(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) { return mix_bits(a ^ mix_bits(b)); }

// Deterministic RNG. The transformation from raw 64-bit draws to doubles is
// pinned here (rather than left to std:: distributions, whose output is
// implementation-defined) so identical seeds give identical streams across
// toolchains.
class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next() { return gen_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int uniform_int(int n) {
        if (n <= 0) throw ValidationError("Rng::uniform_int: n must be positive");
        return static_cast<int>(uniform() * static_cast<double>(n)) % n;
    }

    // Box-Muller; one gaussian per call, two uniform draws consumed.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(2.0 * M_PI * u2);
    }

  private:
    std::mt19937_64 gen_;
};

}  // namespace camo
