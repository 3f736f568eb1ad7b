#pragma once

#include <cstdint>
#include <limits>
#include <span>

namespace flowopd {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Seed for stream (a, b) under `master`. Serial and parallel sampling both
/// use this, so execution order never changes the noise.
inline constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a,
                                           std::uint64_t b = 0) {
    return splitmix64(splitmix64(splitmix64(master) ^ (a + 0x632BE59BD9B4E019ULL)) ^
                      (b + 0x85157AF5ULL));
}

/// Counter-based generator. Normal draws use Box-Muller on top of splitmix64
/// so sequences are identical across standard libraries.
class Rng {
public:
    using result_type = std::uint64_t;

    explicit Rng(std::uint64_t seed) : state_(seed) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : (*this)() % n; }
    double normal();
    void fill_normal(std::span<double> out) {
        for (double& v : out) v = normal();
    }

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// FNV-1a over raw bytes.
std::uint64_t fnv1a(std::span<const unsigned char> bytes,
                    std::uint64_t h = 0xCBF29CE484222325ULL);

}  // namespace flowopd
