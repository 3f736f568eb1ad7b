#include "flowopd/random.hpp"

#include <cmath>
#include <numbers>

namespace flowopd {

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // u1 in (0, 1] keeps the log finite.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t h) {
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace flowopd
