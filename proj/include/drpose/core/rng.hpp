#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "drpose/core/common.hpp"

namespace drpose {

/// FNV-1a 64-bit hash, used to derive per-stage seed substreams.
inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

/// Deterministic random source. std::mt19937_64 is fully specified by the
/// standard; the distributions here are hand-rolled because the standard
/// library's distribution objects are implementation-defined and would break
/// byte-identical reruns across toolchains.
class Rng {
public:
    Rng() : gen_(0) {}
    explicit Rng(uint64_t seed) : gen_(seed) {}

    /// Substream for a named stage: seed XOR hash(stage name).
    static Rng for_stage(uint64_t global_seed, const std::string& stage) {
        return Rng(global_seed ^ fnv1a64(stage));
    }

    uint64_t u64() { return gen_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return double(gen_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in the inclusive range [lo, hi].
    int64_t uniform_int(int64_t lo, int64_t hi) {
        if (hi < lo) throw ValueError("uniform_int: empty range");
        uint64_t span = uint64_t(hi - lo) + 1;
        return lo + int64_t(gen_() % span);
    }

    /// Standard normal via Box-Muller (pairs cached).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform(); // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    std::string state() const {
        std::ostringstream os;
        os << gen_ << ' ' << (has_spare_ ? 1 : 0) << ' ';
        os.precision(17);
        os << spare_;
        return os.str();
    }

    void restore(const std::string& s) {
        std::istringstream is(s);
        int hs = 0;
        is >> gen_ >> hs >> spare_;
        if (!is) throw ValueError("Rng::restore: malformed state string");
        has_spare_ = hs != 0;
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace drpose
