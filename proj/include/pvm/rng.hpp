#pragma once

#include <cmath>
#include <cstdint>

namespace pvm {

namespace detail {
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}
}  // namespace detail

/// Counter-based pseudorandom generator: every draw is a pure function of
/// (seed, stream, counter), so datasets regenerate identically regardless of
/// platform or parallelism. Streams are cheap; give each sample its own.
class CounterRng {
public:
    CounterRng(uint64_t seed, uint64_t stream = 0)
        : key_(detail::splitmix64(seed ^ detail::splitmix64(stream * 0x9E3779B97F4A7C15ULL + 1))) {}

    uint64_t next_u64() {
        return detail::splitmix64(key_ ^ (counter_++ * 0xD1342543DE82EF95ULL + 0x2545F4914F6CDD1DULL));
    }

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi] inclusive.
    int uniform_int(int lo, int hi) {
        const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller (two fixed draws per pair).
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586477 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

private:
    uint64_t key_;
    uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace pvm
