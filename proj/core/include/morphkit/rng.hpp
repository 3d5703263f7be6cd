#ifndef MORPHKIT_RNG_HPP
#define MORPHKIT_RNG_HPP

#include <cstdint>

namespace morphkit {

// Counter-based generator (splitmix64 over an incrementing counter).
// Used everywhere randomness is needed so that runs are bitwise
// reproducible across platforms and worker counts; std::uniform_*
// distributions are not portable.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) {
        return lo + (hi - lo) * next_double();
    }

    // Uniform integer in [0, n), unbiased by rejection.
    std::uint64_t next_below(std::uint64_t n) {
        if (n == 0) return 0;
        std::uint64_t threshold = (0ULL - n) % n;
        for (;;) {
            std::uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    // Derives an independent stream, e.g. one per restart or per sample.
    static Rng derive(std::uint64_t seed, std::uint64_t stream) {
        Rng mix(seed ^ (0x517cc1b727220a95ULL * (stream + 1)));
        Rng out(mix.next_u64());
        return out;
    }

private:
    std::uint64_t state_;
};

}  // namespace morphkit

#endif
