#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace mmtryon {

// splitmix64 — used to derive independent stream seeds from (seed, id) pairs.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Deterministic random stream. Normal draws use Box-Muller with no cached
// spare so the whole state is the engine state (serializable as text).
class RandomStream {
public:
    explicit RandomStream(uint64_t seed = 0) : eng_(seed) {}

    // uniform in [0, 1)
    double uniform() {
        return (eng_() >> 11) * (1.0 / 9007199254740992.0);  // 53-bit mantissa
    }

    // standard normal
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // integer in [lo, hi)
    int64_t randint(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(uniform() * static_cast<double>(hi - lo));
    }

    // true with probability p
    bool bernoulli(double p) { return uniform() < p; }

    uint64_t raw() { return eng_(); }

    // Child stream independent of future draws from this one.
    RandomStream fork(uint64_t id) { return RandomStream(mix_seed(eng_(), id)); }

    std::string state() const {
        std::ostringstream os;
        os << eng_;
        return os.str();
    }
    void set_state(const std::string& s) {
        std::istringstream is(s);
        is >> eng_;
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace mmtryon
