#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace mmgen {

// Deterministic across platforms: the mt19937_64 engine is fully specified by
// the standard, while std::*_distribution is not, so every mapping from raw
// engine output to a range is done explicitly here.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1), 53-bit mantissa
    double next_unit() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // unbiased integer in [0, n); n == 0 yields 0
    uint64_t next_below(uint64_t n) {
        if (n <= 1) {
            return 0;
        }
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x = gen_();
        while (x >= limit) {
            x = gen_();
        }
        return x % n;
    }

    // standard normal via Box-Muller with a cached spare
    double next_gauss() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = next_unit();
        const double u2 = next_unit();
        const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
        const double a = 6.283185307179586476925287 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Independent stream seed for a named purpose ("init", "drop", "dropout", ...)
// so that consumers of one stream cannot perturb another.
uint64_t derive_seed(uint64_t seed, std::string_view purpose);

}  // namespace mmgen
