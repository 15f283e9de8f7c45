#include "mmgen/rng.hpp"

namespace mmgen {

namespace {

uint64_t splitmix64(uint64_t& state) {
    state += 0x9E3779B97F4A7C15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace

uint64_t derive_seed(uint64_t seed, std::string_view purpose) {
    uint64_t state = seed;
    uint64_t out = splitmix64(state);
    for (unsigned char c : purpose) {
        state ^= static_cast<uint64_t>(c);
        out ^= splitmix64(state);
    }
    return out;
}

}  // namespace mmgen
