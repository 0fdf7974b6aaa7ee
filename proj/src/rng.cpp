#include "advspde/rng.hpp"

namespace advspde {

std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t stream_key(std::uint64_t seed, std::uint64_t stream, std::uint64_t step) noexcept {
    return mix64(mix64(mix64(seed) ^ stream) ^ (step * 0xd1b54a32d192ed03ULL));
}

Vector standard_normal(std::uint64_t key, int n) {
    std::mt19937_64 engine(key);
    std::normal_distribution<double> normal;
    Vector z(n);
    for (int i = 0; i < n; ++i) z[i] = normal(engine);
    return z;
}

Vector uniform01(std::uint64_t key, int n) {
    std::mt19937_64 engine(key);
    std::uniform_real_distribution<double> uniform;
    Vector u(n);
    for (int i = 0; i < n; ++i) u[i] = uniform(engine);
    return u;
}

Vector rademacher(std::uint64_t key, int n) {
    std::mt19937_64 engine(key);
    Vector z(n);
    std::uint64_t bits = 0;
    for (int i = 0; i < n; ++i) {
        if (i % 64 == 0) bits = engine();
        z[i] = (bits >> (i % 64)) & 1U ? 1.0 : -1.0;
    }
    return z;
}

}  // namespace advspde
