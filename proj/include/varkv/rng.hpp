#pragma once

#include <algorithm>
#include <cstdint>
#include <utility>
#include <vector>

namespace varkv {

// Deterministic splitmix64 stream. We avoid <random> distributions on purpose:
// their output is implementation-defined, and every value in this project must
// be reproducible from a seed alone.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double next_unit() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [-1, 1).
    double next_symmetric() { return 2.0 * next_unit() - 1.0; }

    // Uniform integer in [0, n).
    std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

private:
    std::uint64_t state_;
};

// Key derivation for independent substreams. Feeding each tag through the
// mixer keeps streams decorrelated regardless of call order.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a,
                              std::uint64_t b = 0, std::uint64_t c = 0) {
    Rng r(seed);
    std::uint64_t s = r.next_u64();
    s ^= Rng(a ^ 0xa0761d6478bd642full).next_u64() + 0x9e3779b97f4a7c15ull;
    s ^= Rng(b ^ 0xe7037ed1a0b428dbull).next_u64() * 0xff51afd7ed558ccdull;
    s ^= Rng(c ^ 0x8ebc6af09c88c6e3ull).next_u64() * 0xc4ceb9fe1a85ec53ull;
    return Rng(s).next_u64();
}

// k distinct indices from [0, n), returned ascending. Partial Fisher-Yates.
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    if (k > n) k = n;
    for (std::size_t i = 0; i < k; ++i) {
        std::size_t j = i + std::size_t(rng.next_below(n - i));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    std::sort(pool.begin(), pool.end());
    return pool;
}

} // namespace varkv
