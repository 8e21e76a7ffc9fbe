#pragma once

#include <cstdint>
#include <vector>

#include "varkv/errors.hpp"

namespace varkv {

// Token schedule of a next-scale run with factor a and K steps:
// step k emits N_k = a^(2(k-1)) tokens, the cache grows to
// T_k = (a^(2k) - 1) / (a^2 - 1). Steps are 1-based throughout.
struct ScaleSchedule {
    std::int64_t factor_a = 2;
    int num_scales = 1;
    std::vector<std::int64_t> tokens_per_scale; // N_1 .. N_K
    std::vector<std::int64_t> cumulative;       // T_1 .. T_K

    std::int64_t n(int k) const { return tokens_per_scale[std::size_t(k - 1)]; }
    std::int64_t t(int k) const { return cumulative[std::size_t(k - 1)]; }
    std::int64_t total() const { return cumulative.back(); }

    // Scale that owns global token position p (1-based scale index).
    int scale_of(std::int64_t p) const {
        for (int k = 1; k <= num_scales; ++k)
            if (p < t(k)) return k;
        throw state_error("scale_of: position beyond schedule");
    }
};

namespace detail {
inline std::int64_t checked_mul(std::int64_t a, std::int64_t b, const char* what) {
    std::int64_t out;
    if (__builtin_mul_overflow(a, b, &out)) throw config_error(std::string(what) + ": overflow");
    return out;
}
inline std::int64_t checked_add(std::int64_t a, std::int64_t b, const char* what) {
    std::int64_t out;
    if (__builtin_add_overflow(a, b, &out)) throw config_error(std::string(what) + ": overflow");
    return out;
}
} // namespace detail

inline ScaleSchedule build_schedule(std::int64_t a, int num_scales) {
    if (a < 2) throw config_error("build_schedule: factor must be >= 2");
    if (num_scales < 1) throw config_error("build_schedule: need at least one scale");
    ScaleSchedule s;
    s.factor_a = a;
    s.num_scales = num_scales;
    std::int64_t a2 = detail::checked_mul(a, a, "build_schedule");
    std::int64_t n_k = 1;
    std::int64_t t_k = 0;
    for (int k = 1; k <= num_scales; ++k) {
        if (k > 1) n_k = detail::checked_mul(n_k, a2, "build_schedule");
        t_k = detail::checked_add(t_k, n_k, "build_schedule");
        s.tokens_per_scale.push_back(n_k);
        s.cumulative.push_back(t_k);
    }
    // cross-check against the closed form (a^(2K) - 1) / (a^2 - 1)
    std::int64_t pow = 1;
    for (int k = 0; k < num_scales; ++k) pow = detail::checked_mul(pow, a2, "build_schedule");
    if ((pow - 1) % (a2 - 1) != 0 || (pow - 1) / (a2 - 1) != t_k)
        throw state_error("build_schedule: closed form disagrees with summation");
    return s;
}

} // namespace varkv
