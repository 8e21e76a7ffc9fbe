#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "varkv/engine.hpp"
#include "varkv/errors.hpp"
#include "varkv/schedule.hpp"

namespace varkv {
namespace oracle {

// Attention cost accounting for one head. Units are score entries: one per
// (query, cached row) pair of the QK^T product.
struct FlopReport {
    std::vector<std::int64_t> per_step;
    std::int64_t total = 0;
    std::int64_t formula_total = 0; // closed form; must equal total when defined
    std::int64_t overhead_total = 0;
    int first_compressed_step = 0; // k_s; 0 when compression never triggers
};

// Full-cache cost: sum of N_k * T_k, cross-checked against the closed form
// (1 - a^(2K) - a^(2K+2) + a^(4K+2)) / ((a^2-1)^2 (a^2+1)).
inline FlopReport vanilla_flops(std::int64_t a, int num_scales) {
    ScaleSchedule s = build_schedule(a, num_scales);
    FlopReport r;
    for (int k = 1; k <= num_scales; ++k) {
        std::int64_t step = detail::checked_mul(s.n(k), s.t(k), "vanilla_flops");
        r.per_step.push_back(step);
        r.total = detail::checked_add(r.total, step, "vanilla_flops");
    }
    std::int64_t a2 = a * a;
    std::int64_t p2k = 1;
    for (int i = 0; i < num_scales; ++i) p2k = detail::checked_mul(p2k, a2, "vanilla_flops");
    std::int64_t p2k2 = detail::checked_mul(p2k, a2, "vanilla_flops");
    std::int64_t p4k2 = detail::checked_mul(detail::checked_mul(p2k, p2k, "vanilla_flops"), a2,
                                            "vanilla_flops");
    std::int64_t numer = detail::checked_add(
        detail::checked_add(1 - p2k, -p2k2, "vanilla_flops"), p4k2, "vanilla_flops");
    std::int64_t denom = (a2 - 1) * (a2 - 1) * (a2 + 1);
    if (numer % denom != 0) throw state_error("vanilla_flops: closed form is not integral");
    r.formula_total = numer / denom;
    if (r.formula_total != r.total)
        throw state_error("vanilla_flops: closed form disagrees with summation");
    return r;
}

// Budgeted cost: sum of N_k * min(T_k, B), plus the compression overhead
// charged as n_obs * (B + N_k) for every step from the first one where the
// cache exceeds the budget.
inline FlopReport budgeted_flops(std::int64_t a, int num_scales, std::int64_t budget,
                             std::int64_t n_obs = 0) {
    if (budget < 1) throw config_error("budgeted_flops: budget must be >= 1");
    ScaleSchedule s = build_schedule(a, num_scales);
    FlopReport r;
    for (int k = 1; k <= num_scales; ++k) {
        std::int64_t effective = std::min(s.t(k), budget);
        std::int64_t step = detail::checked_mul(s.n(k), effective, "budgeted_flops");
        r.per_step.push_back(step);
        r.total = detail::checked_add(r.total, step, "budgeted_flops");
        if (s.t(k) > budget) {
            if (r.first_compressed_step == 0) r.first_compressed_step = k;
            if (n_obs > 0)
                r.overhead_total = detail::checked_add(
                    r.overhead_total, detail::checked_mul(n_obs, budget + s.n(k), "budgeted_flops"),
                    "budgeted_flops");
        }
    }
    r.formula_total = r.total;
    return r;
}

// Reference Top-K: full stable sort descending by (score, -index), take the
// first k, return ascending. Kept independent of the partial-sort path it
// checks.
inline std::vector<std::size_t> naive_topk(const std::vector<double>& scores, std::size_t k) {
    if (k > scores.size()) throw state_error("naive_topk: k exceeds score count");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t x, std::size_t y) { return scores[x] > scores[y]; });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

// Ground truth for divergence metrics: a generation with no compression hook.
inline GenerationResult full_attention_reference(const SyntheticModel& model,
                                                 const ScaleSchedule& sched,
                                                 std::uint64_t run_seed, int n_threads = 0,
                                                 bool want_final_attention = false) {
    EngineOptions opts;
    opts.n_threads = n_threads;
    opts.want_final_attention = want_final_attention;
    return run_generation(model, sched, run_seed, opts);
}

} // namespace oracle
} // namespace varkv
