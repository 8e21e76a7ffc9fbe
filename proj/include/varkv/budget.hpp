#pragma once

#include <cmath>
#include <cstdint>

#include "varkv/errors.hpp"

namespace varkv {

// Asymmetric cache budget split: avg = alpha * contextual + (1 - alpha) * structural.
// Budgets are floored so the weighted average never exceeds the target.
struct BudgetPlan {
    std::int64_t avg_budget = 0;
    double alpha = 0.0;
    std::int64_t contextual = 0; // B_C
    std::int64_t structural = 0; // B_S
    double ratio = 1.0;          // B_S / B_C target

    bool weighted_sum_ok() const {
        return alpha * double(contextual) + (1.0 - alpha) * double(structural) <=
               double(avg_budget) + 1e-9;
    }
};

inline BudgetPlan allocate_budgets(std::int64_t avg_budget, double alpha, double ratio) {
    if (avg_budget < 2) throw config_error("allocate_budgets: average budget must be >= 2");
    if (!(alpha > 0.0 && alpha < 1.0)) throw config_error("allocate_budgets: alpha must lie in (0,1)");
    if (ratio < 1.0) throw config_error("allocate_budgets: ratio must be >= 1");
    double denom = alpha + (1.0 - alpha) * ratio;
    std::int64_t b_c = std::int64_t(std::floor(double(avg_budget) / denom));
    std::int64_t b_s = std::int64_t(std::floor(ratio * double(avg_budget) / denom));
    if (b_c < 1) throw config_error("allocate_budgets: contextual budget rounds to zero");
    BudgetPlan plan;
    plan.avg_budget = avg_budget;
    plan.alpha = alpha;
    plan.contextual = b_c;
    plan.structural = b_s;
    plan.ratio = ratio;
    return plan;
}

// Direct mode: the contextual budget is pinned by the caller (e.g. as a
// fraction of the total token count) and the structural budget absorbs the
// remaining average.
inline BudgetPlan allocate_budgets_direct(std::int64_t avg_budget, double alpha,
                                          std::int64_t contextual) {
    if (avg_budget < 2) throw config_error("allocate_budgets: average budget must be >= 2");
    if (!(alpha > 0.0 && alpha < 1.0)) throw config_error("allocate_budgets: alpha must lie in (0,1)");
    if (contextual < 1) throw config_error("allocate_budgets: contextual budget must be >= 1");
    std::int64_t b_s =
        std::int64_t(std::floor((double(avg_budget) - alpha * double(contextual)) / (1.0 - alpha)));
    if (b_s < 1) throw config_error("allocate_budgets: structural budget rounds below 1");
    if (b_s < contextual)
        throw config_error("allocate_budgets: contextual budget exceeds structural budget");
    BudgetPlan plan;
    plan.avg_budget = avg_budget;
    plan.alpha = alpha;
    plan.contextual = contextual;
    plan.structural = b_s;
    plan.ratio = double(b_s) / double(contextual);
    return plan;
}

} // namespace varkv
