#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "varkv/budget.hpp"
#include "varkv/errors.hpp"
#include "varkv/matrix.hpp"
#include "varkv/schedule.hpp"

namespace varkv {

enum class HeadType { Untyped, Contextual, Structural };

// One (layer, head) slice of the KV cache. origin keeps the global token
// index of every cached row, ascending; eviction selects a subset and never
// reorders, so monotonicity is preserved across arbitrary compression.
struct CachePartition {
    Matrix keys;   // rows x head_dim
    Matrix values; // rows x head_dim
    std::vector<std::int64_t> origin;
    HeadType type = HeadType::Untyped;
    int last_step = 0; // last generation step appended

    std::size_t rows() const { return keys.rows; }

    // Keep exactly the given cache rows (ascending indices).
    void retain(const std::vector<std::size_t>& keep) {
        Matrix k(keep.size(), keys.cols), v(keep.size(), values.cols);
        std::vector<std::int64_t> org(keep.size());
        for (std::size_t i = 0; i < keep.size(); ++i) {
            std::size_t src = keep[i];
            for (std::size_t d = 0; d < keys.cols; ++d) {
                k(i, d) = keys(src, d);
                v(i, d) = values(src, d);
            }
            org[i] = origin[src];
        }
        keys = std::move(k);
        values = std::move(v);
        origin = std::move(org);
    }
};

// Per-(layer, head) KV storage with scale bookkeeping and peak accounting.
// Partitions are independent; a mutation touches exactly one of them.
class KvCacheStore {
public:
    KvCacheStore() = default;
    KvCacheStore(int layers, int heads, std::size_t head_dim)
        : layers_(layers), heads_(heads), head_dim_(head_dim),
          parts_(std::size_t(layers) * std::size_t(heads)) {}

    int layers() const { return layers_; }
    int heads() const { return heads_; }
    std::size_t head_dim() const { return head_dim_; }

    CachePartition& partition(int layer, int head) { return parts_[index(layer, head)]; }
    const CachePartition& partition(int layer, int head) const { return parts_[index(layer, head)]; }

    void set_head_type(int layer, int head, HeadType t) { partition(layer, head).type = t; }

    // Append the step-k keys/values of one head. Origin positions are the
    // global token indices T_{k-1} .. T_k - 1.
    void append(int layer, int head, const Matrix& k_new, const Matrix& v_new,
                const ScaleSchedule& sched, int step_k) {
        CachePartition& p = partition(layer, head);
        std::int64_t n_k = sched.n(step_k);
        if (k_new.rows != v_new.rows || std::int64_t(k_new.rows) != n_k ||
            k_new.cols != head_dim_ || v_new.cols != head_dim_)
            throw state_error("append: key/value shape does not match the step");
        if (p.last_step >= step_k)
            throw state_error("append: step " + std::to_string(step_k) + " already appended");
        std::size_t old_rows = p.rows();
        Matrix k(old_rows + k_new.rows, head_dim_), v(old_rows + v_new.rows, head_dim_);
        std::copy(p.keys.data.begin(), p.keys.data.end(), k.data.begin());
        std::copy(k_new.data.begin(), k_new.data.end(), k.data.begin() + std::ptrdiff_t(old_rows * head_dim_));
        std::copy(p.values.data.begin(), p.values.data.end(), v.data.begin());
        std::copy(v_new.data.begin(), v_new.data.end(), v.data.begin() + std::ptrdiff_t(old_rows * head_dim_));
        p.keys = std::move(k);
        p.values = std::move(v);
        std::int64_t base = step_k == 1 ? 0 : sched.t(step_k - 1);
        for (std::int64_t i = 0; i < n_k; ++i) p.origin.push_back(base + i);
        p.last_step = step_k;
        total_rows_ += std::size_t(n_k);
        sample_peak();
    }

    // Budget cap for a typed head; compression triggers strictly above it.
    bool needs_compression(int layer, int head, const BudgetPlan& plan) const {
        const CachePartition& p = partition(layer, head);
        return std::int64_t(p.rows()) > budget_of(p.type, plan);
    }

    static std::int64_t budget_of(HeadType t, const BudgetPlan& plan) {
        if (t == HeadType::Contextual) return plan.contextual;
        if (t == HeadType::Structural) return plan.structural;
        throw state_error("budget_of: head has no type assigned");
    }

    // Call after mutating a partition in place (compression).
    void note_rows_changed(std::size_t before, std::size_t after) {
        total_rows_ = total_rows_ - before + after;
        sample_peak();
    }

    std::size_t total_entries() const { return total_rows_; }
    std::size_t peak_entries() const { return peak_rows_; }

private:
    std::size_t index(int layer, int head) const {
        if (layer < 0 || layer >= layers_ || head < 0 || head >= heads_)
            throw state_error("cache partition index out of range");
        return std::size_t(layer) * std::size_t(heads_) + std::size_t(head);
    }
    void sample_peak() {
        if (total_rows_ > peak_rows_) peak_rows_ = total_rows_;
    }

    int layers_ = 0;
    int heads_ = 0;
    std::size_t head_dim_ = 0;
    std::vector<CachePartition> parts_;
    std::size_t total_rows_ = 0;
    std::size_t peak_rows_ = 0;
};

} // namespace varkv
