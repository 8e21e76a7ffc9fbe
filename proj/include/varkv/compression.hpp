#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "varkv/errors.hpp"
#include "varkv/kv_cache.hpp"
#include "varkv/matrix.hpp"
#include "varkv/rng.hpp"

namespace varkv {

enum class QueryStrategy { Uniform, Random, Init, Recent, Full };

// Cumulative attention mass per cached token, estimated from a small query
// subset. Scores index the cache rows at estimation time.
struct ImportanceScores {
    std::vector<double> scores;
    std::size_t observed_queries = 0;
    QueryStrategy strategy = QueryStrategy::Uniform;
};

// Which query rows to observe. Uniform uses the stride rule
// floor(i * n_q / n_obs), deduplicated; Random draws without replacement from
// a seeded stream. All strategies return ascending indices.
inline std::vector<std::size_t> select_query_rows(std::size_t n_q, std::size_t n_obs,
                                                  QueryStrategy strategy, std::uint64_t seed = 0) {
    if (n_obs < 1) throw config_error("select_query_rows: need at least one observed query");
    std::vector<std::size_t> rows;
    if (strategy == QueryStrategy::Full || n_obs >= n_q) {
        rows.resize(n_q);
        std::iota(rows.begin(), rows.end(), std::size_t(0));
        return rows;
    }
    switch (strategy) {
    case QueryStrategy::Uniform:
        for (std::size_t i = 0; i < n_obs; ++i) {
            std::size_t idx = i * n_q / n_obs;
            if (rows.empty() || rows.back() != idx) rows.push_back(idx);
        }
        break;
    case QueryStrategy::Random: {
        Rng rng(seed);
        rows = sample_without_replacement(n_q, n_obs, rng);
        break;
    }
    case QueryStrategy::Init:
        rows.resize(n_obs);
        std::iota(rows.begin(), rows.end(), std::size_t(0));
        break;
    case QueryStrategy::Recent:
        rows.resize(n_obs);
        std::iota(rows.begin(), rows.end(), n_q - n_obs);
        break;
    case QueryStrategy::Full:
        break;
    }
    return rows;
}

// Softmax(Q~ K^T) over the uncompressed cache for the sampled query rows.
inline Matrix subset_attention(const Matrix& queries, const Matrix& cache_keys, std::size_t n_obs,
                               QueryStrategy strategy, std::uint64_t seed = 0) {
    if (queries.rows < 1 || cache_keys.rows < 1)
        throw config_error("subset_attention: empty queries or cache");
    std::vector<std::size_t> rows = select_query_rows(queries.rows, n_obs, strategy, seed);
    Matrix sub(rows.size(), queries.cols);
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t d = 0; d < queries.cols; ++d) sub(i, d) = queries(rows[i], d);
    Matrix kt(cache_keys.cols, cache_keys.rows);
    for (std::size_t i = 0; i < cache_keys.rows; ++i)
        for (std::size_t d = 0; d < cache_keys.cols; ++d) kt(d, i) = cache_keys(i, d);
    return softmax_rows(matmul(sub, kt));
}

inline ImportanceScores cumulative_scores(const Matrix& att) {
    if (att.rows < 1) throw config_error("cumulative_scores: empty attention");
    ImportanceScores out;
    out.observed_queries = att.rows;
    out.scores.assign(att.cols, 0.0);
    for (std::size_t i = 0; i < att.rows; ++i)
        for (std::size_t j = 0; j < att.cols; ++j) out.scores[j] += att(i, j);
    return out;
}

// Indices of the k largest scores, ties broken toward the lowest index,
// returned ascending so downstream retention preserves cache order.
inline std::vector<std::size_t> top_k_indices(const std::vector<double>& scores, std::size_t k) {
    if (k > scores.size()) throw state_error("top_k_indices: k exceeds score count");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    std::partial_sort(idx.begin(), idx.begin() + std::ptrdiff_t(k), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (scores[a] != scores[b]) return scores[a] > scores[b];
                          return a < b;
                      });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

// Folds evicted tokens into their most similar retained neighbours.
// Assignment and weights use key cosine similarity clamped at zero; values
// are merged with the same weights. Weighted averages are convex, so merged
// entries stay within the coordinate ranges of their contributors.
inline void merge_evicted(Matrix& retained_k, Matrix& retained_v, const Matrix& evicted_k,
                          const Matrix& evicted_v) {
    if (retained_k.rows == 0) throw state_error("merge_evicted: nothing retained");
    if (evicted_k.rows == 0) return;
    const std::size_t dh = retained_k.cols;
    std::vector<double> retained_norm(retained_k.rows);
    for (std::size_t t = 0; t < retained_k.rows; ++t)
        retained_norm[t] = std::sqrt(detail::dot(retained_k.row(t), retained_k.row(t), dh));
    std::vector<double> weight_sum(retained_k.rows, 0.0);
    Matrix k_acc = retained_k;
    Matrix v_acc = retained_v;
    for (std::size_t e = 0; e < evicted_k.rows; ++e) {
        const double* ek = evicted_k.row(e);
        double en = std::sqrt(detail::dot(ek, ek, dh));
        std::size_t best = 0;
        double best_sim = -2.0;
        for (std::size_t t = 0; t < retained_k.rows; ++t) {
            double denom = en * retained_norm[t];
            double sim = denom > 0.0 ? detail::dot(ek, retained_k.row(t), dh) / denom : 0.0;
            if (sim > best_sim) {
                best_sim = sim;
                best = t;
            }
        }
        double w = best_sim > 0.0 ? best_sim : 0.0;
        if (w > 0.0) {
            for (std::size_t d = 0; d < dh; ++d) {
                k_acc(best, d) += w * ek[d];
                v_acc(best, d) += w * evicted_v(e, d);
            }
            weight_sum[best] += w;
        }
    }
    for (std::size_t t = 0; t < retained_k.rows; ++t) {
        if (weight_sum[t] == 0.0) continue;
        double inv = 1.0 / (1.0 + weight_sum[t]);
        for (std::size_t d = 0; d < dh; ++d) {
            retained_k(t, d) = k_acc(t, d) * inv;
            retained_v(t, d) = v_acc(t, d) * inv;
        }
    }
}

namespace detail {

inline std::vector<std::size_t> complement_indices(std::size_t n,
                                                   const std::vector<std::size_t>& keep) {
    std::vector<std::size_t> out;
    out.reserve(n - keep.size());
    std::size_t j = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (j < keep.size() && keep[j] == i) {
            ++j;
        } else {
            out.push_back(i);
        }
    }
    return out;
}

inline void retain_with_optional_merge(CachePartition& part, const std::vector<std::size_t>& keep,
                                       bool merge) {
    if (merge) {
        std::vector<std::size_t> gone = complement_indices(part.rows(), keep);
        Matrix rk(keep.size(), part.keys.cols), rv(keep.size(), part.values.cols);
        Matrix ek(gone.size(), part.keys.cols), ev(gone.size(), part.values.cols);
        for (std::size_t i = 0; i < keep.size(); ++i)
            for (std::size_t d = 0; d < part.keys.cols; ++d) {
                rk(i, d) = part.keys(keep[i], d);
                rv(i, d) = part.values(keep[i], d);
            }
        for (std::size_t i = 0; i < gone.size(); ++i)
            for (std::size_t d = 0; d < part.keys.cols; ++d) {
                ek(i, d) = part.keys(gone[i], d);
                ev(i, d) = part.values(gone[i], d);
            }
        merge_evicted(rk, rv, ek, ev);
        std::vector<std::int64_t> org(keep.size());
        for (std::size_t i = 0; i < keep.size(); ++i) org[i] = part.origin[keep[i]];
        part.keys = std::move(rk);
        part.values = std::move(rv);
        part.origin = std::move(org);
    } else {
        part.retain(keep);
    }
}

} // namespace detail

// f_C: keep the B_C tokens with the highest cumulative scores. At the final
// step evicted tokens may first be merged into the survivors.
inline void compress_contextual(CachePartition& part, const ImportanceScores& scores,
                                std::int64_t budget, bool final_step, bool merge_final_step) {
    if (scores.scores.size() != part.rows())
        throw state_error("compress_contextual: stale importance scores");
    if (std::int64_t(part.rows()) <= budget) return;
    std::vector<std::size_t> keep = top_k_indices(scores.scores, std::size_t(budget));
    detail::retain_with_optional_merge(part, keep, final_step && merge_final_step);
}

// f_S: always keep the init prefix (origin < n_init) and the whole current
// scale (last n_k rows); the remaining budget M picks intermediate tokens by
// score. When the budget cannot even cover init + current scale, the init
// prefix shrinks first; a budget below the current scale is a configuration
// error because the newest scale is never split.
inline void compress_structural(CachePartition& part, const ImportanceScores& scores,
                                std::int64_t budget, std::int64_t n_init, std::int64_t n_k) {
    if (scores.scores.size() != part.rows())
        throw state_error("compress_structural: stale importance scores");
    if (std::int64_t(part.rows()) <= budget) return;
    if (budget < n_k)
        throw config_error("compress_structural: budget " + std::to_string(budget) +
                           " cannot hold the current scale of " + std::to_string(n_k) + " tokens");
    const std::size_t rows = part.rows();
    std::size_t init_count = 0;
    while (init_count < rows && part.origin[init_count] < n_init) ++init_count;
    const std::size_t recent_begin = rows - std::size_t(n_k);
    std::int64_t m = budget - std::int64_t(init_count) - n_k;
    std::vector<std::size_t> keep;
    if (m < 0) {
        init_count = std::size_t(budget - n_k);
        m = 0;
    }
    for (std::size_t i = 0; i < init_count; ++i) keep.push_back(i);
    if (m > 0 && recent_begin > init_count) {
        std::vector<double> middle(scores.scores.begin() + std::ptrdiff_t(init_count),
                                   scores.scores.begin() + std::ptrdiff_t(recent_begin));
        std::size_t take = std::min<std::size_t>(std::size_t(m), middle.size());
        for (std::size_t i : top_k_indices(middle, take)) keep.push_back(init_count + i);
    }
    for (std::size_t i = recent_begin; i < rows; ++i) keep.push_back(i);
    part.retain(keep);
}

enum class BaselinePolicy { Positional, ScoreTopK, TopKMerge };

// Simplified single-budget baselines applied uniformly to every head:
// Positional keeps a sink prefix plus a sliding window; ScoreTopK keeps the
// global top-B by cumulative score; TopKMerge additionally merges evictions
// at every compression step.
inline void baseline_compress(CachePartition& part, const ImportanceScores& scores,
                              std::int64_t budget, BaselinePolicy policy, std::int64_t n_init) {
    if (std::int64_t(part.rows()) <= budget) return;
    const std::size_t rows = part.rows();
    switch (policy) {
    case BaselinePolicy::Positional: {
        std::size_t sink = std::size_t(std::min<std::int64_t>(n_init, budget));
        std::size_t window = std::size_t(budget) - sink;
        std::vector<std::size_t> keep;
        std::size_t init_count = 0;
        while (init_count < rows && part.origin[init_count] < std::int64_t(sink)) ++init_count;
        init_count = std::min(init_count, sink);
        for (std::size_t i = 0; i < init_count; ++i) keep.push_back(i);
        std::size_t window_begin = rows - std::min(rows - init_count, window);
        for (std::size_t i = std::max(window_begin, init_count); i < rows; ++i) keep.push_back(i);
        part.retain(keep);
        break;
    }
    case BaselinePolicy::ScoreTopK: {
        if (scores.scores.size() != rows)
            throw state_error("baseline_compress: stale importance scores");
        part.retain(top_k_indices(scores.scores, std::size_t(budget)));
        break;
    }
    case BaselinePolicy::TopKMerge: {
        if (scores.scores.size() != rows)
            throw state_error("baseline_compress: stale importance scores");
        std::vector<std::size_t> keep = top_k_indices(scores.scores, std::size_t(budget));
        detail::retain_with_optional_merge(part, keep, true);
        break;
    }
    }
}

} // namespace varkv
