#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <vector>

#include "varkv/kv_cache.hpp"
#include "varkv/matrix.hpp"
#include "varkv/model.hpp"
#include "varkv/rng.hpp"
#include "varkv/schedule.hpp"
#include "varkv/simd.hpp"

namespace varkv {

// Exact operation counters for one generation run.
//   score_units: attention score entries evaluated, one per (query, cached row)
//   av_units:    scalar multiplies in the A*V product
//   overhead_units: compression overhead charged per event as n_obs*(budget+N_k),
//                   the budget-model cost of subset attention
//   subset_score_units: raw subset-attention score entries actually computed
struct RunCounters {
    std::int64_t score_units = 0;
    std::int64_t av_units = 0;
    std::int64_t overhead_units = 0;
    std::int64_t subset_score_units = 0;
};

// One compression event, recorded for the trace.
struct CompressionEvent {
    int layer = 0;
    int head = 0;
    int step = 0;
    std::size_t rows_before = 0;
    std::size_t rows_after = 0;
    std::vector<std::int64_t> retained; // origin positions kept
};

struct StepRecord {
    int step = 0;
    std::int64_t n_k = 0;
    std::vector<std::size_t> rows_after; // per (layer, head), end of step
    std::vector<CompressionEvent> events;
    RunCounters step_counters; // deltas for this step alone
};

// Invoked per (layer, head) after the step's K/V were appended and before
// attention runs. The hook owns the decision to compress and the mutation of
// the partition; it must report row changes through `store`.
struct CompressionContext {
    KvCacheStore& store;
    CachePartition& part;
    const Matrix& queries; // N_k x head_dim, this head's projected queries
    int layer;
    int head;
    int step;
    bool final_step;
    const ScaleSchedule& sched;
    const PatternSpec* planted; // template for planted heads, else nullptr
    std::uint64_t run_seed;
    RunCounters& counters;
    CompressionEvent* event; // filled by the engine when tracing; may be null
};

using CompressionHook = std::function<void(CompressionContext&)>;

struct EngineOptions {
    CompressionHook hook;                    // empty: full cache, no compression
    const std::set<std::pair<int, int>>* masked_heads = nullptr;
    std::vector<HeadType> head_types;        // per (layer*heads + head); empty: untyped
    bool want_final_attention = false;       // materialize step-K attention maps
    bool want_all_attention = false;         // materialize every step (small runs)
    bool record_trace = false;
    int n_threads = 0;                       // 0: pick from hardware
    std::uint64_t run_seed = 0;              // forwarded to hooks (query sampling)
};

struct StepOutput {
    Matrix hidden;                       // N_k x model_dim
    std::vector<Matrix> attention;       // per (layer*heads + head) when requested
};

struct GenerationResult {
    Matrix final_hidden;
    std::vector<Matrix> final_attention; // per (layer, head) at step K
    RunCounters counters;
    std::vector<StepRecord> trace;
    std::size_t peak_entries = 0;
    std::size_t final_entries = 0;
    std::vector<std::size_t> final_rows;  // per (layer, head)
};

namespace detail {

inline int resolve_threads(int requested) {
    if (requested > 0) return requested;
    unsigned hw = std::thread::hardware_concurrency();
    return int(hw == 0 ? 1 : (hw > 8 ? 8 : hw));
}

// softmax(Q K^T) V over the cached rows, streaming one query row at a time.
// kt/vt are head_dim x rows (transposed cache) so the inner loops run over
// contiguous memory. Writes probabilities only when `probs` is non-null.
inline void attention_over_cache(const Matrix& queries, const std::vector<double>& kt,
                                 const std::vector<double>& vt, std::size_t cache_rows,
                                 Matrix& out, Matrix* probs, int n_threads) {
    const std::size_t dh = queries.cols;
    const std::size_t nq = queries.rows;
    const std::size_t big = 1u << 21;
    int threads = (nq * cache_rows > big) ? n_threads : 1;
    std::atomic<bool> bad{false};
    parallel_rows(nq, threads, [&](std::size_t lo, std::size_t hi, int) {
        std::vector<double> scores(cache_rows);
        for (std::size_t i = lo; i < hi; ++i) {
            const double* q = queries.row(i);
            for (std::size_t d = 0; d < dh; ++d)
                axpy(scores.data(), kt.data() + d * cache_rows, q[d], cache_rows, d == 0);
            double mx = max_of(scores.data(), cache_rows);
            double sum = exp_sub_sum(scores.data(), scores.data(), cache_rows, mx);
            if (!(sum > 0.0) || !std::isfinite(sum)) {
                bad.store(true);
                return;
            }
            double inv = 1.0 / sum;
            double* o = out.row(i);
            for (std::size_t d = 0; d < dh; ++d)
                o[d] = inv * dot(scores.data(), vt.data() + d * cache_rows, cache_rows);
            if (probs) {
                double* p = probs->row(i);
                for (std::size_t j = 0; j < cache_rows; ++j) p[j] = scores[j] * inv;
            }
        }
    });
    if (bad.load()) throw state_error("attention: non-finite softmax row");
}

inline void transpose_into(const Matrix& m, std::vector<double>& out) {
    out.resize(m.rows * m.cols);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t d = 0; d < m.cols; ++d) out[d * m.rows + i] = m(i, d);
}

} // namespace detail

// One generation step: per layer and head, project Q/K/V, append to the
// cache, run the compression hook, then attend over whatever the hook left
// cached. Head outputs are concatenated; masked heads contribute zeros.
inline StepOutput forward_step(const SyntheticModel& model, const ScaleSchedule& sched,
                               KvCacheStore& store, const Matrix& hidden_k, int step_k,
                               const EngineOptions& opts, RunCounters& counters,
                               StepRecord* record = nullptr) {
    const std::int64_t n_k = sched.n(step_k);
    if (std::int64_t(hidden_k.rows) != n_k || hidden_k.cols != model.model_dim)
        throw state_error("forward_step: hidden state shape does not match step " +
                          std::to_string(step_k));
    const bool want_maps = opts.want_all_attention ||
                           (opts.want_final_attention && step_k == sched.num_scales);
    const int threads = detail::resolve_threads(opts.n_threads);
    const bool final_step = step_k == sched.num_scales;

    StepOutput out;
    if (want_maps) out.attention.resize(std::size_t(model.layers) * std::size_t(model.heads));

    Matrix layer_in = hidden_k;
    std::vector<double> kt, vt;
    for (int l = 0; l < model.layers; ++l) {
        Matrix layer_out(std::size_t(n_k), model.model_dim);
        for (int h = 0; h < model.heads; ++h) {
            CachePartition& part = store.partition(l, h);
            if (part.last_step != step_k - 1)
                throw state_error("forward_step: cache is at step " +
                                  std::to_string(part.last_step) + ", expected " +
                                  std::to_string(step_k - 1));
            const auto& w = model.head(l, h);
            Matrix q = matmul(layer_in, w.w_q);
            Matrix k = matmul(layer_in, w.w_k);
            Matrix v = matmul(layer_in, w.w_v);
            store.append(l, h, k, v, sched, step_k);

            const PatternSpec* planted = model.planted_for(l, h);
            if (opts.hook) {
                std::size_t before = part.rows();
                CompressionEvent ev;
                CompressionContext ctx{store,       part,    q,       l,       h,    step_k,
                                       final_step,  sched,   planted, opts.run_seed,
                                       counters,    record ? &ev : nullptr};
                opts.hook(ctx);
                if (part.rows() != before) {
                    store.note_rows_changed(before, part.rows());
                    if (record) {
                        ev.layer = l;
                        ev.head = h;
                        ev.step = step_k;
                        ev.rows_before = before;
                        ev.rows_after = part.rows();
                        ev.retained = part.origin;
                        record->events.push_back(std::move(ev));
                    }
                }
            }

            const std::size_t rows = part.rows();
            Matrix head_out(std::size_t(n_k), model.head_dim);
            Matrix* probs = nullptr;
            if (want_maps) {
                out.attention[std::size_t(l) * std::size_t(model.heads) + std::size_t(h)] =
                    Matrix(std::size_t(n_k), rows);
                probs = &out.attention[std::size_t(l) * std::size_t(model.heads) + std::size_t(h)];
            }
            if (planted) {
                Matrix att = planted_attention(*planted, sched, step_k, std::size_t(n_k), part.origin);
                head_out = matmul(att, part.values);
                if (probs) *probs = std::move(att);
            } else {
                detail::transpose_into(part.keys, kt);
                detail::transpose_into(part.values, vt);
                detail::attention_over_cache(q, kt, vt, rows, head_out, probs, threads);
            }
            counters.score_units += n_k * std::int64_t(rows);
            counters.av_units += n_k * std::int64_t(rows) * std::int64_t(model.head_dim);

            const bool masked = opts.masked_heads && opts.masked_heads->count({l, h}) > 0;
            for (std::size_t i = 0; i < std::size_t(n_k); ++i) {
                double* dst = layer_out.row(i) + std::size_t(h) * model.head_dim;
                if (masked) {
                    for (std::size_t d = 0; d < model.head_dim; ++d) dst[d] = 0.0;
                } else {
                    const double* src = head_out.row(i);
                    for (std::size_t d = 0; d < model.head_dim; ++d) dst[d] = src[d];
                }
            }
        }
        layer_in = std::move(layer_out);
    }
    out.hidden = std::move(layer_in);

    if (record) {
        record->step = step_k;
        record->n_k = n_k;
        record->rows_after.resize(std::size_t(model.layers) * std::size_t(model.heads));
        for (int l = 0; l < model.layers; ++l)
            for (int h = 0; h < model.heads; ++h)
                record->rows_after[std::size_t(l) * std::size_t(model.heads) + std::size_t(h)] =
                    store.partition(l, h).rows();
    }
    return out;
}

// Autoregressive input chaining: the step-(k+1) input repeats every step-k
// output token a^2 times, plus seeded positional noise. Deterministic by
// construction so compressed runs can be diffed against references.
inline Matrix initial_hidden(std::uint64_t run_seed, std::size_t model_dim) {
    Matrix x(1, model_dim);
    Rng rng(mix_seed(run_seed, 0x1717, 0, 0));
    for (double& v : x.data) v = rng.next_symmetric();
    return x;
}

inline Matrix chain_next(const Matrix& prev_out, const ScaleSchedule& sched, int next_k,
                         std::uint64_t run_seed) {
    const std::int64_t a2 = sched.factor_a * sched.factor_a;
    const std::int64_t n_next = sched.n(next_k);
    Matrix x(std::size_t(n_next), prev_out.cols);
    Rng rng(mix_seed(run_seed, 0xc4a1, std::uint64_t(next_k), 0));
    for (std::int64_t r = 0; r < n_next; ++r) {
        const double* src = prev_out.row(std::size_t(r / a2));
        double* dst = x.row(std::size_t(r));
        for (std::size_t c = 0; c < prev_out.cols; ++c)
            dst[c] = src[c] + 0.1 * rng.next_symmetric();
    }
    return x;
}

// Runs all K steps. `run_seed` drives the input chaining only; model weights
// came from the model's own seed.
inline GenerationResult run_generation(const SyntheticModel& model, const ScaleSchedule& sched,
                                       std::uint64_t run_seed, EngineOptions opts = {}) {
    opts.run_seed = run_seed;
    KvCacheStore store(model.layers, model.heads, model.head_dim);
    if (!opts.head_types.empty()) {
        if (opts.head_types.size() != std::size_t(model.layers) * std::size_t(model.heads))
            throw config_error("run_generation: head type list does not match the model");
        for (int l = 0; l < model.layers; ++l)
            for (int h = 0; h < model.heads; ++h)
                store.set_head_type(
                    l, h, opts.head_types[std::size_t(l) * std::size_t(model.heads) + std::size_t(h)]);
    }
    GenerationResult result;
    Matrix hidden = initial_hidden(run_seed, model.model_dim);
    for (int k = 1; k <= sched.num_scales; ++k) {
        if (k > 1) hidden = chain_next(hidden, sched, k, run_seed);
        StepRecord record;
        RunCounters before = result.counters;
        StepOutput step = forward_step(model, sched, store, hidden, k, opts, result.counters,
                                       opts.record_trace ? &record : nullptr);
        if (opts.record_trace) {
            record.step_counters.score_units = result.counters.score_units - before.score_units;
            record.step_counters.av_units = result.counters.av_units - before.av_units;
            record.step_counters.overhead_units =
                result.counters.overhead_units - before.overhead_units;
            record.step_counters.subset_score_units =
                result.counters.subset_score_units - before.subset_score_units;
            result.trace.push_back(std::move(record));
        }
        hidden = std::move(step.hidden);
        if (k == sched.num_scales) {
            result.final_attention = std::move(step.attention);
        }
    }
    result.final_hidden = std::move(hidden);
    result.peak_entries = store.peak_entries();
    result.final_entries = store.total_entries();
    result.final_rows.resize(std::size_t(model.layers) * std::size_t(model.heads));
    for (int l = 0; l < model.layers; ++l)
        for (int h = 0; h < model.heads; ++h)
            result.final_rows[std::size_t(l) * std::size_t(model.heads) + std::size_t(h)] =
                store.partition(l, h).rows();
    return result;
}

} // namespace varkv
