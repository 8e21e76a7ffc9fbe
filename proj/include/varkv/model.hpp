#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "varkv/errors.hpp"
#include "varkv/matrix.hpp"
#include "varkv/rng.hpp"
#include "varkv/schedule.hpp"

namespace varkv {

enum class PatternKind { Vertical, MultiDiagonal };

// Synthetic attention template planted into a head. Vertical heads put all
// mass on a fixed set of global token positions (every query row identical);
// multi-diagonal heads attend to spatially aligned positions in each cached
// scale, shifted by `offset` with a window of `bandwidth` columns.
struct PatternSpec {
    PatternKind kind = PatternKind::Vertical;
    std::vector<std::int64_t> targets = {0}; // Vertical: global positions
    std::int64_t offset = 0;                 // MultiDiagonal
    std::int64_t bandwidth = 1;              // MultiDiagonal
};

// Deterministic stand-in for trained transformer weights. Same seed, same
// bits; per-(layer, head) projections are independent substreams so shapes
// can change without disturbing other heads.
struct SyntheticModel {
    int layers = 0;
    int heads = 0;
    std::size_t model_dim = 0;
    std::size_t head_dim = 0;
    std::uint64_t seed = 0;

    struct HeadWeights {
        Matrix w_q, w_k, w_v; // model_dim x head_dim
    };
    std::vector<HeadWeights> weights; // layers * heads
    std::map<std::pair<int, int>, PatternSpec> planted;

    const HeadWeights& head(int layer, int head_idx) const {
        return weights[std::size_t(layer) * std::size_t(heads) + std::size_t(head_idx)];
    }
    const PatternSpec* planted_for(int layer, int head_idx) const {
        auto it = planted.find({layer, head_idx});
        return it == planted.end() ? nullptr : &it->second;
    }
};

inline SyntheticModel synth_model(int layers, int heads, std::size_t model_dim,
                                  std::size_t head_dim, std::uint64_t seed) {
    if (layers < 1 || heads < 1 || head_dim < 1)
        throw config_error("synth_model: dimensions must be positive");
    if (model_dim != std::size_t(heads) * head_dim)
        throw config_error("synth_model: model_dim must equal heads * head_dim");
    SyntheticModel m;
    m.layers = layers;
    m.heads = heads;
    m.model_dim = model_dim;
    m.head_dim = head_dim;
    m.seed = seed;
    m.weights.resize(std::size_t(layers) * std::size_t(heads));
    const double scale = 1.0 / std::sqrt(double(model_dim));
    for (int l = 0; l < layers; ++l) {
        for (int h = 0; h < heads; ++h) {
            auto& w = m.weights[std::size_t(l) * std::size_t(heads) + std::size_t(h)];
            Matrix* mats[3] = {&w.w_q, &w.w_k, &w.w_v};
            for (int p = 0; p < 3; ++p) {
                Rng rng(mix_seed(seed, std::uint64_t(l), std::uint64_t(h), std::uint64_t(p)));
                Matrix& mat = *mats[p];
                mat = Matrix(model_dim, head_dim);
                for (double& v : mat.data) v = rng.next_symmetric() * scale;
            }
        }
    }
    return m;
}

// Returns a copy of the model with the given heads overridden by attention
// templates. Projections stay in place: planted heads still produce K/V for
// the cache, they only bypass the QK^T score computation.
inline SyntheticModel plant_patterns(const SyntheticModel& model,
                                     const std::map<std::pair<int, int>, PatternSpec>& specs) {
    SyntheticModel out = model;
    for (const auto& [key, spec] : specs) {
        auto [l, h] = key;
        if (l < 0 || l >= model.layers || h < 0 || h >= model.heads)
            throw config_error("plant_patterns: head (" + std::to_string(l) + "," +
                               std::to_string(h) + ") out of range");
        if (spec.kind == PatternKind::MultiDiagonal && spec.bandwidth < 1)
            throw config_error("plant_patterns: bandwidth must be >= 1");
        out.planted[key] = spec;
    }
    return out;
}

// Evaluates a planted template over the current cache contents. `origin`
// lists the global positions still cached (ascending); queries are the N_k
// tokens of step k. Rows are normalized to sum to one; a row whose template
// mass was entirely evicted falls back to uniform.
inline Matrix planted_attention_rows(const PatternSpec& spec, const ScaleSchedule& sched,
                                     int step_k, const std::vector<std::size_t>& query_rows,
                                     const std::vector<std::int64_t>& origin) {
    Matrix att(query_rows.size(), origin.size());
    if (spec.kind == PatternKind::Vertical) {
        std::vector<double> row(origin.size(), 0.0);
        double mass = 0.0;
        for (std::size_t c = 0; c < origin.size(); ++c) {
            for (std::int64_t t : spec.targets) {
                if (origin[c] == t) {
                    row[c] = 1.0;
                    mass += 1.0;
                    break;
                }
            }
        }
        if (mass == 0.0) {
            double u = 1.0 / double(origin.size());
            for (double& v : row) v = u;
        } else {
            for (double& v : row) v /= mass;
        }
        for (std::size_t q = 0; q < query_rows.size(); ++q)
            for (std::size_t c = 0; c < origin.size(); ++c) att(q, c) = row[c];
        return att;
    }
    // MultiDiagonal: for every cached scale s, query j targets the window of
    // `bandwidth` positions starting at the aligned index floor(j*N_s/N_k)
    // plus the diagonal offset, wrapped within the scale.
    std::int64_t n_cur = sched.n(step_k);
    for (std::size_t q = 0; q < query_rows.size(); ++q) {
        std::int64_t j = std::int64_t(query_rows[q]);
        double mass = 0.0;
        for (int s = 1; s <= step_k; ++s) {
            std::int64_t n_s = sched.n(s);
            std::int64_t base = s == 1 ? 0 : sched.t(s - 1);
            std::int64_t aligned = j * n_s / n_cur;
            for (std::int64_t b = 0; b < spec.bandwidth; ++b) {
                std::int64_t idx = (aligned + spec.offset + b) % n_s;
                if (idx < 0) idx += n_s;
                std::int64_t target = base + idx;
                // origin is ascending: binary search for the cache column
                auto it = std::lower_bound(origin.begin(), origin.end(), target);
                if (it != origin.end() && *it == target) {
                    att(q, std::size_t(it - origin.begin())) += 1.0;
                    mass += 1.0;
                }
            }
        }
        if (mass == 0.0) {
            double u = 1.0 / double(origin.size());
            for (std::size_t c = 0; c < origin.size(); ++c) att(q, c) = u;
        } else {
            for (std::size_t c = 0; c < origin.size(); ++c) att(q, c) /= mass;
        }
    }
    return att;
}

// All query rows of step k.
inline Matrix planted_attention(const PatternSpec& spec, const ScaleSchedule& sched, int step_k,
                                std::size_t query_count, const std::vector<std::int64_t>& origin) {
    std::vector<std::size_t> rows(query_count);
    for (std::size_t i = 0; i < query_count; ++i) rows[i] = i;
    return planted_attention_rows(spec, sched, step_k, rows, origin);
}

} // namespace varkv
