#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <tuple>
#include <vector>

#include "varkv/engine.hpp"
#include "varkv/errors.hpp"
#include "varkv/matrix.hpp"
#include "varkv/model.hpp"

namespace varkv {

// Column-variance totals of the final-step attention map, one entry per
// (layer, head), averaged over calibration runs.
struct VarianceMatrix {
    Matrix values; // layers x heads
    std::size_t sample_count = 0;
};

// Offline partition of heads into contextual (low variance) and structural
// (high variance) sets, with the per-layer reordering that groups contextual
// heads first.
struct HeadClassification {
    double alpha = 0.0;
    std::vector<std::vector<int>> contextual;  // per layer, ascending
    std::vector<std::vector<int>> structural;  // per layer, ascending
    std::vector<std::vector<int>> permutation; // per layer: new slot -> old head
    VarianceMatrix variance;

    int layers() const { return int(contextual.size()); }
    bool is_contextual(int layer, int head) const {
        const auto& c = contextual[std::size_t(layer)];
        return std::binary_search(c.begin(), c.end(), head);
    }
    std::size_t contextual_count() const {
        std::size_t n = 0;
        for (const auto& c : contextual) n += c.size();
        return n;
    }
};

// Calibration: run one full, uncompressed generation per seed, take each
// head's final-step attention map (N_K x T_K) and average the column
// variance totals across seeds.
inline VarianceMatrix collect_variances(const SyntheticModel& model, const ScaleSchedule& sched,
                                        const std::vector<std::uint64_t>& calibration_seeds,
                                        int n_threads = 0) {
    if (calibration_seeds.empty())
        throw config_error("collect_variances: need at least one calibration seed");
    VarianceMatrix out;
    out.values = Matrix(std::size_t(model.layers), std::size_t(model.heads));
    out.sample_count = calibration_seeds.size();
    for (std::uint64_t seed : calibration_seeds) {
        EngineOptions opts;
        opts.want_final_attention = true;
        opts.n_threads = n_threads;
        GenerationResult run = run_generation(model, sched, seed, opts);
        for (int l = 0; l < model.layers; ++l)
            for (int h = 0; h < model.heads; ++h) {
                const Matrix& att =
                    run.final_attention[std::size_t(l) * std::size_t(model.heads) + std::size_t(h)];
                if (std::int64_t(att.cols) != sched.total())
                    throw state_error("collect_variances: compression active during calibration");
                out.values(std::size_t(l), std::size_t(h)) += column_variance_sum(att);
            }
    }
    const double inv = 1.0 / double(calibration_seeds.size());
    for (double& v : out.values.data) v *= inv;
    return out;
}

// Global ranking: all L*H heads sorted ascending by variance, ties broken by
// (layer, head) index; the lowest round(alpha * L * H) become contextual.
inline HeadClassification classify(const VarianceMatrix& var, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw config_error("classify: alpha must lie in (0,1)");
    const std::size_t layers = var.values.rows;
    const std::size_t heads = var.values.cols;
    std::vector<std::tuple<double, std::size_t, std::size_t>> ranked;
    ranked.reserve(layers * heads);
    for (std::size_t l = 0; l < layers; ++l)
        for (std::size_t h = 0; h < heads; ++h) ranked.emplace_back(var.values(l, h), l, h);
    std::sort(ranked.begin(), ranked.end());
    const std::size_t cut = std::size_t(std::llround(alpha * double(layers * heads)));

    HeadClassification cls;
    cls.alpha = alpha;
    cls.variance = var;
    cls.contextual.resize(layers);
    cls.structural.resize(layers);
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        auto [v, l, h] = ranked[i];
        (i < cut ? cls.contextual : cls.structural)[l].push_back(int(h));
    }
    for (std::size_t l = 0; l < layers; ++l) {
        std::sort(cls.contextual[l].begin(), cls.contextual[l].end());
        std::sort(cls.structural[l].begin(), cls.structural[l].end());
    }
    return cls;
}

// Per-layer permutation placing contextual heads (ascending original index)
// ahead of structural heads (ascending original index). permutation[new] = old.
inline std::vector<std::vector<int>> reorder(const HeadClassification& cls) {
    std::vector<std::vector<int>> perms(cls.contextual.size());
    for (std::size_t l = 0; l < cls.contextual.size(); ++l) {
        perms[l].reserve(cls.contextual[l].size() + cls.structural[l].size());
        for (int h : cls.contextual[l]) perms[l].push_back(h);
        for (int h : cls.structural[l]) perms[l].push_back(h);
    }
    return perms;
}

inline std::vector<int> invert_permutation(const std::vector<int>& perm) {
    std::vector<int> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[std::size_t(perm[i])] = int(i);
    return inv;
}

} // namespace varkv
