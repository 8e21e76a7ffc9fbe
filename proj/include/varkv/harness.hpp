#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "varkv/classifier.hpp"
#include "varkv/compression.hpp"
#include "varkv/engine.hpp"
#include "varkv/oracle.hpp"

namespace varkv {

using json = nlohmann::json;

enum class PolicyKind { None, HeadAware, Positional, ScoreTopK, TopKMerge };

// Compression policy knobs shared by the head-aware strategy and baselines.
// n_init < 0 means "first two scales", capped by T_{K-1} for short runs.
struct PolicyConfig {
    PolicyKind kind = PolicyKind::None;
    std::int64_t n_obs = 32;
    std::int64_t n_init = -1;
    bool merge_final_step = true;
    QueryStrategy strategy = QueryStrategy::Uniform;
};

struct BudgetConfig {
    std::int64_t avg = 0;             // B; 0 means "no budget" (policy none)
    double alpha = 0.25;              // contextual head ratio for classification
    double ratio = 2.0;               // B_S : B_C target
    std::int64_t contextual = -1;     // direct B_C mode when >= 1
};

enum class MaskTarget { Contextual, Structural, All };

struct MaskConfig {
    MaskTarget target = MaskTarget::Contextual;
    double fraction = 0.0;
};

struct OutputConfig {
    std::string trace_path;
    std::string metrics_path;
    bool attention_maps = false;
};

struct RunConfig {
    std::int64_t a = 2;
    int num_scales = 4;
    int layers = 1;
    int heads = 1;
    std::size_t model_dim = 8;
    std::size_t head_dim = 8;
    std::uint64_t model_seed = 1;
    std::map<std::pair<int, int>, PatternSpec> planted;
    PolicyConfig policy;
    BudgetConfig budget;
    std::string classification_path;                 // file to load, or
    std::optional<HeadClassification> classification; // inline
    std::optional<MaskConfig> masking;
    OutputConfig outputs;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int n_threads = 0;
};

struct Divergence {
    double max_abs = 0.0;
    double mean_abs = 0.0;
    double cosine = 1.0;
};

struct RunMetrics {
    std::int64_t flops = 0;          // attention score entries
    std::int64_t av_units = 0;       // A*V scalar multiplies
    std::int64_t overhead_flops = 0; // budget-model compression overhead
    std::int64_t subset_flops_raw = 0;
    std::size_t peak_entries = 0;
    std::size_t final_entries = 0;
    Divergence divergence;
    std::vector<double> per_layer_avg_rows;
    double rho = 0.0;
    std::string policy_label;
    std::string config_hash;
};

struct RunOutput {
    RunMetrics metrics;
    json trace;
    GenerationResult generation;
};

inline Divergence divergence_between(const Matrix& x, const Matrix& y) {
    if (x.rows != y.rows || x.cols != y.cols)
        throw state_error("divergence: shape mismatch");
    Divergence d;
    double dot_xy = 0.0, nx = 0.0, ny = 0.0, abs_sum = 0.0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        double diff = std::abs(x.data[i] - y.data[i]);
        abs_sum += diff;
        if (diff > d.max_abs) d.max_abs = diff;
        dot_xy += x.data[i] * y.data[i];
        nx += x.data[i] * x.data[i];
        ny += y.data[i] * y.data[i];
    }
    d.mean_abs = x.data.empty() ? 0.0 : abs_sum / double(x.data.size());
    if (d.max_abs == 0.0) {
        d.cosine = 1.0; // identical vectors, exact by definition
    } else if (nx == 0.0 || ny == 0.0) {
        d.cosine = 0.0;
    } else {
        d.cosine = dot_xy / (std::sqrt(nx) * std::sqrt(ny));
    }
    return d;
}

// ---------------------------------------------------------------------------
// JSON serialization
// ---------------------------------------------------------------------------

inline std::string policy_name(PolicyKind k) {
    switch (k) {
    case PolicyKind::None: return "none";
    case PolicyKind::HeadAware: return "head_aware";
    case PolicyKind::Positional: return "positional";
    case PolicyKind::ScoreTopK: return "score_topk";
    case PolicyKind::TopKMerge: return "topk_merge";
    }
    return "none";
}

inline PolicyKind policy_from_name(const std::string& s) {
    if (s == "none") return PolicyKind::None;
    if (s == "head_aware") return PolicyKind::HeadAware;
    if (s == "positional") return PolicyKind::Positional;
    if (s == "score_topk") return PolicyKind::ScoreTopK;
    if (s == "topk_merge") return PolicyKind::TopKMerge;
    throw config_error("unknown policy: " + s);
}

inline std::string strategy_name(QueryStrategy s) {
    switch (s) {
    case QueryStrategy::Uniform: return "uniform";
    case QueryStrategy::Random: return "random";
    case QueryStrategy::Init: return "init";
    case QueryStrategy::Recent: return "recent";
    case QueryStrategy::Full: return "full";
    }
    return "uniform";
}

inline QueryStrategy strategy_from_name(const std::string& s) {
    if (s == "uniform") return QueryStrategy::Uniform;
    if (s == "random") return QueryStrategy::Random;
    if (s == "init") return QueryStrategy::Init;
    if (s == "recent") return QueryStrategy::Recent;
    if (s == "full") return QueryStrategy::Full;
    throw config_error("unknown query strategy: " + s);
}

inline json classification_to_json(const HeadClassification& cls) {
    json layers = json::array();
    std::vector<std::vector<int>> perms =
        cls.permutation.empty() ? reorder(cls) : cls.permutation;
    for (std::size_t l = 0; l < cls.contextual.size(); ++l) {
        layers.push_back({{"contextual", cls.contextual[l]},
                          {"structural", cls.structural[l]},
                          {"permutation", perms[l]}});
    }
    json variance = json::array();
    for (std::size_t l = 0; l < cls.variance.values.rows; ++l) {
        json row = json::array();
        for (std::size_t h = 0; h < cls.variance.values.cols; ++h)
            row.push_back(cls.variance.values(l, h));
        variance.push_back(row);
    }
    return json{{"alpha", cls.alpha}, {"layers", layers}, {"variance", variance}};
}

inline HeadClassification classification_from_json(const json& j) {
    HeadClassification cls;
    cls.alpha = j.at("alpha").get<double>();
    for (const auto& layer : j.at("layers")) {
        cls.contextual.push_back(layer.at("contextual").get<std::vector<int>>());
        cls.structural.push_back(layer.at("structural").get<std::vector<int>>());
        cls.permutation.push_back(layer.at("permutation").get<std::vector<int>>());
    }
    const auto& variance = j.at("variance");
    std::size_t layers = variance.size();
    std::size_t heads = layers > 0 ? variance.at(0).size() : 0;
    cls.variance.values = Matrix(layers, heads);
    for (std::size_t l = 0; l < layers; ++l)
        for (std::size_t h = 0; h < heads; ++h)
            cls.variance.values(l, h) = variance.at(l).at(h).get<double>();
    return cls;
}

inline HeadClassification load_classification(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open classification file: " + path);
    json j = json::parse(in);
    return classification_from_json(j);
}

inline void save_classification(const HeadClassification& cls, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write classification file: " + path);
    out << classification_to_json(cls).dump(2) << "\n";
}

inline json config_to_json(const RunConfig& c) {
    json planted = json::array();
    for (const auto& [key, spec] : c.planted) {
        json p{{"layer", key.first}, {"head", key.second}};
        if (spec.kind == PatternKind::Vertical) {
            p["kind"] = "vertical";
            p["targets"] = spec.targets;
        } else {
            p["kind"] = "multi_diagonal";
            p["offset"] = spec.offset;
            p["bandwidth"] = spec.bandwidth;
        }
        planted.push_back(p);
    }
    json j{
        {"schedule", {{"a", c.a}, {"K", c.num_scales}}},
        {"model",
         {{"layers", c.layers},
          {"heads", c.heads},
          {"model_dim", c.model_dim},
          {"head_dim", c.head_dim},
          {"seed", c.model_seed},
          {"planted", planted}}},
        {"policy",
         {{"name", policy_name(c.policy.kind)},
          {"n_obs", c.policy.n_obs},
          {"n_init", c.policy.n_init},
          {"merge_final_step", c.policy.merge_final_step},
          {"query_strategy", strategy_name(c.policy.strategy)}}},
        {"budget",
         {{"avg", c.budget.avg},
          {"alpha", c.budget.alpha},
          {"ratio", c.budget.ratio},
          {"contextual", c.budget.contextual}}},
        {"outputs",
         {{"trace", c.outputs.trace_path},
          {"metrics", c.outputs.metrics_path},
          {"attention_maps", c.outputs.attention_maps}}},
        {"seed", c.seed},
        {"threads", c.n_threads},
    };
    if (!c.classification_path.empty()) {
        j["classification"] = c.classification_path;
    } else if (c.classification.has_value()) {
        j["classification"] = classification_to_json(*c.classification);
    } else {
        j["classification"] = nullptr;
    }
    if (c.masking.has_value()) {
        const char* t = c.masking->target == MaskTarget::Contextual  ? "contextual"
                        : c.masking->target == MaskTarget::Structural ? "structural"
                                                                      : "all";
        j["masking"] = {{"head_type", t}, {"fraction", c.masking->fraction}};
    } else {
        j["masking"] = nullptr;
    }
    return j;
}

inline RunConfig config_from_json(const json& j) {
    RunConfig c;
    if (j.contains("schedule")) {
        c.a = j["schedule"].value("a", c.a);
        c.num_scales = j["schedule"].value("K", c.num_scales);
    }
    if (j.contains("model")) {
        const auto& m = j["model"];
        c.layers = m.value("layers", c.layers);
        c.heads = m.value("heads", c.heads);
        c.model_dim = m.value("model_dim", std::size_t(0));
        c.head_dim = m.value("head_dim", c.head_dim);
        if (c.model_dim == 0) c.model_dim = std::size_t(c.heads) * c.head_dim;
        c.model_seed = m.value("seed", c.model_seed);
        if (m.contains("planted")) {
            for (const auto& p : m["planted"]) {
                PatternSpec spec;
                std::string kind = p.at("kind").get<std::string>();
                if (kind == "vertical") {
                    spec.kind = PatternKind::Vertical;
                    if (p.contains("targets"))
                        spec.targets = p["targets"].get<std::vector<std::int64_t>>();
                } else if (kind == "multi_diagonal") {
                    spec.kind = PatternKind::MultiDiagonal;
                    spec.offset = p.value("offset", std::int64_t(0));
                    spec.bandwidth = p.value("bandwidth", std::int64_t(1));
                } else {
                    throw config_error("unknown planted pattern kind: " + kind);
                }
                c.planted[{p.at("layer").get<int>(), p.at("head").get<int>()}] = spec;
            }
        }
    }
    if (j.contains("policy")) {
        const auto& p = j["policy"];
        c.policy.kind = policy_from_name(p.value("name", std::string("none")));
        c.policy.n_obs = p.value("n_obs", c.policy.n_obs);
        if (p.contains("n_init") && !p["n_init"].is_null())
            c.policy.n_init = p["n_init"].get<std::int64_t>();
        c.policy.merge_final_step = p.value("merge_final_step", c.policy.merge_final_step);
        c.policy.strategy = strategy_from_name(p.value("query_strategy", std::string("uniform")));
    }
    if (j.contains("budget")) {
        const auto& b = j["budget"];
        c.budget.avg = b.value("avg", c.budget.avg);
        c.budget.alpha = b.value("alpha", c.budget.alpha);
        c.budget.ratio = b.value("ratio", c.budget.ratio);
        if (b.contains("contextual") && !b["contextual"].is_null())
            c.budget.contextual = b["contextual"].get<std::int64_t>();
    }
    if (j.contains("classification") && !j["classification"].is_null()) {
        if (j["classification"].is_string()) {
            c.classification_path = j["classification"].get<std::string>();
        } else {
            c.classification = classification_from_json(j["classification"]);
        }
    }
    if (j.contains("masking") && !j["masking"].is_null()) {
        MaskConfig m;
        std::string t = j["masking"].value("head_type", std::string("contextual"));
        if (t == "contextual") m.target = MaskTarget::Contextual;
        else if (t == "structural") m.target = MaskTarget::Structural;
        else if (t == "all") m.target = MaskTarget::All;
        else throw config_error("unknown mask head_type: " + t);
        m.fraction = j["masking"].value("fraction", 0.0);
        c.masking = m;
    }
    if (j.contains("outputs")) {
        c.outputs.trace_path = j["outputs"].value("trace", std::string());
        c.outputs.metrics_path = j["outputs"].value("metrics", std::string());
        c.outputs.attention_maps = j["outputs"].value("attention_maps", false);
    }
    if (j.contains("seed")) {
        if (j["seed"].is_number_integer() && j["seed"].get<std::int64_t>() < 0)
            throw config_error("seed must be non-negative");
        c.seed = j["seed"].get<std::uint64_t>();
        c.seed_set = true;
    }
    c.n_threads = j.value("threads", 0);
    return c;
}

// FNV-1a over the canonical (key-sorted) config dump. Output paths and
// thread counts are plumbing, not experiment identity, so they are excluded;
// the hash joins CSV rows of the same experiment across sweeps.
inline std::string config_hash(const RunConfig& c) {
    json canon = config_to_json(c);
    canon.erase("outputs");
    canon.erase("threads");
    std::string dump = canon.dump();
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : dump) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

// ---------------------------------------------------------------------------
// Policy wiring
// ---------------------------------------------------------------------------

inline std::int64_t default_n_init(const ScaleSchedule& sched) {
    std::int64_t first_two = sched.num_scales >= 2 ? sched.t(2) : sched.t(1);
    std::int64_t prior = sched.num_scales >= 2 ? sched.t(sched.num_scales - 1) : 0;
    return std::min(first_two, prior);
}

inline std::int64_t effective_n_init(const PolicyConfig& p, const ScaleSchedule& sched) {
    return p.n_init >= 0 ? p.n_init : default_n_init(sched);
}

// Subset-attention importance for one head, planted-aware. Charges the
// budget-model overhead n_obs*(budget + N_k) and tracks the raw entry count.
inline ImportanceScores estimate_importance(CompressionContext& ctx, const PolicyConfig& policy,
                                            std::int64_t charge_budget) {
    std::uint64_t sub_seed = mix_seed(ctx.run_seed ^ 0x5b5eu, std::uint64_t(ctx.step),
                                      std::uint64_t(ctx.layer), std::uint64_t(ctx.head));
    Matrix att;
    if (ctx.planted) {
        std::vector<std::size_t> rows = select_query_rows(
            ctx.queries.rows, std::size_t(policy.n_obs), policy.strategy, sub_seed);
        att = planted_attention_rows(*ctx.planted, ctx.sched, ctx.step, rows, ctx.part.origin);
    } else {
        att = subset_attention(ctx.queries, ctx.part.keys, std::size_t(policy.n_obs),
                               policy.strategy, sub_seed);
    }
    ctx.counters.subset_score_units += std::int64_t(att.rows) * std::int64_t(att.cols);
    ctx.counters.overhead_units += policy.n_obs * (charge_budget + ctx.sched.n(ctx.step));
    ImportanceScores scores = cumulative_scores(att);
    scores.strategy = policy.strategy;
    return scores;
}

inline CompressionHook make_head_aware_hook(const BudgetPlan& plan, const PolicyConfig& policy) {
    return [plan, policy](CompressionContext& ctx) {
        std::int64_t budget = KvCacheStore::budget_of(ctx.part.type, plan);
        if (std::int64_t(ctx.part.rows()) <= budget) return;
        ImportanceScores scores = estimate_importance(ctx, policy, budget);
        if (ctx.part.type == HeadType::Contextual) {
            compress_contextual(ctx.part, scores, budget, ctx.final_step,
                                policy.merge_final_step);
        } else {
            compress_structural(ctx.part, scores, budget, effective_n_init(policy, ctx.sched),
                                ctx.sched.n(ctx.step));
        }
    };
}

inline CompressionHook make_baseline_hook(BaselinePolicy base, std::int64_t budget,
                                          const PolicyConfig& policy) {
    return [base, budget, policy](CompressionContext& ctx) {
        if (std::int64_t(ctx.part.rows()) <= budget) return;
        ImportanceScores scores;
        if (base != BaselinePolicy::Positional)
            scores = estimate_importance(ctx, policy, budget);
        baseline_compress(ctx.part, scores, budget, base,
                          effective_n_init(policy, ctx.sched));
    };
}

// ---------------------------------------------------------------------------
// run / sweep / mask
// ---------------------------------------------------------------------------

namespace detail {

inline HeadClassification resolve_classification(const RunConfig& c) {
    HeadClassification cls;
    if (c.classification.has_value()) {
        cls = *c.classification;
    } else if (!c.classification_path.empty()) {
        cls = load_classification(c.classification_path);
    } else {
        throw config_error("policy requires a head classification (none provided)");
    }
    if (cls.layers() != c.layers)
        throw config_error("classification layer count does not match the model");
    for (int l = 0; l < cls.layers(); ++l)
        if (cls.contextual[std::size_t(l)].size() + cls.structural[std::size_t(l)].size() !=
            std::size_t(c.heads))
            throw config_error("classification head count does not match the model");
    return cls;
}

inline BudgetPlan resolve_plan(const RunConfig& c, const HeadClassification& cls,
                               const ScaleSchedule& sched) {
    if (c.budget.avg < 1) throw config_error("policy requires a positive average budget");
    double realized =
        double(cls.contextual_count()) / double(std::size_t(c.layers) * std::size_t(c.heads));
    BudgetPlan plan;
    if (realized == 0.0 || realized == 1.0) {
        // degenerate single-type split: the whole average goes to that type
        plan.avg_budget = c.budget.avg;
        plan.alpha = realized;
        plan.contextual = c.budget.avg;
        plan.structural = c.budget.avg;
        plan.ratio = 1.0;
    } else if (c.budget.contextual >= 1) {
        plan = allocate_budgets_direct(c.budget.avg, realized, c.budget.contextual);
    } else {
        plan = allocate_budgets(c.budget.avg, realized, c.budget.ratio);
    }
    bool any_structural = cls.contextual_count() < std::size_t(c.layers) * std::size_t(c.heads);
    if (any_structural && plan.structural < sched.total() &&
        plan.structural < sched.n(sched.num_scales))
        throw config_error("structural budget " + std::to_string(plan.structural) +
                           " cannot hold the final scale of " +
                           std::to_string(sched.n(sched.num_scales)) + " tokens");
    return plan;
}

inline std::vector<HeadType> head_types_of(const HeadClassification& cls, int heads) {
    std::vector<HeadType> types(std::size_t(cls.layers()) * std::size_t(heads),
                                HeadType::Structural);
    for (int l = 0; l < cls.layers(); ++l)
        for (int h : cls.contextual[std::size_t(l)])
            types[std::size_t(l) * std::size_t(heads) + std::size_t(h)] = HeadType::Contextual;
    return types;
}

inline std::set<std::pair<int, int>> resolve_mask(const RunConfig& c,
                                                  const HeadClassification& cls) {
    const MaskConfig& m = *c.masking;
    if (!(m.fraction > 0.0 && m.fraction <= 1.0))
        throw config_error("mask fraction must lie in (0, 1]");
    // candidate heads of the chosen type, ordered by variance: ascending for
    // contextual (lowest first), descending for structural (highest first)
    std::vector<std::tuple<double, int, int>> candidates;
    for (int l = 0; l < c.layers; ++l) {
        for (int h = 0; h < c.heads; ++h) {
            bool ctx_head = cls.is_contextual(l, h);
            if (m.target == MaskTarget::Contextual && !ctx_head) continue;
            if (m.target == MaskTarget::Structural && ctx_head) continue;
            double v = cls.variance.values.data.empty()
                           ? 0.0
                           : cls.variance.values(std::size_t(l), std::size_t(h));
            candidates.emplace_back(m.target == MaskTarget::Structural ? -v : v, l, h);
        }
    }
    std::sort(candidates.begin(), candidates.end());
    std::size_t count = std::size_t(std::llround(
        m.fraction * double(std::size_t(c.layers) * std::size_t(c.heads))));
    count = std::min(count, candidates.size());
    std::set<std::pair<int, int>> mask;
    for (std::size_t i = 0; i < count; ++i)
        mask.insert({std::get<1>(candidates[i]), std::get<2>(candidates[i])});
    return mask;
}

} // namespace detail

inline json trace_to_json(const RunConfig& config, const BudgetPlan* plan,
                          const GenerationResult& gen, const RunMetrics& metrics) {
    json steps = json::array();
    for (const StepRecord& rec : gen.trace) {
        json events = json::array();
        for (const CompressionEvent& ev : rec.events) {
            events.push_back({{"layer", ev.layer},
                              {"head", ev.head},
                              {"rows_before", ev.rows_before},
                              {"rows_after", ev.rows_after},
                              {"retained", ev.retained}});
        }
        steps.push_back({{"k", rec.step},
                         {"n_k", rec.n_k},
                         {"rows", rec.rows_after},
                         {"events", events},
                         {"flops", rec.step_counters.score_units},
                         {"av_flops", rec.step_counters.av_units},
                         {"overhead_flops", rec.step_counters.overhead_units},
                         {"subset_flops_raw", rec.step_counters.subset_score_units}});
    }
    json j{{"config", config_to_json(config)},
           {"steps", steps},
           {"metrics",
            {{"flops", metrics.flops},
             {"av_flops", metrics.av_units},
             {"overhead_flops", metrics.overhead_flops},
             {"subset_flops_raw", metrics.subset_flops_raw},
             {"peak_entries", metrics.peak_entries},
             {"final_entries", metrics.final_entries},
             {"rho", metrics.rho},
             {"max_abs", metrics.divergence.max_abs},
             {"mean_abs", metrics.divergence.mean_abs},
             {"cosine", metrics.divergence.cosine},
             {"per_layer_avg_rows", metrics.per_layer_avg_rows}}}};
    if (plan) {
        j["budget_plan"] = {{"avg", plan->avg_budget},
                            {"alpha", plan->alpha},
                            {"contextual", plan->contextual},
                            {"structural", plan->structural}};
    } else {
        j["budget_plan"] = nullptr;
    }
    return j;
}

inline const char* metrics_csv_header() {
    return "config_hash,rho,policy,flops,overhead_flops,peak_entries,max_abs,mean_abs,cosine";
}

inline std::string metrics_csv_row(const RunMetrics& m) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%s,%.17g,%s,%lld,%lld,%zu,%.17g,%.17g,%.17g",
                  m.config_hash.c_str(), m.rho, m.policy_label.c_str(),
                  static_cast<long long>(m.flops), static_cast<long long>(m.overhead_flops),
                  m.peak_entries, m.divergence.max_abs, m.divergence.mean_abs,
                  m.divergence.cosine);
    return std::string(buf);
}

inline void write_metrics_csv(const std::string& path, const std::vector<RunMetrics>& rows) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write metrics file: " + path);
    out << metrics_csv_header() << "\n";
    for (const RunMetrics& m : rows) out << metrics_csv_row(m) << "\n";
}

inline void write_trace(const json& trace, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write trace file: " + path);
    out << trace.dump(2) << "\n";
}

// Executes one configured generation run: builds the model, wires the
// compression hook, measures exact counters, and computes divergence against
// the full-cache reference (itself, for policy none).
inline RunOutput run(const RunConfig& config) {
    if (!config.seed_set) throw config_error("a run seed is required");
    ScaleSchedule sched = build_schedule(config.a, config.num_scales);
    SyntheticModel model =
        synth_model(config.layers, config.heads, config.model_dim, config.head_dim,
                    config.model_seed);
    if (!config.planted.empty()) model = plant_patterns(model, config.planted);

    std::optional<HeadClassification> cls;
    std::optional<BudgetPlan> plan;
    EngineOptions opts;
    opts.n_threads = config.n_threads;
    opts.record_trace = true;
    opts.want_final_attention = config.outputs.attention_maps;

    if (config.policy.kind != PolicyKind::None && config.policy.n_obs < 1)
        throw config_error("n_obs must be at least 1");
    if (config.policy.kind == PolicyKind::HeadAware) {
        cls = detail::resolve_classification(config);
        plan = detail::resolve_plan(config, *cls, sched);
        opts.hook = make_head_aware_hook(*plan, config.policy);
    } else if (config.policy.kind != PolicyKind::None) {
        if (config.budget.avg < 1)
            throw config_error("baseline policies require a positive average budget");
        BaselinePolicy base = config.policy.kind == PolicyKind::Positional
                                  ? BaselinePolicy::Positional
                                  : (config.policy.kind == PolicyKind::ScoreTopK
                                         ? BaselinePolicy::ScoreTopK
                                         : BaselinePolicy::TopKMerge);
        plan = BudgetPlan{config.budget.avg, 0.0, config.budget.avg, config.budget.avg, 1.0};
        opts.hook = make_baseline_hook(base, config.budget.avg, config.policy);
    }

    std::set<std::pair<int, int>> mask;
    if (config.masking.has_value()) {
        if (!cls.has_value()) cls = detail::resolve_classification(config);
        mask = detail::resolve_mask(config, *cls);
        opts.masked_heads = &mask;
    }

    if (cls.has_value()) opts.head_types = detail::head_types_of(*cls, config.heads);
    GenerationResult gen = run_generation(model, sched, config.seed, opts);

    RunMetrics metrics;
    metrics.flops = gen.counters.score_units;
    metrics.av_units = gen.counters.av_units;
    metrics.overhead_flops = gen.counters.overhead_units;
    metrics.subset_flops_raw = gen.counters.subset_score_units;
    metrics.peak_entries = gen.peak_entries;
    metrics.final_entries = gen.final_entries;
    metrics.policy_label = policy_name(config.policy.kind);
    metrics.config_hash = config_hash(config);
    if (config.policy.kind == PolicyKind::None || config.budget.avg < 1) {
        metrics.rho = 0.0;
    } else {
        metrics.rho = std::max(0.0, 1.0 - double(config.budget.avg) / double(sched.total()));
    }
    metrics.per_layer_avg_rows.resize(std::size_t(config.layers), 0.0);
    for (int l = 0; l < config.layers; ++l) {
        double sum = 0.0;
        for (int h = 0; h < config.heads; ++h)
            sum += double(gen.final_rows[std::size_t(l) * std::size_t(config.heads) +
                                         std::size_t(h)]);
        metrics.per_layer_avg_rows[std::size_t(l)] = sum / double(config.heads);
    }

    const bool needs_reference =
        config.policy.kind != PolicyKind::None || config.masking.has_value();
    if (needs_reference) {
        EngineOptions ref_opts;
        ref_opts.n_threads = config.n_threads;
        GenerationResult ref = run_generation(model, sched, config.seed, ref_opts);
        metrics.divergence = divergence_between(gen.final_hidden, ref.final_hidden);
    }

    RunOutput out;
    out.metrics = metrics;
    out.trace = trace_to_json(config, plan ? &*plan : nullptr, gen, metrics);
    if (config.outputs.attention_maps) {
        json maps = json::array();
        for (const Matrix& att : gen.final_attention) {
            json m = json::array();
            for (std::size_t i = 0; i < att.rows; ++i) {
                json row = json::array();
                for (std::size_t jcol = 0; jcol < att.cols; ++jcol) row.push_back(att(i, jcol));
                m.push_back(row);
            }
            maps.push_back(m);
        }
        out.trace["attention_maps"] = maps;
    }
    out.generation = std::move(gen);
    if (!config.outputs.trace_path.empty()) write_trace(out.trace, config.outputs.trace_path);
    if (!config.outputs.metrics_path.empty())
        write_metrics_csv(config.outputs.metrics_path, {metrics});
    return out;
}

// Calibrate and classify in one call: `samples` full uncompressed runs with
// seeds base_seed .. base_seed+samples-1.
inline HeadClassification classify_model(const RunConfig& config, std::size_t samples) {
    if (!config.seed_set) throw config_error("a calibration seed is required");
    if (samples < 1) throw config_error("classification needs at least one calibration sample");
    ScaleSchedule sched = build_schedule(config.a, config.num_scales);
    SyntheticModel model =
        synth_model(config.layers, config.heads, config.model_dim, config.head_dim,
                    config.model_seed);
    if (!config.planted.empty()) model = plant_patterns(model, config.planted);
    std::vector<std::uint64_t> seeds(samples);
    for (std::size_t i = 0; i < samples; ++i) seeds[i] = config.seed + i;
    VarianceMatrix var = collect_variances(model, sched, seeds, config.n_threads);
    HeadClassification cls = classify(var, config.budget.alpha);
    cls.permutation = reorder(cls);
    return cls;
}

// One row of a compression-sensitivity sweep (the per-head-type protocol):
// at ratio rho, heads of the restricted set are squeezed to
// round((1-rho)*T_K) entries by plain cumulative-score eviction while the
// rest keep the full cache.
enum class SweepVariant { ContextualOnly, StructuralOnly, Both };

inline const char* sweep_variant_name(SweepVariant v) {
    switch (v) {
    case SweepVariant::ContextualOnly: return "sweep_contextual";
    case SweepVariant::StructuralOnly: return "sweep_structural";
    case SweepVariant::Both: return "sweep_both";
    }
    return "sweep_both";
}

inline RunMetrics sweep_cell(const RunConfig& config, const HeadClassification& cls,
                             double rho, SweepVariant variant,
                             const Matrix* reference_hidden) {
    ScaleSchedule sched = build_schedule(config.a, config.num_scales);
    SyntheticModel model =
        synth_model(config.layers, config.heads, config.model_dim, config.head_dim,
                    config.model_seed);
    if (!config.planted.empty()) model = plant_patterns(model, config.planted);
    std::int64_t budget =
        std::max<std::int64_t>(1, std::llround((1.0 - rho) * double(sched.total())));
    PolicyConfig policy = config.policy;
    EngineOptions opts;
    opts.n_threads = config.n_threads;
    opts.record_trace = true;
    opts.head_types = detail::head_types_of(cls, config.heads);
    opts.hook = [budget, policy, variant](CompressionContext& ctx) {
        bool selected = variant == SweepVariant::Both ||
                        (variant == SweepVariant::ContextualOnly &&
                         ctx.part.type == HeadType::Contextual) ||
                        (variant == SweepVariant::StructuralOnly &&
                         ctx.part.type == HeadType::Structural);
        if (!selected || std::int64_t(ctx.part.rows()) <= budget) return;
        ImportanceScores scores = estimate_importance(ctx, policy, budget);
        compress_contextual(ctx.part, scores, budget, false, false);
    };
    GenerationResult gen = run_generation(model, sched, config.seed, opts);

    RunMetrics m;
    m.flops = gen.counters.score_units;
    m.av_units = gen.counters.av_units;
    m.overhead_flops = gen.counters.overhead_units;
    m.subset_flops_raw = gen.counters.subset_score_units;
    m.peak_entries = gen.peak_entries;
    m.final_entries = gen.final_entries;
    m.rho = rho;
    m.policy_label = sweep_variant_name(variant);
    m.config_hash = config_hash(config);
    if (reference_hidden) m.divergence = divergence_between(gen.final_hidden, *reference_hidden);
    return m;
}

// Sensitivity sweep over compression ratios and head-type restrictions.
inline std::vector<RunMetrics> sweep(const RunConfig& config, const std::vector<double>& ratios,
                                     const std::vector<SweepVariant>& variants) {
    if (!config.seed_set) throw config_error("a run seed is required");
    for (double r : ratios)
        if (!(r >= 0.0 && r < 1.0)) throw config_error("sweep ratios must lie in [0, 1)");
    HeadClassification cls = detail::resolve_classification(config);
    ScaleSchedule sched = build_schedule(config.a, config.num_scales);
    SyntheticModel model =
        synth_model(config.layers, config.heads, config.model_dim, config.head_dim,
                    config.model_seed);
    if (!config.planted.empty()) model = plant_patterns(model, config.planted);
    EngineOptions ref_opts;
    ref_opts.n_threads = config.n_threads;
    GenerationResult ref = run_generation(model, sched, config.seed, ref_opts);

    std::vector<RunMetrics> rows;
    for (double rho : ratios)
        for (SweepVariant v : variants)
            rows.push_back(sweep_cell(config, cls, rho, v, &ref.final_hidden));
    if (!config.outputs.metrics_path.empty()) write_metrics_csv(config.outputs.metrics_path, rows);
    return rows;
}

// Scale-retention comparison: both strategies run at the same per-step
// budget N_init + N_k. One keeps the cache edges (init prefix + current
// scale), the other keeps a centered window of equal size over intermediate
// positions.
enum class RetentionStrategy { InitRecent, Intermediate };

inline RunMetrics retention_run(const RunConfig& config, RetentionStrategy strategy,
                                const Matrix* reference_hidden) {
    ScaleSchedule sched = build_schedule(config.a, config.num_scales);
    SyntheticModel model =
        synth_model(config.layers, config.heads, config.model_dim, config.head_dim,
                    config.model_seed);
    if (!config.planted.empty()) model = plant_patterns(model, config.planted);
    std::int64_t n_init = effective_n_init(config.policy, sched);
    EngineOptions opts;
    opts.n_threads = config.n_threads;
    opts.record_trace = true;
    opts.hook = [n_init, strategy](CompressionContext& ctx) {
        const std::int64_t n_k = ctx.sched.n(ctx.step);
        const std::int64_t budget = n_init + n_k;
        const std::size_t rows = ctx.part.rows();
        if (std::int64_t(rows) <= budget) return;
        std::vector<std::size_t> keep;
        if (strategy == RetentionStrategy::InitRecent) {
            std::size_t init_count = 0;
            while (init_count < rows && ctx.part.origin[init_count] < n_init) ++init_count;
            for (std::size_t i = 0; i < init_count; ++i) keep.push_back(i);
            for (std::size_t i = rows - std::size_t(n_k); i < rows; ++i) keep.push_back(i);
        } else {
            std::size_t start = (rows - std::size_t(budget)) / 2;
            for (std::size_t i = start; i < start + std::size_t(budget); ++i) keep.push_back(i);
        }
        ctx.part.retain(keep);
    };
    GenerationResult gen = run_generation(model, sched, config.seed, opts);
    RunMetrics m;
    m.flops = gen.counters.score_units;
    m.av_units = gen.counters.av_units;
    m.peak_entries = gen.peak_entries;
    m.final_entries = gen.final_entries;
    m.rho = 0.0;
    m.policy_label = strategy == RetentionStrategy::InitRecent ? "retain_init_recent"
                                                               : "retain_intermediate";
    m.config_hash = config_hash(config);
    if (reference_hidden) m.divergence = divergence_between(gen.final_hidden, *reference_hidden);
    return m;
}

inline std::vector<RunMetrics> retention_compare(const RunConfig& config) {
    if (!config.seed_set) throw config_error("a run seed is required");
    ScaleSchedule sched = build_schedule(config.a, config.num_scales);
    SyntheticModel model =
        synth_model(config.layers, config.heads, config.model_dim, config.head_dim,
                    config.model_seed);
    if (!config.planted.empty()) model = plant_patterns(model, config.planted);
    EngineOptions ref_opts;
    ref_opts.n_threads = config.n_threads;
    GenerationResult ref = run_generation(model, sched, config.seed, ref_opts);
    std::vector<RunMetrics> rows{
        retention_run(config, RetentionStrategy::InitRecent, &ref.final_hidden),
        retention_run(config, RetentionStrategy::Intermediate, &ref.final_hidden)};
    if (!config.outputs.metrics_path.empty()) write_metrics_csv(config.outputs.metrics_path, rows);
    return rows;
}

// Head-masking experiment: zero the output slices of the selected heads and
// report divergence against the unmasked run.
inline RunOutput mask_run(RunConfig config) {
    if (!config.masking.has_value()) throw config_error("mask mode requires a masking config");
    config.policy.kind = PolicyKind::None;
    RunOutput out = run(config);
    out.metrics.policy_label = "mask_" + std::string(config.masking->target == MaskTarget::Contextual
                                                         ? "contextual"
                                                         : config.masking->target == MaskTarget::Structural
                                                               ? "structural"
                                                               : "all");
    if (!config.outputs.metrics_path.empty())
        write_metrics_csv(config.outputs.metrics_path, {out.metrics});
    return out;
}

} // namespace varkv
