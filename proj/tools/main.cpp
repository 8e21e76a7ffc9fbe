// varkv: next-scale attention engine with head-aware KV cache compression.
//
// Subcommands:
//   classify  calibrate head variances offline and write the classification file
//   run       execute one generation run, write trace + metrics
//   sweep     compression-ratio sensitivity sweep (or --retention comparison)
//   mask      head-masking experiment, divergence vs. the unmasked run
//   flops     closed-form attention cost tables

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "varkv/harness.hpp"

namespace {

struct CliFlags {
    varkv::RunConfig config;
    std::string config_path;
    bool seed_given = false;
    std::int64_t seed_raw = 0;
    std::string planted_json;
};

void add_model_flags(CLI::App* cmd, CliFlags& f) {
    cmd->add_option("--a", f.config.a, "scale growth factor");
    cmd->add_option("--K", f.config.num_scales, "number of scales");
    cmd->add_option("--layers", f.config.layers, "transformer layers");
    cmd->add_option("--heads", f.config.heads, "attention heads per layer");
    cmd->add_option("--model-dim", f.config.model_dim, "model width (defaults to heads*head-dim)");
    cmd->add_option("--head-dim", f.config.head_dim, "per-head width");
    cmd->add_option("--model-seed", f.config.model_seed, "weight generator seed");
    cmd->add_option("--planted", f.planted_json, "planted pattern specs as a JSON array");
    cmd->add_option("--threads", f.config.n_threads, "worker threads (0 = auto)");
    cmd->add_option("--seed", f.seed_raw, "run seed (required)")->required();
    cmd->add_option("--config", f.config_path, "JSON config file; overrides all flags");
}

void add_policy_flags(CLI::App* cmd, CliFlags& f, std::string& policy, std::string& strategy) {
    cmd->add_option("--policy", policy, "none|head_aware|positional|score_topk|topk_merge");
    cmd->add_option("--n-obs", f.config.policy.n_obs, "observed query count");
    cmd->add_option("--n-init", f.config.policy.n_init, "always-retained prefix (-1 = first two scales)");
    cmd->add_option("--query-strategy", strategy, "uniform|random|init|recent|full");
    cmd->add_flag("--no-merge", "disable final-step merging for contextual heads");
    cmd->add_option("--budget", f.config.budget.avg, "average per-head cache budget B");
    cmd->add_option("--alpha", f.config.budget.alpha, "contextual head ratio");
    cmd->add_option("--ratio", f.config.budget.ratio, "structural:contextual budget ratio");
    cmd->add_option("--budget-contextual", f.config.budget.contextual,
                    "pin the contextual budget directly");
    cmd->add_option("--classification", f.config.classification_path, "classification JSON path");
}

varkv::RunConfig finalize(CliFlags& f, CLI::App* cmd, const std::string& policy,
                          const std::string& strategy) {
    if (!f.config_path.empty()) {
        std::ifstream in(f.config_path);
        if (!in) throw varkv::config_error("cannot open config file: " + f.config_path);
        varkv::RunConfig c = varkv::config_from_json(varkv::json::parse(in));
        if (!c.seed_set) {
            c.seed = std::uint64_t(f.seed_raw);
            c.seed_set = true;
        }
        return c;
    }
    varkv::RunConfig c = f.config;
    const CLI::Option* dim_opt = cmd->get_option_no_throw("--model-dim");
    if (!dim_opt || dim_opt->count() == 0) c.model_dim = std::size_t(c.heads) * c.head_dim;
    if (!policy.empty()) c.policy.kind = varkv::policy_from_name(policy);
    if (!strategy.empty()) c.policy.strategy = varkv::strategy_from_name(strategy);
    const CLI::Option* merge_opt = cmd->get_option_no_throw("--no-merge");
    if (merge_opt && merge_opt->count() > 0) c.policy.merge_final_step = false;
    if (!f.planted_json.empty()) {
        varkv::json model_patch{{"model", {{"planted", varkv::json::parse(f.planted_json)}}}};
        varkv::RunConfig patch = varkv::config_from_json(model_patch);
        c.planted = patch.planted;
    }
    c.seed = std::uint64_t(f.seed_raw);
    c.seed_set = true;
    return c;
}

std::vector<double> parse_ratio_list(const std::string& csv) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos < csv.size()) {
        std::size_t comma = csv.find(',', pos);
        if (comma == std::string::npos) comma = csv.size();
        out.push_back(std::stod(csv.substr(pos, comma - pos)));
        pos = comma + 1;
    }
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"next-scale attention engine with head-aware KV cache compression"};
    app.require_subcommand(1);

    CliFlags f;
    std::string policy, strategy;

    auto* classify_cmd = app.add_subcommand("classify", "calibrate and write head classification");
    std::size_t samples = 1;
    std::string classify_out = "classification.json";
    double classify_alpha = 0.25;
    add_model_flags(classify_cmd, f);
    classify_cmd->add_option("--alpha", classify_alpha, "contextual head ratio");
    classify_cmd->add_option("--samples", samples, "calibration sample count");
    classify_cmd->add_option("--out", classify_out, "output JSON path");

    auto* run_cmd = app.add_subcommand("run", "execute one generation run");
    add_model_flags(run_cmd, f);
    add_policy_flags(run_cmd, f, policy, strategy);
    run_cmd->add_option("--trace", f.config.outputs.trace_path, "trace JSON output path");
    run_cmd->add_option("--metrics", f.config.outputs.metrics_path, "metrics CSV output path");
    run_cmd->add_flag("--attention-maps", f.config.outputs.attention_maps,
                      "embed final-step attention maps in the trace");

    auto* sweep_cmd = app.add_subcommand("sweep", "compression sensitivity sweep");
    std::string ratios_csv = "0.0,0.5,0.9";
    bool retention_mode = false;
    add_model_flags(sweep_cmd, f);
    add_policy_flags(sweep_cmd, f, policy, strategy);
    sweep_cmd->add_option("--ratios", ratios_csv, "comma-separated compression ratios");
    sweep_cmd->add_flag("--retention", retention_mode,
                        "compare init+recent vs. intermediate retention instead");
    sweep_cmd->add_option("--metrics", f.config.outputs.metrics_path, "metrics CSV output path");

    auto* mask_cmd = app.add_subcommand("mask", "selective head masking experiment");
    std::string mask_type = "contextual";
    double mask_fraction = 0.1;
    add_model_flags(mask_cmd, f);
    mask_cmd->add_option("--classification", f.config.classification_path,
                         "classification JSON path");
    mask_cmd->add_option("--mask-type", mask_type, "contextual|structural|all");
    mask_cmd->add_option("--fraction", mask_fraction, "fraction of heads to mask");
    mask_cmd->add_option("--metrics", f.config.outputs.metrics_path, "metrics CSV output path");
    mask_cmd->add_option("--trace", f.config.outputs.trace_path, "trace JSON output path");

    auto* flops_cmd = app.add_subcommand("flops", "closed-form attention cost tables");
    std::int64_t flops_a = 2;
    int flops_k = 4;
    std::int64_t flops_budget = 0;
    std::int64_t flops_nobs = 32;
    flops_cmd->add_option("--a", flops_a, "scale growth factor");
    flops_cmd->add_option("--K", flops_k, "number of scales");
    flops_cmd->add_option("--budget", flops_budget, "per-head budget (0 = full cache only)");
    flops_cmd->add_option("--n-obs", flops_nobs, "observed query count for overhead");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help / --version
        app.exit(e);
        return 2;
    }

    try {
        if (app.got_subcommand(classify_cmd)) {
            varkv::RunConfig c = finalize(f, classify_cmd, "", "");
            c.budget.alpha = classify_alpha;
            varkv::HeadClassification cls = varkv::classify_model(c, samples);
            varkv::save_classification(cls, classify_out);
            std::printf("wrote %s (%zu contextual of %d heads)\n", classify_out.c_str(),
                        cls.contextual_count(), c.layers * c.heads);
        } else if (app.got_subcommand(run_cmd)) {
            varkv::RunConfig c = finalize(f, run_cmd, policy, strategy);
            auto t0 = std::chrono::steady_clock::now();
            varkv::RunOutput out = varkv::run(c);
            double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::printf("%s\n", varkv::metrics_csv_header());
            std::printf("%s\n", varkv::metrics_csv_row(out.metrics).c_str());
            // informational only; timing never enters the deterministic artifacts
            std::fprintf(stderr, "elapsed: %.3fs\n", secs);
        } else if (app.got_subcommand(sweep_cmd)) {
            varkv::RunConfig c = finalize(f, sweep_cmd, policy, strategy);
            std::vector<varkv::RunMetrics> rows;
            if (retention_mode) {
                rows = varkv::retention_compare(c);
            } else {
                rows = varkv::sweep(c, parse_ratio_list(ratios_csv),
                                    {varkv::SweepVariant::ContextualOnly,
                                     varkv::SweepVariant::StructuralOnly,
                                     varkv::SweepVariant::Both});
            }
            std::printf("%s\n", varkv::metrics_csv_header());
            for (const auto& m : rows) std::printf("%s\n", varkv::metrics_csv_row(m).c_str());
        } else if (app.got_subcommand(mask_cmd)) {
            varkv::RunConfig c = finalize(f, mask_cmd, "", "");
            varkv::MaskConfig m;
            if (mask_type == "contextual") m.target = varkv::MaskTarget::Contextual;
            else if (mask_type == "structural") m.target = varkv::MaskTarget::Structural;
            else if (mask_type == "all") m.target = varkv::MaskTarget::All;
            else throw varkv::config_error("unknown mask type: " + mask_type);
            m.fraction = mask_fraction;
            c.masking = m;
            varkv::RunOutput out = varkv::mask_run(c);
            std::printf("%s\n", varkv::metrics_csv_header());
            std::printf("%s\n", varkv::metrics_csv_row(out.metrics).c_str());
        } else if (app.got_subcommand(flops_cmd)) {
            varkv::oracle::FlopReport vanilla = varkv::oracle::vanilla_flops(flops_a, flops_k);
            std::printf("k,n_k,t_k,vanilla%s\n", flops_budget > 0 ? ",budgeted" : "");
            varkv::ScaleSchedule sched = varkv::build_schedule(flops_a, flops_k);
            varkv::oracle::FlopReport hack;
            if (flops_budget > 0)
                hack = varkv::oracle::budgeted_flops(flops_a, flops_k, flops_budget, flops_nobs);
            for (int k = 1; k <= flops_k; ++k) {
                std::printf("%d,%lld,%lld,%lld", k, (long long)sched.n(k), (long long)sched.t(k),
                            (long long)vanilla.per_step[std::size_t(k - 1)]);
                if (flops_budget > 0)
                    std::printf(",%lld", (long long)hack.per_step[std::size_t(k - 1)]);
                std::printf("\n");
            }
            std::printf("total,,,%lld", (long long)vanilla.total);
            if (flops_budget > 0) std::printf(",%lld", (long long)hack.total);
            std::printf("\n");
            if (flops_budget > 0)
                std::printf("overhead (n_obs=%lld): %lld from step %d\n", (long long)flops_nobs,
                            (long long)hack.overhead_total, hack.first_compressed_step);
        }
    } catch (const varkv::config_error& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return 2;
    } catch (const varkv::json::exception& e) {
        // every JSON input here is user-provided config material
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 0;
}
