#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "varkv/classifier.hpp"

using namespace varkv;

namespace {

// scatter `count` vertical heads over the grid, the rest multi-diagonal
SyntheticModel planted_model(int layers, int heads, std::size_t dh, std::size_t count,
                             std::uint64_t seed, std::vector<std::pair<int, int>>* verticals) {
    std::map<std::pair<int, int>, PatternSpec> specs;
    Rng rng{seed};
    std::vector<std::pair<int, int>> all;
    for (int l = 0; l < layers; ++l)
        for (int h = 0; h < heads; ++h) all.emplace_back(l, h);
    std::vector<std::size_t> picks = sample_without_replacement(all.size(), count, rng);
    std::size_t p = 0;
    for (std::size_t i = 0; i < all.size(); ++i) {
        PatternSpec spec;
        if (p < picks.size() && picks[p] == i) {
            spec.kind = PatternKind::Vertical;
            spec.targets = {0, std::int64_t(1 + rng.next_below(4))};
            if (verticals) verticals->push_back(all[i]);
            ++p;
        } else {
            spec.kind = PatternKind::MultiDiagonal;
            spec.offset = std::int64_t(rng.next_below(5)) - 2;
            spec.bandwidth = 1 + std::int64_t(rng.next_below(2));
        }
        specs[all[i]] = spec;
    }
    SyntheticModel base = synth_model(layers, heads, std::size_t(heads) * dh, dh, seed);
    return plant_patterns(base, specs);
}

} // namespace

TEST_CASE("collect_variances separates planted head kinds") {
    ScaleSchedule sched = build_schedule(2, 3);
    std::vector<std::pair<int, int>> verticals;
    SyntheticModel model = planted_model(2, 4, 4, 2, 7, &verticals);
    VarianceMatrix var = collect_variances(model, sched, {1, 2, 3});
    CHECK(var.sample_count == 3);
    for (int l = 0; l < 2; ++l) {
        for (int h = 0; h < 4; ++h) {
            bool is_vertical = false;
            for (auto& v : verticals) is_vertical = is_vertical || (v == std::make_pair(l, h));
            if (is_vertical) {
                CHECK(var.values(std::size_t(l), std::size_t(h)) == 0.0);
            } else {
                CHECK(var.values(std::size_t(l), std::size_t(h)) > 0.0);
            }
        }
    }
}

TEST_CASE("collect_variances requires seeds") {
    ScaleSchedule sched = build_schedule(2, 2);
    SyntheticModel model = synth_model(1, 1, 2, 2, 1);
    CHECK_THROWS_AS(collect_variances(model, sched, {}), config_error);
}

TEST_CASE("classify splits planted heads exactly") {
    ScaleSchedule sched = build_schedule(2, 3);
    std::vector<std::pair<int, int>> verticals;
    SyntheticModel model = planted_model(2, 8, 4, 4, 11, &verticals);
    VarianceMatrix var = collect_variances(model, sched, {5});
    HeadClassification cls = classify(var, 0.25); // round(0.25 * 16) = 4
    CHECK(cls.contextual_count() == 4);
    for (auto [l, h] : verticals) CHECK(cls.is_contextual(l, h));
    // union/disjointness per layer
    for (int l = 0; l < 2; ++l) {
        std::set<int> seen;
        for (int h : cls.contextual[std::size_t(l)]) seen.insert(h);
        for (int h : cls.structural[std::size_t(l)]) seen.insert(h);
        CHECK(seen.size() == 8);
    }
}

TEST_CASE("classify near-zero alpha keeps a single head") {
    VarianceMatrix var;
    var.values = Matrix(2, 4);
    for (std::size_t i = 0; i < 8; ++i) var.values.data[i] = double(i + 1);
    HeadClassification cls = classify(var, 0.1); // round(0.8) = 1
    CHECK(cls.contextual_count() == 1);
    CHECK(cls.is_contextual(0, 0)); // lowest variance entry
}

TEST_CASE("classify breaks variance ties by (layer, head) index") {
    VarianceMatrix var;
    var.values = Matrix(2, 2);
    var.values.data = {1.0, 1.0, 1.0, 1.0};
    HeadClassification cls = classify(var, 0.5); // 2 of 4, all tied
    CHECK(cls.contextual[0] == std::vector<int>{0, 1});
    CHECK(cls.structural[1] == std::vector<int>{0, 1});
}

TEST_CASE("classify is scale invariant") {
    Rng rng{31};
    VarianceMatrix var;
    var.values = Matrix(3, 8);
    for (double& v : var.values.data) v = rng.next_unit();
    HeadClassification a = classify(var, 0.3);
    VarianceMatrix scaled = var;
    for (double& v : scaled.values.data) v *= 1234.5;
    HeadClassification b = classify(scaled, 0.3);
    CHECK(a.contextual == b.contextual);
    CHECK(a.structural == b.structural);
}

TEST_CASE("classify validates alpha") {
    VarianceMatrix var;
    var.values = Matrix(1, 2);
    CHECK_THROWS_AS(classify(var, 0.0), config_error);
    CHECK_THROWS_AS(classify(var, 1.0), config_error);
}

TEST_CASE("reorder permutation examples and inverse") {
    HeadClassification cls;
    cls.contextual = {{3, 5}, {}, {0, 1, 2}};
    cls.structural = {{0, 1, 2, 4, 6, 7}, {0, 1, 2}, {}};
    std::vector<std::vector<int>> perms = reorder(cls);
    CHECK(perms[0] == std::vector<int>{3, 5, 0, 1, 2, 4, 6, 7});
    CHECK(perms[1] == std::vector<int>{0, 1, 2});
    CHECK(perms[2] == std::vector<int>{0, 1, 2});
    for (const auto& p : perms) {
        std::vector<int> inv = invert_permutation(p);
        for (std::size_t i = 0; i < p.size(); ++i) CHECK(inv[std::size_t(p[i])] == int(i));
    }
}

TEST_CASE("one calibration seed matches fifty on planted models") {
    ScaleSchedule sched = build_schedule(2, 3);
    std::vector<std::pair<int, int>> verticals;
    SyntheticModel model = planted_model(2, 4, 4, 2, 13, &verticals);
    VarianceMatrix one = collect_variances(model, sched, {100});
    std::vector<std::uint64_t> many(50);
    for (std::size_t i = 0; i < many.size(); ++i) many[i] = 100 + i;
    VarianceMatrix fifty = collect_variances(model, sched, many);
    HeadClassification a = classify(one, 0.25);
    HeadClassification b = classify(fifty, 0.25);
    CHECK(a.contextual == b.contextual);
    CHECK(a.structural == b.structural);
    CHECK(reorder(a) == reorder(b));
}
