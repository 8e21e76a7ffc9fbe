#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <set>

#include "varkv/compression.hpp"
#include "varkv/engine.hpp"
#include "varkv/oracle.hpp"

using namespace varkv;

namespace {

Matrix filled(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale = 1.0) {
    Matrix m(rows, cols);
    Rng rng(seed);
    for (double& v : m.data) v = rng.next_symmetric() * scale;
    return m;
}

CachePartition make_partition(std::size_t rows, std::size_t dh, std::uint64_t seed) {
    CachePartition p;
    p.keys = filled(rows, dh, seed);
    p.values = filled(rows, dh, seed ^ 0xffff);
    p.origin.resize(rows);
    for (std::size_t i = 0; i < rows; ++i) p.origin[i] = std::int64_t(i);
    return p;
}

ImportanceScores scores_of(std::vector<double> v) {
    ImportanceScores s;
    s.scores = std::move(v);
    s.observed_queries = 1;
    return s;
}

} // namespace

TEST_CASE("select_query_rows strategies") {
    CHECK(select_query_rows(4, 2, QueryStrategy::Uniform) == std::vector<std::size_t>{0, 2});
    CHECK(select_query_rows(4, 8, QueryStrategy::Uniform) ==
          std::vector<std::size_t>{0, 1, 2, 3});
    CHECK(select_query_rows(5, 2, QueryStrategy::Init) == std::vector<std::size_t>{0, 1});
    CHECK(select_query_rows(5, 2, QueryStrategy::Recent) == std::vector<std::size_t>{3, 4});
    std::vector<std::size_t> random_rows = select_query_rows(10, 4, QueryStrategy::Random, 7);
    CHECK(random_rows.size() == 4);
    CHECK(std::is_sorted(random_rows.begin(), random_rows.end()));
    CHECK(random_rows == select_query_rows(10, 4, QueryStrategy::Random, 7));
}

TEST_CASE("subset_attention with enough observers equals full attention") {
    Matrix q = filled(4, 3, 5);
    Matrix k = filled(9, 3, 6);
    Matrix full = subset_attention(q, k, 99, QueryStrategy::Full);
    for (QueryStrategy s : {QueryStrategy::Uniform, QueryStrategy::Random, QueryStrategy::Init,
                            QueryStrategy::Recent}) {
        Matrix sub = subset_attention(q, k, 99, s, 3);
        CHECK(sub.same_bits(full));
    }
}

TEST_CASE("cumulative_scores examples") {
    Matrix one(1, 3);
    one.data = {0.2, 0.3, 0.5};
    ImportanceScores s = cumulative_scores(one);
    CHECK(s.scores == std::vector<double>{0.2, 0.3, 0.5});

    Matrix att(2, 2);
    att.data = {0.7, 0.3, 0.2, 0.8};
    ImportanceScores s2 = cumulative_scores(att);
    CHECK(s2.scores[0] == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(s2.scores[1] == doctest::Approx(1.1).epsilon(1e-15));

    // uniform attention: every token collects n_obs / T
    Matrix uni(4, 5);
    for (double& v : uni.data) v = 0.2;
    ImportanceScores s3 = cumulative_scores(uni);
    for (double v : s3.scores) CHECK(v == doctest::Approx(4.0 / 5.0).epsilon(1e-15));
}

TEST_CASE("top_k_indices examples and tie breaking") {
    CHECK(top_k_indices({0.1, 0.5, 0.3, 0.1}, 2) == std::vector<std::size_t>{1, 2});
    CHECK(top_k_indices({0.4, 0.4, 0.2}, 1) == std::vector<std::size_t>{0});
    CHECK(top_k_indices({1.0, 1.0, 1.0}, 2) == std::vector<std::size_t>{0, 1});
    CHECK_THROWS_AS(top_k_indices({1.0}, 2), state_error);
}

TEST_CASE("top_k_indices agrees with the sort oracle on 1000 random vectors") {
    Rng rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        std::size_t n = 1 + rng.next_below(60);
        std::size_t k = rng.next_below(n + 1);
        std::vector<double> scores(n);
        for (double& s : scores) {
            // coarse grid to provoke ties
            s = double(rng.next_below(8)) / 4.0;
        }
        CHECK(top_k_indices(scores, k) == oracle::naive_topk(scores, k));
    }
}

TEST_CASE("compress_contextual evicts by score and keeps survivors bitwise") {
    CachePartition part = make_partition(6, 4, 31);
    Matrix keys_before = part.keys;
    ImportanceScores s = scores_of({0.9, 0.1, 0.8, 0.7, 0.6, 0.5}); // index 1 lowest
    compress_contextual(part, s, 5, false, true);
    CHECK(part.rows() == 5);
    CHECK(part.origin == std::vector<std::int64_t>{0, 2, 3, 4, 5});
    for (std::size_t i = 0; i < 5; ++i) {
        std::size_t src = std::size_t(part.origin[i]);
        for (std::size_t d = 0; d < 4; ++d) CHECK(part.keys(i, d) == keys_before(src, d));
    }
}

TEST_CASE("compress_contextual tie break keeps lowest indices") {
    CachePartition part = make_partition(5, 2, 32);
    ImportanceScores s = scores_of({1.0, 1.0, 1.0, 1.0, 1.0});
    compress_contextual(part, s, 3, false, false);
    CHECK(part.origin == std::vector<std::int64_t>{0, 1, 2});
}

TEST_CASE("final-step merge of an identical evicted key leaves retained bits near-identical") {
    CachePartition part = make_partition(3, 2, 33);
    // make row 2 a duplicate of row 0, then evict it at the final step
    for (std::size_t d = 0; d < 2; ++d) {
        part.keys(2, d) = part.keys(0, d);
        part.values(2, d) = part.values(0, d);
    }
    Matrix before = part.keys;
    ImportanceScores s = scores_of({0.5, 0.4, 0.1});
    compress_contextual(part, s, 2, true, true);
    CHECK(part.rows() == 2);
    for (std::size_t d = 0; d < 2; ++d)
        CHECK(part.keys(0, d) == doctest::Approx(before(0, d)).epsilon(1e-12));
}

TEST_CASE("merge_evicted identities") {
    Matrix rk = filled(3, 4, 41), rv = filled(3, 4, 42);
    Matrix rk_copy = rk, rv_copy = rv;
    Matrix empty_k(0, 4), empty_v(0, 4);
    merge_evicted(rk, rv, empty_k, empty_v);
    CHECK(rk.same_bits(rk_copy));
    CHECK(rv.same_bits(rv_copy));

    // orthogonal evicted key has weight zero
    Matrix ok(1, 2), ov(1, 2);
    ok.data = {1.0, 0.0};
    ov.data = {5.0, 5.0};
    Matrix ek(1, 2), ev(1, 2);
    ek.data = {0.0, 1.0};
    ev.data = {9.0, 9.0};
    Matrix ok_copy = ok, ov_copy = ov;
    merge_evicted(ok, ov, ek, ev);
    CHECK(ok.same_bits(ok_copy));
    CHECK(ov.same_bits(ov_copy));

    // zero-norm evicted key: similarity defined as zero
    Matrix zk(1, 2), zv(1, 2);
    zk.data = {0.0, 0.0};
    zv.data = {1.0, 1.0};
    Matrix rk2 = filled(2, 2, 43), rv2 = filled(2, 2, 44);
    Matrix rk2_copy = rk2;
    merge_evicted(rk2, rv2, zk, zv);
    CHECK(rk2.same_bits(rk2_copy));
}

TEST_CASE("merge_evicted produces convex combinations") {
    Rng rng(50);
    for (int trial = 0; trial < 50; ++trial) {
        std::size_t dh = 1 + rng.next_below(6);
        Matrix rk = filled(1 + rng.next_below(4), dh, rng.next_u64());
        Matrix rv = filled(rk.rows, dh, rng.next_u64());
        Matrix ek = filled(rng.next_below(5), dh, rng.next_u64());
        Matrix ev = filled(ek.rows, dh, rng.next_u64());
        Matrix rk_before = rk, rv_before = rv;
        merge_evicted(rk, rv, ek, ev);
        for (std::size_t t = 0; t < rk.rows; ++t) {
            for (std::size_t d = 0; d < dh; ++d) {
                double lo = rk_before(t, d), hi = rk_before(t, d);
                double lov = rv_before(t, d), hiv = rv_before(t, d);
                for (std::size_t e = 0; e < ek.rows; ++e) {
                    lo = std::min(lo, ek(e, d));
                    hi = std::max(hi, ek(e, d));
                    lov = std::min(lov, ev(e, d));
                    hiv = std::max(hiv, ev(e, d));
                }
                CHECK(rk(t, d) >= lo - 1e-12);
                CHECK(rk(t, d) <= hi + 1e-12);
                CHECK(rv(t, d) >= lov - 1e-12);
                CHECK(rv(t, d) <= hiv + 1e-12);
            }
        }
    }
}

TEST_CASE("compress_structural constructed example") {
    // a=2, step 4: 85 cached rows, budget 75, init 5, current scale 64 -> M = 6
    CachePartition part = make_partition(85, 2, 61);
    std::vector<double> s(85, 0.0);
    // middle region is positions 5..20; give the top six known scores
    std::set<std::size_t> expected_middle{6, 8, 9, 13, 17, 20};
    for (std::size_t i = 5; i <= 20; ++i) s[i] = 0.1;
    for (std::size_t i : expected_middle) s[i] = 1.0;
    compress_structural(part, scores_of(s), 75, 5, 64);
    CHECK(part.rows() == 75);

    // brute-force set arithmetic over origins
    std::set<std::int64_t> got(part.origin.begin(), part.origin.end());
    std::set<std::int64_t> want;
    for (std::int64_t i = 0; i < 5; ++i) want.insert(i);
    for (std::size_t i : expected_middle) want.insert(std::int64_t(i));
    for (std::int64_t i = 21; i < 85; ++i) want.insert(i);
    CHECK(got == want);
}

TEST_CASE("compress_structural M = 0 keeps init and recent only") {
    CachePartition part = make_partition(85, 2, 62);
    std::vector<double> s(85, 0.5);
    compress_structural(part, scores_of(s), 69, 5, 64);
    CHECK(part.rows() == 69);
    std::set<std::int64_t> got(part.origin.begin(), part.origin.end());
    for (std::int64_t i = 0; i < 5; ++i) CHECK(got.count(i) == 1);
    for (std::int64_t i = 21; i < 85; ++i) CHECK(got.count(i) == 1);
    for (std::int64_t i = 5; i < 21; ++i) CHECK(got.count(i) == 0);
}

TEST_CASE("compress_structural shrinks the init prefix when M < 0") {
    CachePartition part = make_partition(85, 2, 63);
    std::vector<double> s(85, 0.5);
    compress_structural(part, scores_of(s), 66, 5, 64); // 66 - 5 - 64 = -3
    CHECK(part.rows() == 66);
    CHECK(part.origin[0] == 0);
    CHECK(part.origin[1] == 1);
    CHECK(part.origin[2] == 21); // only 66-64 = 2 init tokens survive
}

TEST_CASE("compress_structural rejects budgets below the current scale") {
    CachePartition part = make_partition(85, 2, 64);
    std::vector<double> s(85, 0.5);
    CHECK_THROWS_AS(compress_structural(part, scores_of(s), 20, 5, 64), config_error);
}

TEST_CASE("baseline positional") {
    // N_init = 0 degenerates to a sliding window of the last B tokens
    CachePartition part = make_partition(20, 2, 71);
    ImportanceScores none;
    baseline_compress(part, none, 6, BaselinePolicy::Positional, 0);
    CHECK(part.rows() == 6);
    CHECK(part.origin == std::vector<std::int64_t>{14, 15, 16, 17, 18, 19});

    CachePartition sink = make_partition(20, 2, 72);
    baseline_compress(sink, none, 6, BaselinePolicy::Positional, 2);
    CHECK(sink.origin == std::vector<std::int64_t>{0, 1, 16, 17, 18, 19});
}

TEST_CASE("baseline score-topk equals contextual compression without merge") {
    CachePartition a = make_partition(12, 3, 73);
    CachePartition b = a;
    std::vector<double> s(12);
    Rng rng(74);
    for (double& v : s) v = rng.next_unit();
    baseline_compress(a, scores_of(s), 5, BaselinePolicy::ScoreTopK, 2);
    compress_contextual(b, scores_of(s), 5, false, true);
    CHECK(a.keys.same_bits(b.keys));
    CHECK(a.values.same_bits(b.values));
    CHECK(a.origin == b.origin);
}

TEST_CASE("every policy retains a subset in identical relative order") {
    Rng rng(75);
    for (int trial = 0; trial < 60; ++trial) {
        std::size_t rows = 8 + rng.next_below(40);
        std::int64_t budget = 1 + std::int64_t(rng.next_below(rows));
        CachePartition part = make_partition(rows, 2, rng.next_u64());
        std::vector<double> s(rows);
        for (double& v : s) v = rng.next_unit();
        int which = int(rng.next_below(4));
        std::int64_t n_init = std::int64_t(rng.next_below(4));
        if (which == 0) {
            compress_contextual(part, scores_of(s), budget, trial % 2 == 0, true);
        } else if (which == 1) {
            // keep the structural preconditions satisfiable
            std::int64_t n_k = std::min<std::int64_t>(budget, std::int64_t(rows) / 2);
            if (n_k < 1) continue;
            compress_structural(part, scores_of(s), budget, n_init, n_k);
        } else if (which == 2) {
            baseline_compress(part, scores_of(s), budget, BaselinePolicy::ScoreTopK, n_init);
        } else {
            baseline_compress(part, scores_of(s), budget, BaselinePolicy::Positional, n_init);
        }
        CHECK(std::int64_t(part.rows()) == std::min<std::int64_t>(std::int64_t(rows), budget));
        CHECK(std::is_sorted(part.origin.begin(), part.origin.end()));
        for (std::int64_t p : part.origin) {
            CHECK(p >= 0);
            CHECK(p < std::int64_t(rows));
        }
    }
}

TEST_CASE("compress_contextual equals the sort-oracle selection on random instances") {
    Rng rng(901);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t rows = 2 + rng.next_below(60);
        std::int64_t budget = 1 + std::int64_t(rng.next_below(rows - 1));
        CachePartition part = make_partition(rows, 3, rng.next_u64());
        std::vector<double> s(rows);
        for (double& v : s) v = double(rng.next_below(16)) / 8.0;
        compress_contextual(part, scores_of(s), budget, false, false);
        std::vector<std::size_t> want = oracle::naive_topk(s, std::size_t(budget));
        REQUIRE(part.origin.size() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i)
            CHECK(part.origin[i] == std::int64_t(want[i]));
    }
}

TEST_CASE("compress_structural equals a brute-force reimplementation") {
    Rng rng(907);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t rows = 10 + rng.next_below(80);
        std::int64_t n_k = 1 + std::int64_t(rng.next_below(rows / 2));
        std::int64_t n_init = std::int64_t(rng.next_below(6));
        std::int64_t budget = n_k + std::int64_t(rng.next_below(rows - std::size_t(n_k)));
        if (std::int64_t(rows) <= budget) continue;
        CachePartition part = make_partition(rows, 2, rng.next_u64());
        std::vector<double> s(rows);
        for (double& v : s) v = double(rng.next_below(12)) / 6.0;
        compress_structural(part, scores_of(s), budget, n_init, n_k);

        // independent reconstruction by set arithmetic
        std::size_t init_count = std::size_t(std::min<std::int64_t>(n_init, std::int64_t(rows)));
        std::int64_t m = budget - std::int64_t(init_count) - n_k;
        if (m < 0) {
            init_count = std::size_t(budget - n_k);
            m = 0;
        }
        std::set<std::int64_t> want;
        for (std::size_t i = 0; i < init_count; ++i) want.insert(std::int64_t(i));
        std::size_t recent_begin = rows - std::size_t(n_k);
        std::vector<double> middle(s.begin() + std::ptrdiff_t(init_count),
                                   s.begin() + std::ptrdiff_t(recent_begin));
        std::size_t take = std::min<std::size_t>(std::size_t(m), middle.size());
        for (std::size_t i : oracle::naive_topk(middle, take))
            want.insert(std::int64_t(init_count + i));
        for (std::size_t i = recent_begin; i < rows; ++i) want.insert(std::int64_t(i));
        std::set<std::int64_t> got(part.origin.begin(), part.origin.end());
        CHECK(got == want);
    }
}

TEST_CASE("merge assignment breaks exact similarity ties toward the lowest index") {
    // two identical retained keys with different values; the evicted
    // duplicate must fold into the first one only
    Matrix rk(2, 2), rv(2, 2);
    rk.data = {1.0, 2.0, 1.0, 2.0};
    rv.data = {10.0, 10.0, -10.0, -10.0};
    Matrix ek(1, 2), ev(1, 2);
    ek.data = {1.0, 2.0};
    ev.data = {0.0, 0.0};
    Matrix rv_before = rv;
    merge_evicted(rk, rv, ek, ev);
    CHECK(rv(0, 0) != rv_before(0, 0));          // pulled toward the evicted value
    CHECK(rv(1, 0) == rv_before(1, 0));          // untouched
    CHECK(rv(1, 1) == rv_before(1, 1));
}

TEST_CASE("uniform query sampling tracks full importance best on diagonal patterns") {
    // rank statistic: overlap of the estimated top-k set with the full-query
    // top-k set. Position-dependent (multi-diagonal) attention is where
    // stratified query coverage matters, so the ground truth is a planted
    // template with seeded offset/bandwidth.
    const std::size_t n_obs = 8;
    const std::size_t k_sel = 20;
    const QueryStrategy strategies[4] = {QueryStrategy::Uniform, QueryStrategy::Random,
                                         QueryStrategy::Init, QueryStrategy::Recent};
    for (int num_scales : {4, 5}) {
        ScaleSchedule sched = build_schedule(2, num_scales);
        std::vector<std::int64_t> origin(std::size_t(sched.total()));
        for (std::size_t i = 0; i < origin.size(); ++i) origin[i] = std::int64_t(i);
        const std::size_t n_q = std::size_t(sched.n(num_scales));
        double overlap_sum[4] = {0, 0, 0, 0};
        const int seeds = 100;
        for (int seed = 1; seed <= seeds; ++seed) {
            Rng rng{std::uint64_t(seed)};
            PatternSpec spec;
            spec.kind = PatternKind::MultiDiagonal;
            spec.offset = std::int64_t(rng.next_below(7)) - 3;
            spec.bandwidth = 1 + std::int64_t(rng.next_below(3));
            Matrix full_att = planted_attention(spec, sched, num_scales, n_q, origin);
            std::vector<std::size_t> full_top =
                top_k_indices(cumulative_scores(full_att).scores, k_sel);
            std::set<std::size_t> full_set(full_top.begin(), full_top.end());
            for (int s = 0; s < 4; ++s) {
                std::vector<std::size_t> rows =
                    select_query_rows(n_q, n_obs, strategies[s], std::uint64_t(seed) * 31 + 7);
                Matrix att = planted_attention_rows(spec, sched, num_scales, rows, origin);
                std::vector<std::size_t> top =
                    top_k_indices(cumulative_scores(att).scores, k_sel);
                std::size_t hits = 0;
                for (std::size_t idx : top) hits += full_set.count(idx);
                overlap_sum[s] += double(hits) / double(k_sel);
            }
        }
        CHECK(overlap_sum[0] >= overlap_sum[1]);
        CHECK(overlap_sum[0] >= overlap_sum[2]);
        CHECK(overlap_sum[0] >= overlap_sum[3]);
    }
}
