#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "nncomp/memory_nas.hpp"
#include "toys.hpp"

using namespace nncomp;
using namespace nncomp::testutil;

TEST_CASE("budget derivation") {
    double budget = derive_budget(22.06 * GiB, 0.05, 1.3 * GiB);
    CHECK(std::abs(budget / GiB - 19.66) <= 0.01);
    CHECK(derive_budget(7.0, 0.0, 0.0) == 7.0);
    CHECK_THROWS_AS(derive_budget(10.0, 0.5, 6.0), std::invalid_argument);
    CHECK_THROWS_AS(derive_budget(10.0, 1.0, 0.0), std::invalid_argument);
}

TEST_CASE("production weights occupy 22.9 GiB at two bytes per parameter") {
    auto cfg = table2_config();
    auto m = estimate_memory(cfg, 1, 1, 2.0);
    CHECK(std::abs(m.weight_bytes / GiB - 22.9) <= 0.05);
    CHECK(m.total_bytes == m.weight_bytes + m.kv_cache_bytes + m.ssm_state_bytes);
}

TEST_CASE("kv cache arithmetic: 4 layers, 8 kv heads, dim 128, 128k context") {
    ModelConfig c;
    c.n_layers = 4;
    c.pattern = LayerPattern::from_str("AAAA");
    c.d_model = 512;
    c.n_q_heads = 8;
    c.n_kv_heads = 8;
    c.attn_head_dim = 128;
    c.vocab_size = 0;
    auto m = estimate_memory(c, 131072, 1, 2.0);
    CHECK(m.kv_cache_bytes / GiB == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("kv cache linear in seq_len, ssm state constant") {
    auto cfg = toy_config(6, 16, 32);
    auto a = estimate_memory(cfg, 100, 2, 2.0);
    auto b = estimate_memory(cfg, 200, 2, 2.0);
    CHECK(b.kv_cache_bytes == 2.0 * a.kv_cache_bytes);
    CHECK(b.ssm_state_bytes == a.ssm_state_bytes);
    CHECK(b.weight_bytes == a.weight_bytes);
    // monotone in batch
    auto c2 = estimate_memory(cfg, 100, 4, 2.0);
    CHECK(c2.total_bytes > a.total_bytes);
    CHECK_THROWS_AS(estimate_memory(cfg, 0, 1, 2.0), std::invalid_argument);
}

TEST_CASE("ssm state accounting") {
    auto cfg = toy_config(2, 16, 32);
    cfg.pattern = LayerPattern::from_str("MM");
    auto m = estimate_memory(cfg, 10, 3, 4.0);
    double per_layer = static_cast<double>(cfg.d_inner() * cfg.mamba_state_dim + cfg.conv_window * cfg.conv_channels());
    CHECK(m.ssm_state_bytes == 2.0 * 3.0 * per_layer * 4.0);
    CHECK(m.kv_cache_bytes == 0.0);
}

TEST_CASE("depth reduction 62 -> 56 keeps 28 mamba / 24 ffn / 4 attention") {
    auto base = build_layer_pattern(62, 6);
    auto p = reduce_pattern(base, 56);
    CHECK(static_cast<int64_t>(p.kinds.size()) == 56);
    CHECK(p.count(LayerKind::Mamba) == 28);
    CHECK(p.count(LayerKind::Ffn) == 24);
    CHECK(p.count(LayerKind::Attention) == 4);
    CHECK_THROWS_AS(reduce_pattern(base, 70), std::invalid_argument);
}

TEST_CASE("published candidate trio fits the 19.66 GiB budget") {
    double budget = derive_budget(22.06 * GiB, 0.05, 1.3 * GiB);
    auto base = nas_base_config();
    struct Row {
        int64_t d_model, d_ffn, heads;
    };
    for (Row r : {Row{4480, 17920, 112}, Row{4480, 15680, 128}, Row{4800, 14400, 120}}) {
        auto cfg = make_candidate_config(base, 56, r.d_model, r.d_ffn, r.heads);
        auto m = estimate_memory(cfg, 131072, 1, 2.0);
        CHECK(m.total_bytes <= budget);
        CHECK(m.total_bytes > 0.9 * budget);  // near the frontier, as a real search would be
    }
    // the middle row is the 8.89e9-parameter design point, within 3%
    auto c2 = make_candidate_config(base, 56, 4480, 15680, 128);
    double params = static_cast<double>(count_params(c2));
    CHECK(std::abs(params - 8.89e9) / 8.89e9 <= 0.03);
}

TEST_CASE("enumeration equals exhaustive filtering on a toy grid") {
    SearchSpace s;
    s.base = nas_base_config();
    s.depths = {54, 55, 56};
    s.d_models = {4480, 4800, 5120};
    s.d_ffns = {13440, 15680, 20480};
    s.mamba_head_counts = {112, 128};
    double budget = derive_budget(22.06 * GiB, 0.05, 1.3 * GiB);
    auto set = enumerate_candidates(s, budget, 131072, 1, 2.0);

    // independent brute-force filter
    int64_t feasible = 0;
    double max_total = 0;
    for (int64_t d : s.depths)
        for (int64_t dm : s.d_models)
            for (int64_t df : s.d_ffns)
                for (int64_t mh : s.mamba_head_counts) {
                    auto cfg = make_candidate_config(s.base, d, dm, df, mh);
                    double total = estimate_memory(cfg, 131072, 1, 2.0).total_bytes;
                    if (total <= budget) {
                        ++feasible;
                        max_total = std::max(max_total, total);
                    }
                }
    CHECK(static_cast<int64_t>(set.candidates.size()) == feasible);
    CHECK(feasible > 0);
    CHECK(feasible < 54);  // some grid points must violate the budget
    for (const auto& c : set.candidates) CHECK(c.memory.total_bytes <= budget);

    auto top = rank_candidates(set, 3);
    REQUIRE(top.size() == 3);
    CHECK(top[0].memory.total_bytes == max_total);
    CHECK(top[0].memory.total_bytes >= top[1].memory.total_bytes);
    CHECK(top[1].memory.total_bytes >= top[2].memory.total_bytes);

    // infinite budget keeps the whole grid; zero budget keeps nothing
    CHECK(enumerate_candidates(s, 1e30, 131072, 1, 2.0).candidates.size() == 3u * 3u * 3u * 2u);
    CHECK(enumerate_candidates(s, 0.0, 131072, 1, 2.0).candidates.empty());
    CHECK_THROWS_AS(rank_candidates(set, 0), std::invalid_argument);
    SearchSpace empty = s;
    empty.depths.clear();
    CHECK_THROWS_AS(enumerate_candidates(empty, budget, 131072, 1, 2.0), std::invalid_argument);
}

TEST_CASE("ranking tie-break: larger d_model, then larger d_ffn") {
    auto base = toy_config(4, 16, 32);
    Candidate a{base, {}}, b{base, {}}, c{base, {}};
    a.memory.total_bytes = b.memory.total_bytes = c.memory.total_bytes = 100.0;
    a.config.d_model = 8;
    b.config.d_model = 16;
    c.config.d_model = 16;
    b.config.d_ffn = 64;
    c.config.d_ffn = 32;
    CandidateSet set;
    set.candidates = {a, c, b};
    auto top = rank_candidates(set, 3);
    CHECK(top[0].config.d_ffn == 64);   // d_model 16, bigger ffn first
    CHECK(top[1].config.d_ffn == 32);
    CHECK(top[2].config.d_model == 8);
}
