// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "oracles.hpp"

#include <cmath>
#include <map>

#include "grpolab/analysis.hpp"
#include "grpolab/datasynth.hpp"
#include "grpolab/errors.hpp"

using namespace grpolab;

TEST_CASE("aha detector: positives, negatives, boundaries") {
    const auto keywords = default_reflection_keywords();
    const auto hit = detect_aha("we need to re-evaluate the problem", keywords);
    CHECK(hit.has_aha);
    REQUIRE(hit.matched.size() == 1);
    CHECK(hit.matched[0] == "re-evaluate");

    CHECK(!detect_aha("the answer is 5", keywords).has_aha);
    // word boundaries: suffixed forms do not match
    CHECK(!detect_aha("the re-evaluated result", keywords).has_aha);
    CHECK(!detect_aha("awaiting results", keywords).has_aha);
    CHECK(detect_aha("Wait, this is off.", keywords).has_aha);
    CHECK(detect_aha("We RE-CHECK the cells.", keywords).has_aha);

    const auto multi = detect_aha("wait, re-check and re-evaluate", keywords);
    CHECK(multi.matched.size() == 3);
    CHECK(std::is_sorted(multi.matched.begin(), multi.matched.end()));

    CHECK_THROWS_AS(detect_aha("anything", std::vector<std::string>{}), ConfigError);
}

TEST_CASE("detector agrees with the brute-force scanner on the frozen corpus") {
    const auto corpus =
        load_aha_records(std::string(GRPOLAB_FIXTURE_DIR) + "/aha_corpus.jsonl");
    REQUIRE(corpus.size() == 200);
    const auto keywords = default_reflection_keywords();
    for (const auto& rec : corpus) {
        bool brute = false;
        for (const auto& k : keywords) brute = brute || oracle::brute_keyword_hit(rec.response, k);
        CHECK(detect_aha(rec.response, keywords).has_aha == brute);
    }
}

TEST_CASE("aha report's table equals a direct recomputation on the corpus") {
    const auto corpus =
        load_aha_records(std::string(GRPOLAB_FIXTURE_DIR) + "/aha_corpus.jsonl");
    const auto keywords = default_reflection_keywords();
    const AhaReport rep = aha_report(corpus, keywords);

    // spreadsheet-style recomputation via the brute scanner
    std::map<std::string, std::array<int, 4>> tally; // total, with, cw, cwo
    for (const auto& rec : corpus) {
        auto& t = tally[rec.model_tag];
        bool brute = false;
        for (const auto& k : keywords) brute = brute || oracle::brute_keyword_hit(rec.response, k);
        t[0] += 1;
        if (brute) {
            t[1] += 1;
            t[2] += rec.reward;
        } else {
            t[3] += rec.reward;
        }
    }
    REQUIRE(rep.rows.size() == tally.size());
    for (const auto& row : rep.rows) {
        const auto& t = tally.at(row.model_tag);
        CHECK(row.total == t[0]);
        CHECK(row.with_aha == t[1]);
        CHECK(row.frequency_pct == doctest::Approx(100.0 * t[1] / t[0]).epsilon(1e-12));
        if (t[1] > 0) {
            CHECK(*row.acc_with_pct == doctest::Approx(100.0 * t[2] / t[1]).epsilon(1e-12));
        } else {
            CHECK(!row.acc_with_pct.has_value());
        }
        const int without = t[0] - t[1];
        if (without > 0) {
            CHECK(*row.acc_without_pct == doctest::Approx(100.0 * t[3] / without).epsilon(1e-12));
        } else {
            CHECK(!row.acc_without_pct.has_value());
        }
        // partition: every response lands in exactly one bucket
        CHECK(row.with_aha + without == row.total);
    }
}

TEST_CASE("aha report corner cases") {
    std::vector<AhaRecord> corpus;
    for (int i = 0; i < 8; ++i) {
        AhaRecord rec;
        rec.query_id = "q" + std::to_string(i);
        rec.model_tag = "m";
        const bool aha = i % 2 == 0;
        rec.response = aha ? "wait, let me look again \\boxed{1}" : "direct \\boxed{1}";
        rec.reward = aha ? 0 : 1; // every aha response wrong, every other right
        corpus.push_back(rec);
    }
    const auto rep = aha_report(corpus, default_reflection_keywords());
    REQUIRE(rep.rows.size() == 1);
    CHECK(*rep.rows[0].acc_with_pct == 0.0);
    CHECK(*rep.rows[0].acc_without_pct == 100.0);
    CHECK(rep.rows[0].frequency_pct == 50.0);

    CHECK_THROWS_AS(aha_report({}, default_reflection_keywords()), DataError);

    // 16 responses per query fixture: totals line up
    std::vector<AhaRecord> sixteen;
    for (int q = 0; q < 5; ++q) {
        for (int s = 0; s < 16; ++s) {
            AhaRecord rec;
            rec.query_id = "q" + std::to_string(q);
            rec.model_tag = "m";
            rec.response = "plain";
            rec.reward = 0;
            sixteen.push_back(rec);
        }
    }
    const auto rep16 = aha_report(sixteen, default_reflection_keywords());
    CHECK(rep16.rows[0].total == 16 * 5);
}

TEST_CASE("effective rank: uniform spectra, rank-1, scale invariance") {
    // diag(2,2,2,0) embedded in 6x4: three equal singular values -> eRank 3
    std::vector<double> m(6 * 4, 0.0);
    m[0 * 4 + 0] = 2.0;
    m[1 * 4 + 1] = 2.0;
    m[2 * 4 + 2] = 2.0;
    CHECK(effective_rank(6, 4, m) == doctest::Approx(3.0).epsilon(1e-9));

    // rank-1 outer product
    std::vector<double> r1(5 * 3);
    for (int r = 0; r < 5; ++r) {
        for (int c = 0; c < 3; ++c) r1[static_cast<size_t>(r) * 3 + c] = (r + 1.0) * (c + 2.0);
    }
    CHECK(effective_rank(5, 3, r1) == doctest::Approx(1.0).epsilon(1e-9));

    Rng rng(9);
    std::vector<double> rnd(20 * 8);
    for (auto& v : rnd) v = rng.normal();
    const double base = effective_rank(20, 8, rnd);
    CHECK(base >= 1.0);
    CHECK(base <= 8.0 + 1e-12);
    std::vector<double> scaled = rnd;
    for (auto& v : scaled) v *= 3.7;
    CHECK(effective_rank(20, 8, scaled) == doctest::Approx(base).epsilon(1e-9));

    std::vector<double> zeros(4 * 4, 0.0);
    CHECK_THROWS_AS(effective_rank(4, 4, zeros), NumericError);
    std::vector<double> nan(4, std::nan(""));
    CHECK_THROWS_AS(effective_rank(2, 2, nan), NumericError);
}

TEST_CASE("effective rank agrees with the Jacobi eigensolver route") {
    Rng rng(15);
    for (int trial = 0; trial < 20; ++trial) {
        const int rows = rng.uniform_int(5, 24);
        const int cols = rng.uniform_int(2, 8);
        std::vector<double> m(static_cast<size_t>(rows) * cols);
        for (auto& v : m) v = rng.normal();
        const double a = effective_rank(rows, cols, m);
        const double b = oracle::brute_effective_rank(rows, cols, m);
        CHECK(std::abs(a - b) < 1e-9);
    }
}

TEST_CASE("delta eRank: identical policies give zero everywhere") {
    const Vocab vocab = Vocab::text_ascii();
    FamilyMix mix;
    mix.weights[TaskFamily::chart_read] = 1.0;
    mix.weights[TaskFamily::geometry_count] = 1.0;
    const TaskSet probe = generate_taskset(mix, 6, 51, 1, 1, "eval");
    PolicyConfig pc;
    pc.vocab_size = vocab.size();
    pc.context_len = 64;
    pc.width = 16;
    pc.layers = 2;
    pc.heads = 2;
    pc.seed = 33;
    const Policy p = Policy::init(pc);
    const auto rows = delta_erank(p, p, probe, vocab, 2, 8);
    REQUIRE(!rows.empty());
    bool saw_all = false;
    for (const auto& r : rows) {
        CHECK(r.delta == 0.0);
        CHECK(r.erank_after == r.erank_before);
        saw_all = saw_all || r.dataset == "all";
    }
    CHECK(saw_all);

    PolicyConfig other = pc;
    other.width = 8;
    other.heads = 2;
    const Policy q = Policy::init(other);
    CHECK_THROWS_AS(delta_erank(p, q, probe, vocab, 1, 8), ConfigError);
}
