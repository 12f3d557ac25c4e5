// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "grpolab/errors.hpp"
#include "grpolab/tasks.hpp"
#include "oracles.hpp"

using namespace grpolab;

namespace {

FamilyMix all_families() {
    FamilyMix mix;
    mix.weights[TaskFamily::grid_arithmetic] = 1.0;
    mix.weights[TaskFamily::chart_read] = 1.0;
    mix.weights[TaskFamily::geometry_count] = 1.0;
    return mix;
}

} // namespace

TEST_CASE("generation is deterministic in the seed") {
    const TaskSet a = generate_taskset(all_families(), 50, 7, 1, 2, "train");
    const TaskSet b = generate_taskset(all_families(), 50, 7, 1, 2, "train");
    REQUIRE(a.tasks.size() == b.tasks.size());
    for (size_t i = 0; i < a.tasks.size(); ++i) {
        CHECK(a.tasks[i].id == b.tasks[i].id);
        CHECK(render_text(a.tasks[i]) == render_text(b.tasks[i]));
        CHECK(a.tasks[i].ground_truth == b.tasks[i].ground_truth);
    }
}

TEST_CASE("family proportions stay within 3 sigma of the mix") {
    const int n = 1000;
    const TaskSet ts = generate_taskset(all_families(), n, 99, 1, 1, "train");
    std::map<TaskFamily, int> counts;
    for (const auto& t : ts.tasks) counts[t.family] += 1;
    const double p = 1.0 / 3.0;
    const double sigma = std::sqrt(n * p * (1.0 - p));
    for (const auto& [fam, c] : counts) {
        CHECK(std::abs(c - n * p) < 3.0 * sigma);
    }
}

TEST_CASE("difficulty-1 grid arithmetic sums at most 4 cells") {
    FamilyMix mix;
    mix.weights[TaskFamily::grid_arithmetic] = 1.0;
    const TaskSet ts = generate_taskset(mix, 200, 3, 1, 1, "train");
    for (const auto& t : ts.tasks) {
        REQUIRE(t.family == TaskFamily::grid_arithmetic);
        CHECK(t.image.cells.size() <= 4);
        int sum = 0;
        for (const auto& c : t.image.cells) sum += c[0] - '0';
        CHECK(std::to_string(sum) == t.ground_truth);
    }
}

TEST_CASE("oracle soundness: every task accepts its own ground truth") {
    const TaskSet ts = generate_taskset(all_families(), 500, 11, 1, 2, "train");
    for (const auto& t : ts.tasks) {
        CHECK(verify_answer(t, t.ground_truth) == 1);
    }
}

TEST_CASE("rendering is injective over grid cells and repeatable") {
    const TaskSet ts = generate_taskset(all_families(), 20, 5, 1, 1, "train");
    Task a = ts.tasks[0];
    Task b = a;
    // flip one grid cell to a different digit/shape
    b.image.cells[0] = (b.image.cells[0] == "3") ? "4" : "3";
    CHECK(render_text(a) != render_text(b));
    CHECK(render_text(a) == render_text(a));
}

TEST_CASE("render matches the frozen golden fixture") {
    FamilyMix mix;
    mix.weights[TaskFamily::chart_read] = 1.0;
    const TaskSet ts = generate_taskset(mix, 1, 12345, 1, 1, "eval");
    std::ifstream is(std::string(GRPOLAB_FIXTURE_DIR) + "/render_golden.txt", std::ios::binary);
    REQUIRE(is.good());
    std::stringstream ss;
    ss << is.rdbuf();
    CHECK(render_text(ts.tasks[0]) == ss.str());
}

TEST_CASE("boxed extraction: basic forms") {
    CHECK(extract_boxed("the answer is \\boxed{5\xe2\x88\x9a""3}") == "5\xe2\x88\x9a""3");
    CHECK(!extract_boxed("no box here"));
    CHECK(extract_boxed("\\boxed{1} then \\boxed{2}") == "2");
    CHECK(!extract_boxed("\\boxed{unclosed"));
    CHECK(extract_boxed("\\boxed{5\\sqrt{3}}") == "5\\sqrt{3}");
    CHECK(extract_boxed("x \\boxed{}") == "");
}

TEST_CASE("boxed extraction agrees with the brute-force scanner") {
    Rng rng(77);
    const std::string alphabet = "ab{}\\ \\boxed{x}";
    for (int trial = 0; trial < 2000; ++trial) {
        std::string text;
        const int len = rng.uniform_int(0, 30);
        for (int i = 0; i < len; ++i) {
            switch (rng.uniform_int(0, 5)) {
                case 0: text += "\\boxed{"; break;
                case 1: text += '{'; break;
                case 2: text += '}'; break;
                case 3: text += 'a'; break;
                case 4: text += ' '; break;
                default: text += "9"; break;
            }
        }
        CHECK(extract_boxed(text) == oracle::brute_extract_boxed(text));
    }
}

TEST_CASE("extraction idempotence on generated content") {
    // extracted content never contains another box marker
    const auto inner = extract_boxed("steps... \\boxed{42}.");
    REQUIRE(inner.has_value());
    CHECK(!extract_boxed(*inner).has_value());
}

TEST_CASE("answer verification and normalization") {
    Task t;
    t.ground_truth = "12";
    CHECK(verify_answer(t, std::string("12")) == 1);
    CHECK(verify_answer(t, std::nullopt) == 0);
    CHECK(verify_answer(t, std::string(" 12 ")) == 1);
    CHECK(verify_answer(t, std::string("12.0")) == 1);
    CHECK(verify_answer(t, std::string("13")) == 0);
    CHECK(verify_answer(t, std::string("")) == 0);

    Task s;
    s.ground_truth = "Triangle";
    CHECK(verify_answer(s, std::string("triangle")) == 1);
    CHECK(verify_answer(s, std::string("  tri  angle")) == 0);

    CHECK(answers_equal("0.5", ".5"));
    CHECK(answers_equal("-3", "-3.000"));
    CHECK(!answers_equal("-3", "3"));
    CHECK(answers_equal("a  b", "A B"));
}

TEST_CASE("reward is total: arbitrary strings score 0 or 1") {
    const TaskSet ts = generate_taskset(all_families(), 10, 2, 1, 1, "train");
    Rng rng(3);
    for (const auto& t : ts.tasks) {
        for (int trial = 0; trial < 20; ++trial) {
            std::string junk;
            for (int i = 0; i < rng.uniform_int(0, 12); ++i) {
                junk += static_cast<char>(rng.uniform_int(32, 126));
            }
            const int r = verify_answer(t, junk);
            CHECK((r == 0 || r == 1));
        }
    }
}

TEST_CASE("taskset save/load round-trip and hashing") {
    const TaskSet ts = generate_taskset(all_families(), 25, 13, 1, 2, "eval");
    const std::string path = "test_taskset_roundtrip.jsonl";
    save_taskset(ts, path);
    const TaskSet back = load_taskset(path);
    REQUIRE(back.tasks.size() == ts.tasks.size());
    CHECK(back.split == ts.split);
    CHECK(back.seed == ts.seed);
    CHECK(taskset_hash(back) == taskset_hash(ts));
    for (size_t i = 0; i < ts.tasks.size(); ++i) {
        CHECK(render_text(back.tasks[i]) == render_text(ts.tasks[i]));
        CHECK(back.tasks[i].ground_truth == ts.tasks[i].ground_truth);
    }
    // train/eval ids disjoint by construction
    const TaskSet train = generate_taskset(all_families(), 25, 13, 1, 2, "train");
    std::set<std::string> ids;
    for (const auto& t : train.tasks) ids.insert(t.id);
    for (const auto& t : ts.tasks) CHECK(!ids.count(t.id));
    std::remove(path.c_str());
}

TEST_CASE("render_context enforces the length budget") {
    const TaskSet ts = generate_taskset(all_families(), 5, 21, 1, 1, "train");
    const Vocab vocab = Vocab::text_ascii();
    const auto ctx = render_context(ts.tasks[0], vocab, 128);
    CHECK(ctx.front() == vocab.bos());
    CHECK(static_cast<int>(ctx.size()) <= 128);
    CHECK_THROWS_AS(render_context(ts.tasks[0], vocab, 4), ConfigError);
}

TEST_CASE("generation rejects bad arguments") {
    CHECK_THROWS_AS(generate_taskset(FamilyMix{}, 5, 1, 1, 1, "train"), ConfigError);
    CHECK_THROWS_AS(generate_taskset(all_families(), 0, 1, 1, 1, "train"), ConfigError);
    CHECK_THROWS_AS(generate_taskset(all_families(), 5, 1, 2, 1, "train"), ConfigError);
}
