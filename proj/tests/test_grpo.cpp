// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "oracles.hpp"

#include <cmath>
#include <numeric>

#include "grpolab/datasynth.hpp"
#include "grpolab/errors.hpp"
#include "grpolab/grpo.hpp"
#include "grpolab/sft.hpp"
#include "grpolab/vocab.hpp"

using namespace grpolab;

namespace {

PolicyConfig toy_cfg(int vocab, uint64_t seed, int context = 16) {
    PolicyConfig c;
    c.vocab_size = vocab;
    c.context_len = context;
    c.width = 8;
    c.layers = 1;
    c.heads = 2;
    c.seed = seed;
    return c;
}

GrpoConfig toy_grpo() {
    GrpoConfig cfg;
    cfg.group_size = 2;
    cfg.clip_eps = 0.2;
    cfg.kl_beta = 0.05;
    cfg.lr = 1e-3;
    cfg.max_response_len = 3;
    cfg.batch_tasks = 2;
    return cfg;
}

// Builds a rollout group by sampling from `old_policy` against a synthetic
// context, with injectable advantages.
RolloutGroup make_group(const Policy& old_policy, const std::vector<int>& ctx, int G,
                        int max_len, uint64_t seed) {
    RolloutGroup g;
    g.task_id = "toy";
    g.context = ctx;
    for (int i = 0; i < G; ++i) {
        SampleOptions opt;
        opt.temperature = 0.8;
        opt.max_len = max_len;
        Rng rng(derive_seed(seed, static_cast<uint64_t>(i)));
        SampleResult sr = old_policy.sample(ctx, opt, rng);
        g.responses.push_back(std::move(sr.tokens));
        g.logp_old.push_back(std::move(sr.logprobs));
        g.rewards.push_back(static_cast<double>(i % 2));
    }
    g.advantages = normalize_advantages(g.rewards, 1e-8);
    return g;
}

} // namespace

TEST_CASE("advantage normalization: worked examples and formula oracle") {
    const std::vector<double> r1 = {1, 0, 0, 1};
    const auto a1 = normalize_advantages(r1, 1e-8);
    const std::vector<double> want = {1, -1, -1, 1};
    for (size_t i = 0; i < 4; ++i) CHECK(a1[i] == doctest::Approx(want[i]).epsilon(1e-12));

    const std::vector<double> r2 = {1, 1, 1, 1};
    for (double v : normalize_advantages(r2, 1e-8)) CHECK(v == 0.0);

    Rng rng(10);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = rng.uniform_int(2, 12);
        std::vector<double> r(static_cast<size_t>(n));
        for (auto& v : r) v = rng.uniform01() < 0.3 ? rng.normal() : static_cast<double>(rng.uniform_int(0, 1));
        const auto adv = normalize_advantages(r, 1e-8);
        // direct recomputation of (r - mean)/std, population convention
        double mean = std::accumulate(r.begin(), r.end(), 0.0) / n;
        double var = 0.0;
        for (double v : r) var += (v - mean) * (v - mean);
        var /= n;
        const double sd = std::sqrt(var);
        if (sd > 1e-8) {
            double amean = 0.0, avar = 0.0;
            for (size_t i = 0; i < r.size(); ++i) {
                CHECK(std::abs(adv[i] - (r[i] - mean) / sd) <= 1e-12);
                amean += adv[i];
            }
            amean /= n;
            for (double v : adv) avar += (v - amean) * (v - amean);
            CHECK(std::abs(amean) <= 1e-12);
            CHECK(std::abs(std::sqrt(avar / n) - 1.0) <= 1e-12);
        } else {
            for (double v : adv) CHECK(v == 0.0);
        }
    }
    CHECK_THROWS_AS(normalize_advantages(std::vector<double>{1.0}, 1e-8), ConfigError);
}

TEST_CASE("token KL estimator: analytic points and nonnegativity") {
    const std::vector<double> same = {-1.0, -2.5, -0.3};
    for (double v : token_kl(same, same)) CHECK(v == 0.0);

    // ratio pi_ref/pi_theta = e  =>  kl = e - 2
    const std::vector<double> lt = {-2.0};
    const std::vector<double> lr = {-1.0};
    CHECK(token_kl(lt, lr)[0] == doctest::Approx(std::exp(1.0) - 2.0).epsilon(1e-12));

    Rng rng(11);
    for (int i = 0; i < 100000; ++i) {
        const double a = -5.0 * rng.uniform01();
        const double b = -5.0 * rng.uniform01();
        const double kl = token_kl(std::vector<double>{a}, std::vector<double>{b})[0];
        CHECK(kl >= 0.0);
        if (a == b) CHECK(kl == 0.0);
    }
    CHECK_THROWS_AS(token_kl(std::vector<double>{1.0}, std::vector<double>{}), ConfigError);
}

TEST_CASE("clip surrogate: value and derivative branches") {
    const double eps = 0.2;
    // positive advantage, ratio above band: clipped branch active and binding
    auto s = clip_surrogate(1.5, 2.0, eps);
    CHECK(s.value == doctest::Approx(1.2 * 2.0));
    CHECK(s.dgamma == 0.0);
    // negative advantage, ratio below the band: the clipped branch is the
    // smaller value, so clipping binds and the gradient dies
    s = clip_surrogate(0.5, -1.0, eps);
    CHECK(s.value == doctest::Approx(-0.8));
    CHECK(s.dgamma == 0.0);
    // negative advantage, ratio above the band: unclipped branch is the min
    s = clip_surrogate(1.5, -1.0, eps);
    CHECK(s.value == doctest::Approx(-1.5));
    CHECK(s.dgamma == -1.0);
    // inside the band both branches agree
    s = clip_surrogate(1.1, 0.7, eps);
    CHECK(s.value == doctest::Approx(1.1 * 0.7));
    CHECK(s.dgamma == doctest::Approx(0.7));
    // clip bound property: surrogate <= gamma*A for A >= 0, <= clip*A for A <= 0
    Rng rng(12);
    for (int i = 0; i < 20000; ++i) {
        const double gamma = 0.1 + 2.0 * rng.uniform01();
        const double adv = rng.normal();
        const auto cs = clip_surrogate(gamma, adv, eps);
        const double clipped = std::clamp(gamma, 1.0 - eps, 1.0 + eps);
        if (adv >= 0) CHECK(cs.value <= gamma * adv + 1e-15);
        if (adv <= 0) CHECK(cs.value <= clipped * adv + 1e-15);
        if ((gamma < 1.0 - eps || gamma > 1.0 + eps) && cs.value == clipped * adv &&
            gamma * adv > clipped * adv) {
            CHECK(cs.dgamma == 0.0);
        }
    }
}

TEST_CASE("rollout rewards are binary and log-probs recompute exactly") {
    const Vocab vocab = Vocab::text_ascii();
    FamilyMix mix;
    mix.weights[TaskFamily::chart_read] = 1.0;
    const TaskSet ts = generate_taskset(mix, 3, 5, 1, 1, "train");
    PolicyConfig pc;
    pc.vocab_size = vocab.size();
    pc.context_len = 64;
    pc.width = 16;
    pc.layers = 1;
    pc.heads = 2;
    pc.seed = 2;
    const Policy p = Policy::init(pc);
    GrpoConfig cfg;
    cfg.group_size = 4;
    cfg.max_response_len = 8;
    cfg.temperature = 0.9;
    for (const auto& task : ts.tasks) {
        const RolloutGroup g = rollout(p, task, vocab, cfg, 77);
        REQUIRE(g.responses.size() == 4);
        for (int i = 0; i < 4; ++i) {
            CHECK((g.rewards[static_cast<size_t>(i)] == 0.0 || g.rewards[static_cast<size_t>(i)] == 1.0));
            const auto lp = p.log_probs(g.context, g.responses[static_cast<size_t>(i)]);
            CHECK(lp == g.logp_old[static_cast<size_t>(i)]);
        }
    }
}

TEST_CASE("rollout at tiny temperature matches greedy on a memorized task") {
    const Vocab vocab = Vocab::text_ascii();
    FamilyMix mix;
    mix.weights[TaskFamily::chart_read] = 1.0;
    const TaskSet ts = generate_taskset(mix, 1, 6, 1, 1, "train");
    ScriptedTeacher teacher(0.0, 0.0);
    SynthOptions sopts;
    const auto records =
        synthesize_dataset(teacher, ts, CotPattern::distilled, Correctness::correct, sopts, 1)
            .records;
    PolicyConfig pc;
    pc.vocab_size = vocab.size();
    pc.context_len = 96;
    pc.width = 16;
    pc.layers = 1;
    pc.heads = 2;
    pc.seed = 3;
    pc.vocab_hash = vocab.hash();
    SftConfig scfg;
    scfg.epochs = 300;
    scfg.lr = 3e-3;
    scfg.batch_size = 1;
    const auto sft_out = run_sft(Policy::init(pc), records, ts, nullptr, vocab, scfg);
    REQUIRE(sft_out.metrics.back().mean_loss < 0.05);

    GrpoConfig cfg;
    cfg.group_size = 4;
    cfg.max_response_len = 48;
    cfg.temperature = 0.01; // temperature -> 0 limit
    const RolloutGroup g = rollout(sft_out.policy, ts.tasks[0], vocab, cfg, 9);
    for (double r : g.rewards) CHECK(r == 1.0);
    for (double a : g.advantages) CHECK(a == 0.0); // zero-variance group
}

TEST_CASE("objective at theta = old = ref reduces to minus the mean advantage") {
    const Policy p = Policy::init(toy_cfg(5, 4));
    const std::vector<int> ctx = {0, 1};
    RolloutGroup g = make_group(p, ctx, 3, 3, 21);
    g.advantages = {0.7, -0.2, 1.1}; // arbitrary injected values
    GrpoConfig cfg = toy_grpo();
    cfg.group_size = 3;
    const auto res = grpo_objective(g, p, p, cfg);
    const double want = -(0.7 - 0.2 + 1.1) / 3.0;
    CHECK(res.loss == doctest::Approx(want).epsilon(1e-12));
    CHECK(res.diag.mean_ratio == 1.0); // gamma exactly 1 at theta = old
    CHECK(res.diag.mean_kl == 0.0);
    CHECK(res.diag.clip_fraction == 0.0);

    g.advantages = {0.0, 0.0, 0.0};
    const auto zero = grpo_objective(g, p, p, cfg);
    CHECK(zero.loss == 0.0);
}

TEST_CASE("objective matches the brute-force dual implementation to 1e-10") {
    // |V|=5, G=2, |o|<=3, distinct theta / old / ref
    const Policy theta = Policy::init(toy_cfg(5, 100));
    const Policy old_p = Policy::init(toy_cfg(5, 200));
    const Policy ref_p = Policy::init(toy_cfg(5, 300));
    const std::vector<int> ctx = {0, 2};
    GrpoConfig cfg = toy_grpo();
    for (uint64_t trial = 0; trial < 25; ++trial) {
        RolloutGroup g = make_group(old_p, ctx, 2, 3, 1000 + trial);
        const auto res = grpo_objective(g, theta, ref_p, cfg);
        const double brute = oracle::brute_grpo_loss(g, theta, ref_p, cfg);
        CHECK(std::abs(res.loss - brute) < 1e-10);
    }
}

TEST_CASE("objective gradient matches finite differences") {
    const Policy theta0 = Policy::init(toy_cfg(5, 101));
    const Policy old_p = Policy::init(toy_cfg(5, 202));
    const Policy ref_p = Policy::init(toy_cfg(5, 303));
    REQUIRE(theta0.cfg.param_count() <= 5000);
    const std::vector<int> ctx = {0, 3};
    GrpoConfig cfg = toy_grpo();
    RolloutGroup g = make_group(old_p, ctx, 2, 3, 555);

    // gradient via one train_step-style pass, but without the update: reuse
    // the engine through a fixed-size batch of one group
    Policy theta = theta0;
    OptimState optim;
    // replicate the internal gradient by differencing a tiny sgd step
    GrpoConfig cfg_sgd = cfg;
    cfg_sgd.rule = UpdateRule::sgd;
    cfg_sgd.lr = 1.0;
    // train_step needs Task objects; instead check the objective value path
    // against finite differences directly.
    const auto fd = oracle::finite_diff_grad(theta0, [&](const Policy& q) {
        return grpo_objective(g, q, ref_p, cfg).loss;
    });
    // analytic gradient from the engine
    std::vector<double> grad(theta0.params.size(), 0.0);
    {
        const int G = static_cast<int>(g.responses.size());
        for (int i = 0; i < G; ++i) {
            const auto& resp = g.responses[static_cast<size_t>(i)];
            std::vector<int> seq = g.context;
            seq.insert(seq.end(), resp.begin(), resp.end());
            std::vector<LogpQuery> queries;
            const int c0 = static_cast<int>(g.context.size());
            for (size_t t = 0; t < resp.size(); ++t) {
                queries.push_back({c0 - 1 + static_cast<int>(t), resp[t]});
            }
            const auto lp_ref = ref_p.log_probs(g.context, resp);
            const auto& lp_old = g.logp_old[static_cast<size_t>(i)];
            const double adv = g.advantages[static_cast<size_t>(i)];
            const auto er = theta0.weighted_logprob_grad(
                seq, queries, [&](std::span<const double> lp, std::span<double> w) {
                    for (size_t t = 0; t < lp.size(); ++t) {
                        const double gamma = std::exp(lp[t] - lp_old[t]);
                        const double delta = lp_ref[t] - lp[t];
                        const auto surr = clip_surrogate(gamma, adv, cfg.clip_eps);
                        const double dj = surr.dgamma * gamma -
                                          cfg.kl_beta * (1.0 - std::exp(delta));
                        w[t] = -dj / (static_cast<double>(G) * resp.size());
                    }
                });
            for (size_t k = 0; k < grad.size(); ++k) grad[k] += er.grad[k];
        }
    }
    CHECK(oracle::max_rel_error(grad, fd) <= 1e-4);
}

TEST_CASE("strong KL anchoring shrinks the parameter movement") {
    const Vocab vocab = Vocab::text_ascii();
    FamilyMix mix;
    mix.weights[TaskFamily::chart_read] = 1.0;
    const TaskSet ts = generate_taskset(mix, 4, 7, 1, 1, "train");
    PolicyConfig pc;
    pc.vocab_size = vocab.size();
    pc.context_len = 64;
    pc.width = 16;
    pc.layers = 1;
    pc.heads = 2;
    pc.seed = 5;
    const Policy init = Policy::init(pc);

    auto movement = [&](double beta) {
        Policy theta = init; // theta starts at ref
        GrpoConfig cfg;
        cfg.group_size = 6;
        cfg.max_response_len = 6;
        cfg.kl_beta = beta;
        cfg.lr = 1e-4;
        cfg.rule = UpdateRule::sgd;
        OptimState optim;
        // several steps with a shaped reward so gradients are nonzero
        const RewardFn reward = [](const Task&, const std::string& text) {
            return text.find('1') != std::string::npos ? 1.0 : 0.0;
        };
        for (int step = 0; step < 6; ++step) {
            const Policy old_p = theta;
            train_step(theta, old_p, init, ts.tasks, vocab, cfg, optim,
                       derive_seed(40, static_cast<uint64_t>(step)), reward);
        }
        double norm = 0.0;
        for (size_t i = 0; i < theta.params.size(); ++i) {
            const double d = theta.params[i] - init.params[i];
            norm += d * d;
        }
        return std::sqrt(norm);
    };
    const double free_move = movement(0.0);
    const double anchored = movement(1000.0);
    CHECK(anchored < free_move);
}

TEST_CASE("zero-variance groups with theta at ref leave parameters unchanged") {
    const Vocab vocab = Vocab::text_ascii();
    FamilyMix mix;
    mix.weights[TaskFamily::geometry_count] = 1.0;
    const TaskSet ts = generate_taskset(mix, 3, 9, 1, 1, "train");
    PolicyConfig pc;
    pc.vocab_size = vocab.size();
    pc.context_len = 64;
    pc.width = 16;
    pc.layers = 1;
    pc.heads = 2;
    pc.seed = 6;
    Policy theta = Policy::init(pc);
    const Policy before = theta;
    GrpoConfig cfg;
    cfg.group_size = 4;
    cfg.max_response_len = 5;
    cfg.kl_beta = 0.05;
    OptimState optim;
    const RewardFn constant = [](const Task&, const std::string&) { return 1.0; };
    const auto sm = train_step(theta, before, before, ts.tasks, vocab, cfg, optim, 3, constant);
    CHECK(theta.params == before.params);
    CHECK(sm.mean_reward == 1.0);
}

TEST_CASE("run_rl with zero episodes returns the input unchanged") {
    const Vocab vocab = Vocab::text_ascii();
    FamilyMix mix;
    mix.weights[TaskFamily::chart_read] = 1.0;
    const TaskSet ts = generate_taskset(mix, 4, 11, 1, 1, "train");
    PolicyConfig pc;
    pc.vocab_size = vocab.size();
    pc.context_len = 64;
    pc.width = 16;
    pc.layers = 1;
    pc.heads = 2;
    pc.seed = 7;
    Policy p = Policy::init(pc);
    const Policy before = p;
    GrpoConfig cfg;
    cfg.episodes = 0;
    const auto out = run_rl(std::move(p), ts, nullptr, vocab, cfg, 1);
    CHECK(out.policy.params == before.params);
    CHECK(out.metrics.empty());
}

TEST_CASE("run_rl is deterministic in the seed") {
    const Vocab vocab = Vocab::text_ascii();
    FamilyMix mix;
    mix.weights[TaskFamily::chart_read] = 1.0;
    const TaskSet ts = generate_taskset(mix, 6, 13, 1, 1, "train");
    PolicyConfig pc;
    pc.vocab_size = vocab.size();
    pc.context_len = 64;
    pc.width = 16;
    pc.layers = 1;
    pc.heads = 2;
    pc.seed = 8;
    GrpoConfig cfg;
    cfg.episodes = 1;
    cfg.group_size = 4;
    cfg.batch_tasks = 3;
    cfg.max_response_len = 6;
    cfg.lr = 1e-3;
    cfg.eval_every = 0;
    const auto a = run_rl(Policy::init(pc), ts, nullptr, vocab, cfg, 99);
    const auto b = run_rl(Policy::init(pc), ts, nullptr, vocab, cfg, 99);
    CHECK(a.policy.params == b.policy.params);
    REQUIRE(a.metrics.size() == b.metrics.size());
    for (size_t i = 0; i < a.metrics.size(); ++i) {
        CHECK(a.metrics[i].mean_reward == b.metrics[i].mean_reward);
        CHECK(a.metrics[i].mean_kl == b.metrics[i].mean_kl);
    }
}

TEST_CASE("aborting runs still hand a checkpoint to the sink") {
    const Vocab vocab = Vocab::text_ascii();
    FamilyMix mix;
    mix.weights[TaskFamily::chart_read] = 1.0;
    const TaskSet ts = generate_taskset(mix, 4, 15, 1, 1, "train");
    PolicyConfig pc;
    pc.vocab_size = vocab.size();
    pc.context_len = 64;
    pc.width = 16;
    pc.layers = 1;
    pc.heads = 2;
    pc.seed = 9;
    GrpoConfig cfg;
    cfg.episodes = 1;
    cfg.group_size = 2;
    cfg.batch_tasks = 2;
    cfg.max_response_len = 4;
    int abort_checkpoints = 0;
    int calls = 0;
    const RewardFn exploding = [&calls](const Task&, const std::string&) -> double {
        if (++calls > 5) throw NumericError("synthetic reward failure");
        return 0.0;
    };
    const CheckpointSink sink = [&](const Policy&, int, bool aborting) {
        if (aborting) ++abort_checkpoints;
    };
    CHECK_THROWS_AS(
        run_rl(Policy::init(pc), ts, nullptr, vocab, cfg, 5, sink, exploding),
        NumericError);
    CHECK(abort_checkpoints == 1);
}
