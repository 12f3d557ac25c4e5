// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#include "grpolab/grpo.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "grpolab/errors.hpp"
#include "grpolab/evalrun.hpp"
#include "grpolab/parallel.hpp"

namespace grpolab {

void GrpoConfig::validate() const {
    if (group_size < 2) throw ConfigError("grpo: group_size must be >= 2");
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("grpo: clip_eps must be in (0,1)");
    if (kl_beta < 0.0) throw ConfigError("grpo: kl_beta must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("grpo: lr must be > 0");
    if (episodes < 0) throw ConfigError("grpo: episodes must be >= 0");
    if (!(temperature > 0.0)) throw ConfigError("grpo: temperature must be > 0");
    if (std_floor < 0.0) throw ConfigError("grpo: std_floor must be >= 0");
    if (max_response_len < 1) throw ConfigError("grpo: max_response_len must be >= 1");
    if (batch_tasks < 1) throw ConfigError("grpo: batch_tasks must be >= 1");
}

double boxed_accuracy_reward(const Task& task, const std::string& response_text) {
    return static_cast<double>(verify_answer(task, extract_boxed(response_text)));
}

RolloutGroup rollout(const Policy& policy_old, const Task& task, const Vocab& vocab,
                     const GrpoConfig& cfg, uint64_t seed, const RewardFn& reward) {
    RolloutGroup group;
    group.task_id = task.id;
    group.context = render_context(task, vocab, policy_old.cfg.context_len - 1);
    group.responses.resize(static_cast<size_t>(cfg.group_size));
    group.logp_old.resize(static_cast<size_t>(cfg.group_size));
    group.rewards.resize(static_cast<size_t>(cfg.group_size));

    for (int i = 0; i < cfg.group_size; ++i) {
        SampleOptions opt;
        opt.temperature = cfg.temperature;
        opt.max_len = cfg.max_response_len;
        opt.eos_id = vocab.eos();
        Rng rng(derive_seed(seed, static_cast<uint64_t>(i)));
        SampleResult sr = policy_old.sample(group.context, opt, rng);
        const std::string text = vocab.decode(sr.tokens);
        group.rewards[static_cast<size_t>(i)] = reward(task, text);
        group.responses[static_cast<size_t>(i)] = std::move(sr.tokens);
        group.logp_old[static_cast<size_t>(i)] = std::move(sr.logprobs);
    }
    group.advantages = normalize_advantages(group.rewards, cfg.std_floor);
    return group;
}

std::vector<double> normalize_advantages(std::span<const double> rewards, double std_floor) {
    if (rewards.size() < 2) throw ConfigError("normalize_advantages: need at least 2 rewards");
    const double n = static_cast<double>(rewards.size());
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= n;
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    var /= n; // population convention
    const double sd = std::sqrt(var);
    std::vector<double> adv(rewards.size(), 0.0);
    if (sd > std_floor) {
        for (size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / sd;
    }
    return adv;
}

std::vector<double> token_kl(std::span<const double> logp_theta,
                             std::span<const double> logp_ref) {
    if (logp_theta.size() != logp_ref.size()) {
        throw ConfigError("token_kl: length mismatch");
    }
    std::vector<double> out(logp_theta.size());
    for (size_t t = 0; t < out.size(); ++t) {
        const double d = logp_ref[t] - logp_theta[t];
        out[t] = std::exp(d) - d - 1.0;
    }
    return out;
}

ClipSurrogate clip_surrogate(double gamma, double advantage, double eps) {
    const double lo = 1.0 - eps, hi = 1.0 + eps;
    const double clipped = std::clamp(gamma, lo, hi);
    const double a = gamma * advantage;
    const double b = clipped * advantage;
    ClipSurrogate s;
    if (a <= b) {
        s.value = a;
        s.dgamma = advantage;
    } else {
        s.value = b;
        // the clipped branch is active; its derivative in gamma is zero
        // exactly when clipping binds
        s.dgamma = (gamma > lo && gamma < hi) ? advantage : 0.0;
    }
    return s;
}

namespace {

// Shared per-response token math. dloss_dlogp is filled only when requested
// (gradient path); the per-token coefficient 1/(B*G*|o_i|) is applied by the
// caller through `scale`.
struct TokenAccum {
    double sum_token_terms = 0.0; // sum over tokens of surr - beta*kl
    double sum_ratio = 0.0;
    int clipped = 0;
    double sum_kl = 0.0;
    int tokens = 0;
};

TokenAccum response_terms(std::span<const double> lp_theta, std::span<const double> lp_old,
                          std::span<const double> lp_ref, double advantage,
                          const GrpoConfig& cfg, int resp_index,
                          std::vector<double>* dloss_dlogp, double scale) {
    if (lp_theta.size() != lp_old.size() || lp_theta.size() != lp_ref.size()) {
        throw ConfigError("grpo: log-prob length mismatch");
    }
    TokenAccum acc;
    acc.tokens = static_cast<int>(lp_theta.size());
    for (size_t t = 0; t < lp_theta.size(); ++t) {
        const double gamma = std::exp(lp_theta[t] - lp_old[t]);
        const double delta = lp_ref[t] - lp_theta[t];
        const double kl = std::exp(delta) - delta - 1.0;
        const ClipSurrogate surr = clip_surrogate(gamma, advantage, cfg.clip_eps);
        const double term = surr.value - cfg.kl_beta * kl;
        if (!std::isfinite(term)) {
            throw NumericError("grpo: non-finite token term at response " +
                               std::to_string(resp_index) + " token " + std::to_string(t));
        }
        acc.sum_token_terms += term;
        acc.sum_ratio += gamma;
        acc.sum_kl += kl;
        if (gamma < 1.0 - cfg.clip_eps || gamma > 1.0 + cfg.clip_eps) acc.clipped += 1;
        if (dloss_dlogp != nullptr) {
            // dJ/dlogp = surr'(gamma)*gamma - beta*(1 - exp(delta));
            // loss = -J, so negate, then apply the averaging coefficient.
            const double dj = surr.dgamma * gamma - cfg.kl_beta * (1.0 - std::exp(delta));
            (*dloss_dlogp)[t] = -dj * scale;
        }
    }
    return acc;
}

} // namespace

GrpoObjectiveResult grpo_objective(const RolloutGroup& group, const Policy& theta,
                                   const Policy& ref, const GrpoConfig& cfg) {
    cfg.validate();
    const int G = static_cast<int>(group.responses.size());
    if (G < 2) throw ConfigError("grpo_objective: group too small");
    if (group.advantages.size() != group.responses.size()) {
        throw ConfigError("grpo_objective: advantages not computed");
    }

    GrpoObjectiveResult res;
    double j_sum = 0.0;
    double ratio_sum = 0.0, kl_sum = 0.0;
    int clipped = 0, tokens = 0;
    for (int i = 0; i < G; ++i) {
        const auto& resp = group.responses[static_cast<size_t>(i)];
        if (resp.empty()) continue;
        const auto lp_theta = theta.log_probs(group.context, resp);
        const auto lp_ref = ref.log_probs(group.context, resp);
        const TokenAccum acc =
            response_terms(lp_theta, group.logp_old[static_cast<size_t>(i)], lp_ref,
                           group.advantages[static_cast<size_t>(i)], cfg, i, nullptr, 0.0);
        j_sum += acc.sum_token_terms / acc.tokens;
        ratio_sum += acc.sum_ratio;
        kl_sum += acc.sum_kl;
        clipped += acc.clipped;
        tokens += acc.tokens;
    }
    res.loss = -j_sum / G;
    if (tokens > 0) {
        res.diag.mean_ratio = ratio_sum / tokens;
        res.diag.clip_fraction = static_cast<double>(clipped) / tokens;
        res.diag.mean_kl = kl_sum / tokens;
    }
    return res;
}

StepMetrics train_step(Policy& theta, const Policy& policy_old, const Policy& policy_ref,
                       std::span<const Task> tasks, const Vocab& vocab, const GrpoConfig& cfg,
                       OptimState& optim, uint64_t seed, const RewardFn& reward) {
    cfg.validate();
    if (!theta.cfg.same_shape(policy_old.cfg) || !theta.cfg.same_shape(policy_ref.cfg)) {
        throw ConfigError("train_step: policy architecture mismatch");
    }
    if (tasks.empty()) throw ConfigError("train_step: empty task batch");

    const int B = static_cast<int>(tasks.size());
    std::vector<RolloutGroup> groups(static_cast<size_t>(B));
    parallel_for(B, cfg.threads, [&](int bi) {
        groups[static_cast<size_t>(bi)] =
            rollout(policy_old, tasks[static_cast<size_t>(bi)], vocab, cfg,
                    derive_seed(seed, static_cast<uint64_t>(bi)), reward);
    });

    StepMetrics metrics;
    std::vector<double> grad(theta.params.size(), 0.0);
    double loss_sum = 0.0;
    double ratio_sum = 0.0, kl_sum = 0.0, abs_adv_sum = 0.0, reward_sum = 0.0;
    int clipped = 0, tokens = 0, responses = 0;

    struct RespJob {
        const RolloutGroup* group;
        int i;
    };
    std::vector<RespJob> jobs;
    for (const auto& g : groups) {
        for (int i = 0; i < static_cast<int>(g.responses.size()); ++i) {
            if (!g.responses[static_cast<size_t>(i)].empty()) jobs.push_back({&g, i});
        }
    }

    std::vector<std::vector<double>> job_grads(jobs.size());
    std::vector<double> job_j(jobs.size(), 0.0);
    std::vector<TokenAccum> job_acc(jobs.size());

    parallel_for(static_cast<int>(jobs.size()), cfg.threads, [&](int ji) {
        const RespJob& job = jobs[static_cast<size_t>(ji)];
        const RolloutGroup& g = *job.group;
        const auto& resp = g.responses[static_cast<size_t>(job.i)];
        std::vector<int> seq = g.context;
        seq.insert(seq.end(), resp.begin(), resp.end());
        const int c0 = static_cast<int>(g.context.size());
        std::vector<LogpQuery> queries;
        queries.reserve(resp.size());
        for (size_t t = 0; t < resp.size(); ++t) {
            queries.push_back({c0 - 1 + static_cast<int>(t), resp[t]});
        }
        const auto lp_ref = policy_ref.log_probs(g.context, resp);
        const auto& lp_old = g.logp_old[static_cast<size_t>(job.i)];
        const double adv = g.advantages[static_cast<size_t>(job.i)];
        const double scale = 1.0 / (static_cast<double>(B) * cfg.group_size *
                                    static_cast<double>(resp.size()));
        std::vector<double> dloss(resp.size(), 0.0);
        TokenAccum acc;
        const EngineResult er = theta.weighted_logprob_grad(
            seq, queries, [&](std::span<const double> lp_theta, std::span<double> w) {
                acc = response_terms(lp_theta, lp_old, lp_ref, adv, cfg, job.i, &dloss, scale);
                std::copy(dloss.begin(), dloss.end(), w.begin());
            });
        job_grads[static_cast<size_t>(ji)] = std::move(er.grad);
        job_j[static_cast<size_t>(ji)] = acc.sum_token_terms / acc.tokens;
        job_acc[static_cast<size_t>(ji)] = acc;
    });

    for (size_t ji = 0; ji < jobs.size(); ++ji) {
        const auto& gj = job_grads[ji];
        for (size_t k = 0; k < grad.size(); ++k) grad[k] += gj[k];
        loss_sum += job_j[ji];
        ratio_sum += job_acc[ji].sum_ratio;
        kl_sum += job_acc[ji].sum_kl;
        clipped += job_acc[ji].clipped;
        tokens += job_acc[ji].tokens;
        ++responses;
    }
    for (const auto& g : groups) {
        for (double r : g.rewards) reward_sum += r;
        for (double a : g.advantages) abs_adv_sum += std::abs(a);
    }

    apply_update(theta, grad, optim, {cfg.rule, cfg.lr});

    const int total_draws = B * cfg.group_size;
    metrics.mean_reward = reward_sum / total_draws;
    metrics.mean_abs_advantage = abs_adv_sum / total_draws;
    metrics.clip_fraction = tokens > 0 ? static_cast<double>(clipped) / tokens : 0.0;
    metrics.mean_kl = tokens > 0 ? kl_sum / tokens : 0.0;
    metrics.loss = responses > 0 ? -loss_sum / (static_cast<double>(B) * cfg.group_size) : 0.0;
    return metrics;
}

RlOutcome run_rl(Policy policy, const TaskSet& train, const TaskSet* eval_tasks,
                 const Vocab& vocab, const GrpoConfig& cfg, uint64_t seed,
                 const CheckpointSink& checkpoint, const RewardFn& reward) {
    cfg.validate();
    if (train.tasks.empty()) throw ConfigError("run_rl: empty taskset");

    RlOutcome out;
    const Policy policy_ref = policy; // frozen at RL start
    OptimState optim;
    int iter = 0;

    try {
        for (int episode = 0; episode < cfg.episodes; ++episode) {
            std::vector<int> order(train.tasks.size());
            std::iota(order.begin(), order.end(), 0);
            Rng shuffle_rng(derive_seed(derive_seed(seed, "episode-order"),
                                        static_cast<uint64_t>(episode)));
            for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
                const int j = shuffle_rng.uniform_int(0, i);
                std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
            }
            for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_tasks)) {
                const auto t0 = std::chrono::steady_clock::now();
                std::vector<Task> batch;
                for (size_t k = start;
                     k < std::min(order.size(), start + static_cast<size_t>(cfg.batch_tasks)); ++k) {
                    batch.push_back(train.tasks[static_cast<size_t>(order[k])]);
                }
                const Policy policy_old = policy; // refreshed before each rollout phase
                const StepMetrics sm =
                    train_step(policy, policy_old, policy_ref, batch, vocab, cfg, optim,
                               derive_seed(seed, static_cast<uint64_t>(iter)), reward);

                RlIterMetrics im;
                im.iter = iter;
                im.mean_reward = sm.mean_reward;
                im.clip_fraction = sm.clip_fraction;
                im.mean_kl = sm.mean_kl;
                if (eval_tasks != nullptr && cfg.eval_every > 0 && iter % cfg.eval_every == 0) {
                    im.eval_accuracy =
                        pass1_accuracy(policy, *eval_tasks, vocab, cfg.max_response_len);
                }
                im.wall_time_s =
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                out.metrics.push_back(im);

                ++iter;
                if (checkpoint && cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0) {
                    checkpoint(policy, iter, false);
                }
            }
        }
    } catch (...) {
        if (checkpoint) checkpoint(policy, iter, true);
        throw;
    }

    out.policy = std::move(policy);
    return out;
}

} // namespace grpolab
