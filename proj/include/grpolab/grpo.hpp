// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "grpolab/policy.hpp"
#include "grpolab/tasks.hpp"

namespace grpolab {

struct GrpoConfig {
    int group_size = 8;        // G
    double clip_eps = 0.2;     // epsilon
    double kl_beta = 0.01;     // beta
    double lr = 1e-6;          // RL default
    int episodes = 2;          // RL default
    double temperature = 1.0;  // rollout sampling temperature
    double std_floor = 1e-8;
    int max_response_len = 32;
    int batch_tasks = 16;      // tasks per iteration
    int checkpoint_every = 0;  // iterations; 0 = only on abort
    int eval_every = 1;
    UpdateRule rule = UpdateRule::adam;
    int threads = 1;

    void validate() const;
};

// G responses for one task, sampled from a frozen pi_old snapshot, with the
// sampler's per-token log-probs, accuracy rewards and group-normalized
// advantages.
struct RolloutGroup {
    std::string task_id;
    std::vector<int> context;
    std::vector<std::vector<int>> responses;
    std::vector<std::vector<double>> logp_old;
    std::vector<double> rewards;
    std::vector<double> advantages;
};

// reward(task, decoded response text) in {0,1}. The default scores
// verify_answer(extract_boxed(text)).
using RewardFn = std::function<double(const Task&, const std::string&)>;
double boxed_accuracy_reward(const Task& task, const std::string& response_text);

RolloutGroup rollout(const Policy& policy_old, const Task& task, const Vocab& vocab,
                     const GrpoConfig& cfg, uint64_t seed,
                     const RewardFn& reward = boxed_accuracy_reward);

// (r_i - mean) / std with population std. Groups whose std is at or below
// std_floor get an all-zero advantage vector (no update signal).
std::vector<double> normalize_advantages(std::span<const double> rewards, double std_floor);

// Per-token estimator exp(d) - d - 1 with d = logp_ref - logp_theta.
// Nonnegative everywhere, zero exactly at ratio 1.
std::vector<double> token_kl(std::span<const double> logp_theta,
                             std::span<const double> logp_ref);

// min(gamma*A, clip(gamma, 1-eps, 1+eps)*A) and its derivative in gamma.
// The derivative is exactly 0 whenever the clipped branch is active and
// clipping binds.
struct ClipSurrogate {
    double value = 0.0;
    double dgamma = 0.0;
};
ClipSurrogate clip_surrogate(double gamma, double advantage, double eps);

struct GrpoDiagnostics {
    double mean_ratio = 0.0;
    double clip_fraction = 0.0;
    double mean_kl = 0.0;
};

struct GrpoObjectiveResult {
    double loss = 0.0; // negated objective
    GrpoDiagnostics diag;
};

// Token-mean within each response, then group-mean, of
// min(gamma*A, clip(gamma)*A) - beta*kl; returned negated as a loss.
// Advantages must already be filled. Throws NumericError naming the
// offending (response, token) on a non-finite intermediate.
GrpoObjectiveResult grpo_objective(const RolloutGroup& group, const Policy& theta,
                                   const Policy& ref, const GrpoConfig& cfg);

struct StepMetrics {
    double mean_reward = 0.0;
    double mean_abs_advantage = 0.0;
    double clip_fraction = 0.0;
    double mean_kl = 0.0;
    double loss = 0.0;
};

// One rollout + one gradient step over a batch of tasks. pi_old supplies the
// rollouts, theta takes the update, ref anchors the KL term.
StepMetrics train_step(Policy& theta, const Policy& policy_old, const Policy& policy_ref,
                       std::span<const Task> tasks, const Vocab& vocab, const GrpoConfig& cfg,
                       OptimState& optim, uint64_t seed,
                       const RewardFn& reward = boxed_accuracy_reward);

struct RlIterMetrics {
    int iter = 0;
    double mean_reward = 0.0;
    double eval_accuracy = -1.0;
    double clip_fraction = 0.0;
    double mean_kl = 0.0;
    double wall_time_s = 0.0;
};

struct RlOutcome {
    Policy policy;
    std::vector<RlIterMetrics> metrics;
};

using CheckpointSink = std::function<void(const Policy&, int iter, bool aborting)>;

// Full RL phase. pi_ref freezes at entry; pi_old refreshes before each
// iteration's rollouts; one episode = one pass of the taskset. On an
// exception the current policy is handed to the checkpoint sink before the
// error propagates.
RlOutcome run_rl(Policy policy, const TaskSet& train, const TaskSet* eval_tasks,
                 const Vocab& vocab, const GrpoConfig& cfg, uint64_t seed,
                 const CheckpointSink& checkpoint = {},
                 const RewardFn& reward = boxed_accuracy_reward);

} // namespace grpolab
