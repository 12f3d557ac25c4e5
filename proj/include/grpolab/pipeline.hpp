// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <string>

#include "grpolab/config.hpp"
#include "grpolab/evalrun.hpp"

namespace grpolab {

// Stage artifact paths inside a run directory. Deterministic artifacts live
// under outputs/; logs/ holds the timing-bearing duplicates and is excluded
// from manifests.
struct RunPaths {
    std::string root;
    std::string outputs;
    std::string logs;
    std::string tasks_train;
    std::string tasks_eval;
    std::string cot;
    std::string synth_stats;
    std::string policy_sft;
    std::string sft_metrics;
    std::string policy_rl;
    std::string rl_metrics;
    std::string analysis;

    explicit RunPaths(const std::string& out_dir);
    std::string eval_report(const std::string& target) const;
    std::string manifest(const std::string& stage) const;
};

// Deterministic policy construction from the run config: seeded init plus
// the optional warmup pass. Pure function of (config, vocab).
Policy make_base_policy(const RunConfig& cfg, const Vocab& vocab);

std::unique_ptr<Teacher> make_teacher(const TeacherSpec& spec, const Policy* self_policy,
                                      const Vocab& vocab);

// Executes one pipeline stage against the run directory, writing artifacts
// and a manifest. Throws DependencyError when required inputs are missing.
void run_stage(const RunConfig& cfg, const std::string& stage, bool emit_plot_data);

// Expands the config's ablation grid into child runs (bounded parallel),
// executes each child's stage list, and writes a comparison table.
void run_ablate(const RunConfig& cfg, bool emit_plot_data);

} // namespace grpolab
