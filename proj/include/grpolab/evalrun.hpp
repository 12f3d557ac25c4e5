// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "grpolab/policy.hpp"
#include "grpolab/tasks.hpp"

namespace grpolab {

struct TaskEvalRecord {
    std::string task_id;
    std::string family;
    std::vector<std::string> responses;                // sample 0 = greedy
    std::vector<std::optional<std::string>> extracted; // per sample
    std::vector<int> rewards;                          // per sample, {0,1}
};

// Accuracies are percentages. The overall figure is the unweighted mean of
// the per-family accuracies.
struct EvalReport {
    std::string tag;
    uint64_t taskset_hash = 0;
    uint64_t seed = 0;
    int task_count = 0;
    int samples_per_task = 0;
    double temperature = 0.0;
    std::map<std::string, double> family_pass1;
    double overall_pass1 = 0.0;
    std::map<int, double> passk_overall;                       // k -> %
    std::map<int, std::map<std::string, double>> passk_family; // k -> family -> %
    std::vector<TaskEvalRecord> records;
};

struct EvalOptions {
    int samples_per_task = 1; // >= 16 also fills the pass@16 row
    double temperature = 1.0; // for samples beyond the greedy first one
    int max_response_len = 64;
    int threads = 1;
};

// Sample 0 is greedy (pass@1); samples 1..k-1 draw at the configured
// temperature. pass@k counts a task when any of its first k samples scores 1.
// Never mutates the policy.
EvalReport run_benchmark(const Policy& policy, const TaskSet& taskset, const Vocab& vocab,
                         const EvalOptions& opts, uint64_t seed);

// Greedy pass@1 percentage; the cheap per-epoch / per-iteration metric.
double pass1_accuracy(const Policy& policy, const TaskSet& taskset, const Vocab& vocab,
                      int max_response_len);

// Recomputes the accuracy tables from stored per-task records; equals the
// original report by construction.
EvalReport rescore(const EvalReport& report);

struct DeltaRow {
    std::string tag_from;
    std::string tag_to;
    double overall_delta = 0.0;
    std::map<std::string, double> family_delta;
};

struct TagStats {
    std::string tag;
    int runs = 0;
    double overall_mean = 0.0;
    double overall_min = 0.0;
    double overall_max = 0.0;
    std::map<std::string, double> family_mean;
};

struct DeltaTable {
    std::vector<TagStats> stats;
    std::vector<DeltaRow> rows; // all ordered tag pairs, by mean accuracy
};

// Requires all reports to share the taskset hash. Reports with the same tag
// are treated as seeds of one arm and aggregated first.
DeltaTable compare_runs(std::span<const EvalReport> reports);

void save_report(const EvalReport& report, const std::string& path);
EvalReport load_report(const std::string& path);

void save_delta_csv(const DeltaTable& table, const std::string& path);

} // namespace grpolab
