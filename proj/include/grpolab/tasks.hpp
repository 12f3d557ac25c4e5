// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "grpolab/vocab.hpp"

namespace grpolab {

enum class TaskFamily { grid_arithmetic, chart_read, geometry_count };

const char* family_name(TaskFamily f);
TaskFamily family_from_name(std::string_view name);

// Symbolic image: a small grid of single-character cell tokens (digits for
// numeric cells, one of "ox^#" for shapes).
struct Grid {
    int rows = 0;
    int cols = 0;
    std::vector<std::string> cells; // row-major, rows*cols entries

    const std::string& at(int r, int c) const {
        return cells[static_cast<size_t>(r) * cols + c];
    }
};

struct Task {
    std::string id;
    TaskFamily family = TaskFamily::grid_arithmetic;
    int difficulty = 1;
    std::string prompt;
    Grid image;
    std::string ground_truth;
};

struct TaskSet {
    std::vector<Task> tasks;
    std::string split; // "train" or "eval"
    uint64_t seed = 0;
};

struct FamilyMix {
    std::map<TaskFamily, double> weights; // relative, need not sum to 1
};

// Deterministic in (seed, count, mix, range); every task's ground truth is
// computed from its own grid, so the answer oracle is exact by construction.
TaskSet generate_taskset(const FamilyMix& mix, int count, uint64_t seed,
                         int difficulty_lo, int difficulty_hi, std::string split);

// Canonical textual form of a task: prompt line + grid serialization.
// Injective over (prompt, image).
std::string render_text(const Task& task);

// BOS + encoded render_text. Throws ConfigError when the result would not
// fit in max_len tokens.
std::vector<int> render_context(const Task& task, const Vocab& vocab, int max_len);

// Ground-truth scene description used as the caption source.
std::string describe_image(const Task& task);

// Content of the last "\boxed{...}" group (brace-balanced); absent when no
// marker exists or the last one is unbalanced.
std::optional<std::string> extract_boxed(std::string_view text);

// Trim, collapse internal whitespace, ASCII-lowercase.
std::string normalize_answer(std::string_view s);

// Normalized comparison; numeric answers compare by exact rational value
// ("12" == " 12.0 ").
bool answers_equal(std::string_view a, std::string_view b);

// Accuracy reward: 1 iff the answer matches ground truth, else 0. Absent
// answers score 0. Total on all inputs.
int verify_answer(const Task& task, const std::optional<std::string>& answer);

void save_taskset(const TaskSet& ts, const std::string& path);
TaskSet load_taskset(const std::string& path);

// Hash of the canonical serialization; reports carry it so cross-run
// comparisons can refuse mismatched tasksets.
uint64_t taskset_hash(const TaskSet& ts);

} // namespace grpolab
