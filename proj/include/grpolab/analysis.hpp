// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "grpolab/policy.hpp"
#include "grpolab/tasks.hpp"

namespace grpolab {

struct AhaDetection {
    bool has_aha = false;
    std::vector<std::string> matched; // sorted, deduplicated
};

// Case-insensitive word-boundary keyword scan over a response.
AhaDetection detect_aha(std::string_view response, std::span<const std::string> keywords);

struct AhaRecord {
    std::string query_id;
    std::string response;
    int reward = 0;
    std::string model_tag;
};

struct AhaModelRow {
    std::string model_tag;
    int total = 0;
    int with_aha = 0;
    int correct_with = 0;
    int correct_without = 0;
    double frequency_pct = 0.0;            // % of responses containing >= 1 keyword
    std::optional<double> acc_with_pct;    // absent when no aha responses
    std::optional<double> acc_without_pct; // absent when all responses have aha
};

struct AhaReport {
    std::vector<std::string> keywords;
    std::vector<AhaModelRow> rows; // one per model tag, tag-sorted
};

AhaReport aha_report(std::span<const AhaRecord> records,
                     std::span<const std::string> keywords);

// exp(Shannon entropy of the normalized singular-value distribution).
// 1 <= result <= min(rows, cols); equals k for exactly k equal nonzero
// singular values. Throws NumericError for all-zero or non-finite input.
double effective_rank(int rows, int cols, std::span<const double> data);

inline double effective_rank(const HiddenStates& hs) {
    return effective_rank(hs.rows, hs.cols, hs.data);
}

struct ErankResult {
    std::string dataset; // family name or "all"
    double erank_before = 0.0;
    double erank_after = 0.0;
    double delta = 0.0;
};

// For each family in the probe set (plus "all"): greedy-decode each probe
// task under each policy, stack the response-token hidden vectors at
// `layer`, mean-center, and compare effective ranks. Policies must share an
// architecture.
std::vector<ErankResult> delta_erank(const Policy& after, const Policy& before,
                                     const TaskSet& probe, const Vocab& vocab, int layer,
                                     int max_response_len);

void save_aha_records(std::span<const AhaRecord> records, const std::string& path);
std::vector<AhaRecord> load_aha_records(const std::string& path);
void save_aha_csv(const AhaReport& report, const std::string& path);

} // namespace grpolab
