// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "grpolab/datasynth.hpp"
#include "grpolab/policy.hpp"
#include "grpolab/tasks.hpp"

namespace grpolab {

struct SftConfig {
    int epochs = 3;        // cold-start default
    double lr = 1e-5;      // cold-start default
    int batch_size = 8;
    uint64_t shuffle_seed = 0;
    bool mask_prompt = true; // train on response tokens only
    UpdateRule rule = UpdateRule::adam;
    int threads = 1;
    int eval_max_len = 32;

    void validate() const;
};

struct EpochMetrics {
    int epoch = 0;
    double mean_loss = 0.0;
    double eval_accuracy = -1.0; // -1: no eval taskset supplied
    double wall_time_s = 0.0;
    int skipped = 0; // records too long for the context window
};

struct SftOutcome {
    Policy policy;
    std::vector<EpochMetrics> metrics;
};

// Mean negative log-likelihood over unmasked response positions. mask[i]
// covers response[i]; a fully masked sequence scores 0.
double sft_loss(const Policy& policy, std::span<const int> context,
                std::span<const int> response, std::span<const uint8_t> mask);

// Cold-start trainer: masked next-token cross-entropy over the records'
// responses, contexts rebuilt from the taskset. Records are re-sorted by a
// canonical key before the seeded shuffle, so input file order is
// irrelevant. Throws DataError on a dangling task id and NumericError on a
// non-finite loss.
SftOutcome run_sft(Policy policy, std::span<const CotRecord> records, const TaskSet& train_tasks,
                   const TaskSet* eval_tasks, const Vocab& vocab, const SftConfig& cfg);

} // namespace grpolab
