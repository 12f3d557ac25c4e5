// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "grpolab/datasynth.hpp"
#include "grpolab/grpo.hpp"
#include "grpolab/sft.hpp"
#include "grpolab/tasks.hpp"

namespace grpolab {

inline constexpr const char* kToolVersion = "0.1.0";

struct TasksSpec {
    int train_count = 128;
    int eval_count = 48;
    std::map<std::string, double> families = {
        {"grid-arithmetic", 1.0}, {"chart-read", 1.0}, {"geometry-count", 1.0}};
    int difficulty_lo = 1;
    int difficulty_hi = 1;

    FamilyMix mix() const;
};

struct TeacherSpec {
    std::string kind = "scripted"; // scripted | api
    double p_err = 0.0;
    double reflect_rate = 0.0;
    std::string endpoint;
    std::string auth_env = "GRPOLAB_TEACHER_TOKEN";
    int timeout_ms = 5000;
    int retries = 2;
};

// The stand-in for the pretrained base model: a brief language-model pass
// over rendered tasks followed by filler text that sometimes ends in a
// boxed (uncorrelated) answer. Gives the base policy generic token
// statistics and a low rate of well-formed answers, like a pretrained LM
// that has seen the format but not the skill.
struct WarmupSpec {
    bool enabled = false;
    int tasks = 192;
    int epochs = 3;
    double lr = 1e-3;
    double boxed_fraction = 0.3;
    int batch_size = 8;
};

struct PolicySpec {
    int context_len = 128;
    int width = 32;
    int layers = 2;
    int heads = 4;
    double init_std = 0.08;
    WarmupSpec warmup;
};

struct SynthSpec {
    std::string pattern = "distilled";
    std::string quality = "correct";
    int budget = 0;
    int max_attempts = 24;
    std::vector<std::string> keywords = default_reflection_keywords();
    std::string v2_scope = "whole"; // whole | pre_answer
};

struct RlSpec {
    std::string init = "sft"; // sft | base | checkpoint path
    GrpoConfig grpo;
};

struct EvalSpec {
    std::string target = "auto"; // auto | sft | rl | base | checkpoint path
    int samples_per_task = 1;
    double temperature = 1.0;
    int max_response_len = 32;
};

struct AnalyzeSpec {
    std::vector<std::string> keywords = default_reflection_keywords();
    int probe_layer = -1; // -1: last block
    bool erank = true;
    int erank_max_response_len = 16;
};

struct RunConfig {
    uint64_t seed = 0;
    std::string out_dir;
    std::vector<std::string> stages;
    int threads = 1;
    TasksSpec tasks;
    TeacherSpec teacher;
    PolicySpec policy;
    SynthSpec synth;
    SftConfig sft;
    RlSpec rl;
    EvalSpec eval;
    AnalyzeSpec analyze;
    nlohmann::json ablate;  // arms + max_parallel; expanded by the ablate stage
    nlohmann::json raw;     // normalized source document (base for ablate merges)

    void validate() const;
};

// Parses the run-config document (JSON with // comments permitted).
RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::string& path);

// Applies "a.b.c=value" to a JSON document (value parsed as JSON when
// possible, else taken as a string).
void apply_override(nlohmann::json& doc, const std::string& assignment);

nlohmann::json config_to_json(const RunConfig& cfg);
uint64_t config_hash(const RunConfig& cfg);

} // namespace grpolab
