// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "grpolab/policy.hpp"
#include "grpolab/rng.hpp"
#include "grpolab/tasks.hpp"

namespace grpolab {

// The two-step reflection pattern splices an incorrect attempt and a correct
// one with this exact transition sentence.
extern const char* const kReflectionTransition;

// Keyword defaults for the reflection detector / reflection-v2 filter.
std::vector<std::string> default_reflection_keywords();

enum class CotPattern { distilled, reflection_v1, reflection_v2, caption, self_critic };
enum class Correctness { correct, wrong, unjudged };

const char* pattern_name(CotPattern p);
CotPattern pattern_from_name(std::string_view name);
const char* correctness_name(Correctness c);
Correctness correctness_from_name(std::string_view name);

struct CotRecord {
    std::string task_id;
    CotPattern pattern = CotPattern::distilled;
    Correctness correctness = Correctness::unjudged;
    int attempts = 0;
    std::string response;
};

// Response generator abstraction: the scripted oracle stands in for the
// large teacher models, the self teacher wraps the current policy, and the
// API teacher forwards to an external HTTP endpoint.
class Teacher {
public:
    virtual ~Teacher() = default;
    virtual std::string respond(const Task& task, std::string_view prompt, Rng& rng) = 0;
};

// Emits templated chain-of-thought text with a configurable error rate and
// a configurable rate of reflection-keyword injection. Deterministic given
// the rng.
class ScriptedTeacher : public Teacher {
public:
    ScriptedTeacher(double p_err, double reflect_rate)
        : p_err_(p_err), reflect_rate_(reflect_rate) {}
    std::string respond(const Task& task, std::string_view prompt, Rng& rng) override;

private:
    double p_err_;
    double reflect_rate_;
};

class SelfTeacher : public Teacher {
public:
    SelfTeacher(const Policy& policy, const Vocab& vocab, SampleOptions opt)
        : policy_(policy), vocab_(vocab), opt_(opt) {}
    std::string respond(const Task& task, std::string_view prompt, Rng& rng) override;

private:
    const Policy& policy_;
    const Vocab& vocab_;
    SampleOptions opt_;
};

struct ApiTeacherConfig {
    std::string endpoint;                          // e.g. "http://host:8080"
    std::string auth_env = "GRPOLAB_TEACHER_TOKEN"; // env var holding the bearer token
    int timeout_ms = 5000;
    int retries = 2;
};

// HTTP client honoring the Teacher interface. POSTs the task and prompt as
// JSON to <endpoint>/v1/respond and expects {"response": "..."}.
class ApiTeacher : public Teacher {
public:
    explicit ApiTeacher(ApiTeacherConfig cfg) : cfg_(std::move(cfg)) {}
    std::string respond(const Task& task, std::string_view prompt, Rng& rng) override;

private:
    ApiTeacherConfig cfg_;
};

enum class Want { correct, wrong, any };

struct DrawResult {
    bool accepted = false;
    std::string response;
    int attempts = 0;
};

// Draws until verify_answer(extract_boxed(response)) matches `want`
// (want=any accepts the first draw). Returns accepted=false after
// max_attempts failures; never issues more than max_attempts teacher calls.
DrawResult rejection_sample(Teacher& teacher, const Task& task, std::string_view prompt,
                            Want want, int max_attempts, Rng& rng);

// y_minus must verify wrong and y_plus correct for the same task; output is
// y_minus + " " + kReflectionTransition + " " + y_plus.
CotRecord build_reflection_v1(const Task& task, const std::string& y_minus,
                              const std::string& y_plus);

enum class KeywordScope { whole_response, pre_answer };

// Keeps exactly the correct records whose response contains at least one
// keyword (case-insensitive, word boundaries); retags them reflection_v2.
std::vector<CotRecord> filter_reflection_v2(std::span<const CotRecord> records,
                                            std::span<const std::string> keywords,
                                            KeywordScope scope = KeywordScope::whole_response);

// caption + blank line + y_plus (which must verify correct).
CotRecord build_caption_cot(const Task& task, const std::string& caption,
                            const std::string& y_plus);

// Structured draft/critique/final prompt with the task question appended.
std::string self_critic_prompt(const Task& task);

struct SynthOptions {
    int max_attempts = 24;
    int budget = 0; // max records; 0 = one pass over the taskset
    std::vector<std::string> keywords = default_reflection_keywords();
    KeywordScope v2_scope = KeywordScope::whole_response;
};

struct SynthStats {
    int tasks_tried = 0;
    int records = 0;
    int exhausted = 0;
    long long attempts_total = 0;
    double acceptance_rate = 0.0;
    double mean_attempts = 0.0;
    std::string pattern;
    std::string quality;
};

struct SynthResult {
    std::vector<CotRecord> records;
    SynthStats stats;
};

// Builds a cold-start dataset of one pattern over the taskset, order-stable
// by task id. Teacher failures are rethrown with the task id attached.
SynthResult synthesize_dataset(Teacher& teacher, const TaskSet& taskset, CotPattern pattern,
                               Correctness quality, const SynthOptions& opts, uint64_t seed);

void save_cot_records(std::span<const CotRecord> records, const std::string& path);
std::vector<CotRecord> load_cot_records(const std::string& path);

} // namespace grpolab
