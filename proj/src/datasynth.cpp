// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#include "grpolab/datasynth.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>

#include <httplib.h>
#include <json.hpp>

#include "grpolab/errors.hpp"
#include "grpolab/textmatch.hpp"

namespace grpolab {

using nlohmann::json;

const char* const kReflectionTransition =
    "Wait, perhaps we could consider it from a different perspective. "
    "Let's re-evaluate the problem step by step to ensure accuracy.";

std::vector<std::string> default_reflection_keywords() {
    return {"re-evaluate", "re-check", "reevaluate", "recheck", "wait", "let me double-check"};
}

const char* pattern_name(CotPattern p) {
    switch (p) {
        case CotPattern::distilled: return "distilled";
        case CotPattern::reflection_v1: return "reflection_v1";
        case CotPattern::reflection_v2: return "reflection_v2";
        case CotPattern::caption: return "caption";
        case CotPattern::self_critic: return "self_critic";
    }
    return "unknown";
}

CotPattern pattern_from_name(std::string_view name) {
    if (name == "distilled") return CotPattern::distilled;
    if (name == "reflection_v1") return CotPattern::reflection_v1;
    if (name == "reflection_v2") return CotPattern::reflection_v2;
    if (name == "caption") return CotPattern::caption;
    if (name == "self_critic") return CotPattern::self_critic;
    throw ConfigError("unknown cot pattern: " + std::string(name));
}

const char* correctness_name(Correctness c) {
    switch (c) {
        case Correctness::correct: return "correct";
        case Correctness::wrong: return "wrong";
        case Correctness::unjudged: return "unjudged";
    }
    return "unknown";
}

Correctness correctness_from_name(std::string_view name) {
    if (name == "correct") return Correctness::correct;
    if (name == "wrong") return Correctness::wrong;
    if (name == "unjudged") return Correctness::unjudged;
    throw ConfigError("unknown correctness tag: " + std::string(name));
}

namespace {

// A wrong final answer: any digit string != truth, kept single-digit when
// the truth is.
std::string perturb_answer(const std::string& truth, Rng& rng) {
    for (;;) {
        const std::string cand = std::to_string(rng.uniform_int(0, 9));
        if (!answers_equal(cand, truth)) return cand;
    }
}

std::string reflection_phrase(Rng& rng) {
    switch (rng.uniform_int(0, 2)) {
        case 0: return "Wait, let me re-check the cells. ";
        case 1: return "Let's re-evaluate the problem. ";
        default: return "Let me double-check the rows. ";
    }
}

std::string scripted_reasoning(const Task& task, const std::string& final_answer) {
    std::string out;
    const Grid& g = task.image;
    switch (task.family) {
        case TaskFamily::grid_arithmetic: {
            out = "Cells";
            std::vector<int> vals;
            if (task.prompt.rfind("Add row", 0) == 0) {
                const int row = task.prompt[8] - '0';
                for (int c = 0; c < g.cols; ++c) vals.push_back(g.at(row - 1, c)[0] - '0');
            } else {
                for (const auto& cell : g.cells) vals.push_back(cell[0] - '0');
            }
            for (int v : vals) out += " " + std::to_string(v);
            out += ".";
            int acc = vals.empty() ? 0 : vals[0];
            for (size_t i = 1; i < vals.size(); ++i) {
                out += " " + std::to_string(acc) + "+" + std::to_string(vals[i]);
                acc += vals[static_cast<size_t>(i)];
                out += "=" + std::to_string(acc) + ".";
            }
            break;
        }
        case TaskFamily::chart_read: {
            if (task.prompt.rfind("Height", 0) == 0) {
                const int which = task.prompt[14] - '0';
                out = "Bar " + std::to_string(which) + " has height " + g.at(0, which - 1) + ".";
            } else {
                out = "Heights";
                for (int c = 0; c < g.cols; ++c) out += " " + g.at(0, c);
                out += ". Bar " + task.ground_truth + " is tallest.";
            }
            break;
        }
        case TaskFamily::geometry_count: {
            const char target = task.prompt[9]; // "How many X shapes?"
            out = "Rows of " + std::string(1, target) + ":";
            int total = 0;
            for (int r = 0; r < g.rows; ++r) {
                int n = 0;
                for (int c = 0; c < g.cols; ++c) {
                    if (g.at(r, c)[0] == target) ++n;
                }
                out += " " + std::to_string(n);
                total += n;
            }
            out += ". Total " + std::to_string(total) + ".";
            break;
        }
    }
    out += " \\boxed{" + final_answer + "}.";
    return out;
}

} // namespace

std::string ScriptedTeacher::respond(const Task& task, std::string_view prompt, Rng& rng) {
    const bool wrong = rng.bernoulli(p_err_);
    const bool reflect = rng.bernoulli(reflect_rate_);
    const std::string answer = wrong ? perturb_answer(task.ground_truth, rng) : task.ground_truth;

    if (prompt.find("Critical Comments:") != std::string_view::npos) {
        // Honor the draft/critique/final structure requested by the prompt.
        std::string draft = wrong ? perturb_answer(task.ground_truth, rng) : answer;
        std::string out = "Draft Response: The answer looks like " + draft + ". ";
        out += "Critical Comments: ";
        if (reflect) out += reflection_phrase(rng);
        out += "The draft should be checked against every cell. ";
        out += "Final Answer: \\boxed{" + answer + "}";
        return out;
    }

    std::string body = scripted_reasoning(task, answer);
    if (reflect) {
        const size_t at = body.rfind(" \\boxed{");
        body.insert(at + 1, reflection_phrase(rng));
    }
    return body;
}

std::string SelfTeacher::respond(const Task& task, std::string_view prompt, Rng& rng) {
    (void)task;
    std::vector<int> ctx;
    ctx.push_back(vocab_.bos());
    const auto body = vocab_.encode(prompt);
    ctx.insert(ctx.end(), body.begin(), body.end());
    SampleOptions opt = opt_;
    opt.eos_id = vocab_.eos();
    const SampleResult res = policy_.sample(ctx, opt, rng);
    return vocab_.decode(res.tokens);
}

std::string ApiTeacher::respond(const Task& task, std::string_view prompt, Rng& rng) {
    (void)rng;
    json req;
    req["task_id"] = task.id;
    req["prompt"] = std::string(prompt);
    req["question"] = task.prompt;
    json grid;
    grid["rows"] = task.image.rows;
    grid["cols"] = task.image.cols;
    grid["cells"] = task.image.cells;
    req["image"] = grid;

    httplib::Client client(cfg_.endpoint);
    client.set_connection_timeout(0, cfg_.timeout_ms * 1000);
    client.set_read_timeout(cfg_.timeout_ms / 1000, (cfg_.timeout_ms % 1000) * 1000);
    httplib::Headers headers;
    if (const char* token = std::getenv(cfg_.auth_env.c_str()); token && *token) {
        headers.emplace("Authorization", std::string("Bearer ") + token);
    }

    std::string last_error = "no attempt made";
    for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
        auto res = client.Post("/v1/respond", headers, req.dump(), "application/json");
        if (!res) {
            last_error = "connection error (" + httplib::to_string(res.error()) + ")";
            continue;
        }
        if (res->status >= 500) {
            last_error = "server status " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200) {
            throw std::runtime_error("teacher API status " + std::to_string(res->status));
        }
        try {
            return json::parse(res->body).at("response").get<std::string>();
        } catch (const json::exception& e) {
            throw std::runtime_error(std::string("teacher API bad payload: ") + e.what());
        }
    }
    throw std::runtime_error("teacher API unreachable after " + std::to_string(cfg_.retries + 1) +
                             " attempts: " + last_error);
}

namespace {

bool matches_want(const Task& task, const std::string& response, Want want) {
    if (want == Want::any) return true;
    const int ok = verify_answer(task, extract_boxed(response));
    return want == Want::correct ? ok == 1 : ok == 0;
}

// Rejection core shared by rejection_sample and the v2 keyword filter:
// accepts the first draw satisfying `pred`.
template <typename Pred>
DrawResult sample_until(Teacher& teacher, const Task& task, std::string_view prompt,
                        int max_attempts, Rng& rng, Pred pred) {
    if (max_attempts < 1) throw ConfigError("rejection_sample: max_attempts must be >= 1");
    DrawResult out;
    for (int attempt = 1; attempt <= max_attempts; ++attempt) {
        std::string response;
        try {
            response = teacher.respond(task, prompt, rng);
        } catch (const std::exception& e) {
            throw std::runtime_error("teacher failure on task " + task.id + ": " + e.what());
        }
        if (pred(response)) {
            out.accepted = true;
            out.response = std::move(response);
            out.attempts = attempt;
            return out;
        }
    }
    out.attempts = max_attempts;
    return out;
}

} // namespace

DrawResult rejection_sample(Teacher& teacher, const Task& task, std::string_view prompt,
                            Want want, int max_attempts, Rng& rng) {
    return sample_until(teacher, task, prompt, max_attempts, rng,
                        [&](const std::string& r) { return matches_want(task, r, want); });
}

CotRecord build_reflection_v1(const Task& task, const std::string& y_minus,
                              const std::string& y_plus) {
    if (y_minus.empty()) throw ConfigError("reflection_v1: wrong response must be non-empty");
    if (verify_answer(task, extract_boxed(y_minus)) != 0) {
        throw ConfigError("reflection_v1: y_minus must verify wrong for task " + task.id);
    }
    if (verify_answer(task, extract_boxed(y_plus)) != 1) {
        throw ConfigError("reflection_v1: y_plus must verify correct for task " + task.id);
    }
    CotRecord rec;
    rec.task_id = task.id;
    rec.pattern = CotPattern::reflection_v1;
    rec.correctness = Correctness::correct;
    rec.response = y_minus + " " + kReflectionTransition + " " + y_plus;
    return rec;
}

std::vector<CotRecord> filter_reflection_v2(std::span<const CotRecord> records,
                                            std::span<const std::string> keywords,
                                            KeywordScope scope) {
    if (keywords.empty()) throw ConfigError("reflection_v2: empty keyword set");
    std::vector<CotRecord> out;
    for (const auto& rec : records) {
        if (rec.correctness != Correctness::correct) {
            throw ConfigError("reflection_v2: input records must be correct-only (task " +
                              rec.task_id + ")");
        }
        std::string_view text = rec.response;
        if (scope == KeywordScope::pre_answer) {
            const size_t at = text.rfind("\\boxed{");
            if (at != std::string_view::npos) text = text.substr(0, at);
        }
        if (!match_keywords(text, keywords).empty()) {
            CotRecord kept = rec;
            kept.pattern = CotPattern::reflection_v2;
            out.push_back(std::move(kept));
        }
    }
    return out;
}

CotRecord build_caption_cot(const Task& task, const std::string& caption,
                            const std::string& y_plus) {
    if (caption.empty()) throw ConfigError("caption_cot: empty caption");
    if (verify_answer(task, extract_boxed(y_plus)) != 1) {
        throw ConfigError("caption_cot: y_plus must verify correct for task " + task.id);
    }
    CotRecord rec;
    rec.task_id = task.id;
    rec.pattern = CotPattern::caption;
    rec.correctness = Correctness::correct;
    rec.response = caption + "\n\n" + y_plus;
    return rec;
}

std::string self_critic_prompt(const Task& task) {
    std::string out =
        "When analyzing any query or task, please follow the structure below:\n"
        "\n"
        "1. Draft Response:\n"
        "Generate an initial response.\n"
        "\n"
        "2. Critical Comments:\n"
        "Analyze your draft response by considering:\n"
        "- Potential weaknesses or gaps\n"
        "- Logical flaws or inconsistencies\n"
        "- Missing perspectives or alternatives\n"
        "- Areas for improvement\n"
        "- Suggestions for a better version\n"
        "- Steering toward the given answer\n"
        "\n"
        "The critical comments should:\n"
        "- Be specific and actionable\n"
        "- Reference particular parts of the draft\n"
        "- Suggest concrete improvements\n"
        "- Consider different angles or approaches\n"
        "- Guide towards a more comprehensive solution\n"
        "\n"
        "Output Format:\n"
        "- Draft Response\n"
        "Your initial complete response to the instruction.\n"
        "- Critical Comments\n"
        "Your analysis of the draft response, highlighting areas for improvement and "
        "suggesting specific enhancements.\n"
        "- Final Answer\n"
        "Put your final answer within \\boxed{}.\n"
        "\n"
        "Question: ";
    out += render_text(task);
    return out;
}

namespace {

Want want_for_quality(Correctness q) {
    switch (q) {
        case Correctness::correct: return Want::correct;
        case Correctness::wrong: return Want::wrong;
        case Correctness::unjudged: return Want::any;
    }
    return Want::any;
}

} // namespace

SynthResult synthesize_dataset(Teacher& teacher, const TaskSet& taskset, CotPattern pattern,
                               Correctness quality, const SynthOptions& opts, uint64_t seed) {
    if (pattern != CotPattern::distilled && pattern != CotPattern::self_critic &&
        quality != Correctness::correct) {
        throw ConfigError(std::string("synthesize: pattern ") + pattern_name(pattern) +
                          " requires quality=correct");
    }
    if (pattern == CotPattern::reflection_v2 && opts.keywords.empty()) {
        throw ConfigError("synthesize: reflection_v2 needs a keyword set");
    }

    std::vector<const Task*> order;
    order.reserve(taskset.tasks.size());
    for (const auto& t : taskset.tasks) order.push_back(&t);
    std::sort(order.begin(), order.end(),
              [](const Task* a, const Task* b) { return a->id < b->id; });

    SynthResult res;
    res.stats.pattern = pattern_name(pattern);
    res.stats.quality = correctness_name(quality);
    const int budget = opts.budget > 0 ? opts.budget : static_cast<int>(order.size());

    for (size_t i = 0; i < order.size(); ++i) {
        if (res.stats.records >= budget) break;
        const Task& task = *order[i];
        Rng rng(derive_seed(seed, static_cast<uint64_t>(i)));
        res.stats.tasks_tried += 1;

        const std::string prompt = (pattern == CotPattern::self_critic)
                                       ? self_critic_prompt(task)
                                       : render_text(task);

        auto push = [&](CotRecord rec, int attempts) {
            rec.attempts = attempts;
            res.records.push_back(std::move(rec));
            res.stats.records += 1;
            res.stats.attempts_total += attempts;
        };

        switch (pattern) {
            case CotPattern::distilled:
            case CotPattern::self_critic: {
                const Want want = quality == Correctness::unjudged ? Want::any
                                                                   : want_for_quality(quality);
                const DrawResult d = rejection_sample(teacher, task, prompt, want,
                                                      opts.max_attempts, rng);
                if (!d.accepted) {
                    res.stats.exhausted += 1;
                    break;
                }
                CotRecord rec;
                rec.task_id = task.id;
                rec.pattern = pattern;
                rec.correctness = quality;
                rec.response = d.response;
                push(std::move(rec), d.attempts);
                break;
            }
            case CotPattern::reflection_v1: {
                const DrawResult wrong = rejection_sample(teacher, task, prompt, Want::wrong,
                                                          opts.max_attempts, rng);
                const DrawResult right = rejection_sample(teacher, task, prompt, Want::correct,
                                                          opts.max_attempts, rng);
                if (!wrong.accepted || !right.accepted) {
                    res.stats.exhausted += 1;
                    break;
                }
                push(build_reflection_v1(task, wrong.response, right.response),
                     wrong.attempts + right.attempts);
                break;
            }
            case CotPattern::reflection_v2: {
                const DrawResult d = sample_until(
                    teacher, task, prompt, opts.max_attempts, rng, [&](const std::string& r) {
                        if (verify_answer(task, extract_boxed(r)) != 1) return false;
                        std::string_view text = r;
                        if (opts.v2_scope == KeywordScope::pre_answer) {
                            const size_t at = text.rfind("\\boxed{");
                            if (at != std::string_view::npos) text = text.substr(0, at);
                        }
                        return !match_keywords(text, opts.keywords).empty();
                    });
                if (!d.accepted) {
                    res.stats.exhausted += 1;
                    break;
                }
                CotRecord rec;
                rec.task_id = task.id;
                rec.pattern = CotPattern::reflection_v2;
                rec.correctness = Correctness::correct;
                rec.response = d.response;
                push(std::move(rec), d.attempts);
                break;
            }
            case CotPattern::caption: {
                const DrawResult d = rejection_sample(teacher, task, prompt, Want::correct,
                                                      opts.max_attempts, rng);
                if (!d.accepted) {
                    res.stats.exhausted += 1;
                    break;
                }
                push(build_caption_cot(task, describe_image(task), d.response), d.attempts);
                break;
            }
        }
    }

    if (res.records.empty()) {
        throw DataError("synthesize: budget exhausted with zero records (pattern " +
                        std::string(pattern_name(pattern)) + ")");
    }
    res.stats.acceptance_rate =
        static_cast<double>(res.stats.records) / static_cast<double>(res.stats.tasks_tried);
    res.stats.mean_attempts =
        res.stats.records > 0
            ? static_cast<double>(res.stats.attempts_total) / res.stats.records
            : 0.0;
    return res;
}

void save_cot_records(std::span<const CotRecord> records, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw FormatError("cot: cannot open " + path + " for writing");
    for (const auto& rec : records) {
        json j;
        j["task_id"] = rec.task_id;
        j["pattern"] = pattern_name(rec.pattern);
        j["correctness"] = correctness_name(rec.correctness);
        j["attempts"] = rec.attempts;
        j["response"] = rec.response;
        os << j.dump() << "\n";
    }
    if (!os) throw FormatError("cot: write failed for " + path);
}

std::vector<CotRecord> load_cot_records(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cot: cannot open " + path);
    std::vector<CotRecord> out;
    std::string line;
    try {
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const json j = json::parse(line);
            CotRecord rec;
            rec.task_id = j.at("task_id").get<std::string>();
            rec.pattern = pattern_from_name(j.at("pattern").get<std::string>());
            rec.correctness = correctness_from_name(j.at("correctness").get<std::string>());
            rec.attempts = j.at("attempts").get<int>();
            rec.response = j.at("response").get<std::string>();
            out.push_back(std::move(rec));
        }
    } catch (const json::exception& e) {
        throw FormatError("cot: parse error in " + path + ": " + e.what());
    }
    return out;
}

} // namespace grpolab
