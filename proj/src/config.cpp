// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#include "grpolab/config.hpp"

#include <fstream>
#include <set>

#include "grpolab/errors.hpp"
#include "grpolab/rng.hpp"

namespace grpolab {

using nlohmann::json;

FamilyMix TasksSpec::mix() const {
    FamilyMix m;
    for (const auto& [name, w] : families) m.weights[family_from_name(name)] = w;
    return m;
}

void RunConfig::validate() const {
    if (out_dir.empty()) throw ConfigError("config: out_dir is required");
    static const std::set<std::string> known = {"synth", "sft", "rl", "eval", "analyze"};
    for (const auto& s : stages) {
        if (!known.count(s)) throw ConfigError("config: unknown stage '" + s + "'");
    }
    if (tasks.train_count < 1 || tasks.eval_count < 1) {
        throw ConfigError("config: task counts must be >= 1");
    }
    if (teacher.kind != "scripted" && teacher.kind != "api") {
        throw ConfigError("config: teacher.kind must be scripted or api");
    }
    if (teacher.kind == "api" && teacher.endpoint.empty()) {
        throw ConfigError("config: api teacher needs an endpoint");
    }
    if (!(teacher.p_err >= 0.0 && teacher.p_err <= 1.0)) {
        throw ConfigError("config: teacher.p_err must be in [0,1]");
    }
    if (synth.v2_scope != "whole" && synth.v2_scope != "pre_answer") {
        throw ConfigError("config: synth.v2_scope must be whole or pre_answer");
    }
    pattern_from_name(synth.pattern);
    correctness_from_name(synth.quality);
    sft.validate();
    rl.grpo.validate();
    if (eval.samples_per_task < 1) throw ConfigError("config: eval.samples_per_task must be >= 1");
    if (threads < 1) throw ConfigError("config: threads must be >= 1");
}

namespace {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
    }
}

} // namespace

RunConfig parse_run_config(const json& doc) {
    if (!doc.is_object()) throw ConfigError("config: document must be an object");
    RunConfig cfg;
    try {
        cfg.seed = get_or<uint64_t>(doc, "seed", 0);
        cfg.out_dir = get_or<std::string>(doc, "out_dir", "");
        cfg.stages = get_or<std::vector<std::string>>(doc, "stages", {});
        cfg.threads = get_or<int>(doc, "threads", 1);

        if (doc.contains("tasks")) {
            const json& t = doc.at("tasks");
            cfg.tasks.train_count = get_or<int>(t, "train_count", cfg.tasks.train_count);
            cfg.tasks.eval_count = get_or<int>(t, "eval_count", cfg.tasks.eval_count);
            if (t.contains("families")) {
                cfg.tasks.families = t.at("families").get<std::map<std::string, double>>();
            }
            if (t.contains("difficulty")) {
                const auto d = t.at("difficulty").get<std::vector<int>>();
                if (d.size() != 2) throw ConfigError("config: tasks.difficulty must be [lo, hi]");
                cfg.tasks.difficulty_lo = d[0];
                cfg.tasks.difficulty_hi = d[1];
            }
        }
        if (doc.contains("teacher")) {
            const json& t = doc.at("teacher");
            cfg.teacher.kind = get_or<std::string>(t, "kind", cfg.teacher.kind);
            cfg.teacher.p_err = get_or<double>(t, "p_err", cfg.teacher.p_err);
            cfg.teacher.reflect_rate = get_or<double>(t, "reflect_rate", cfg.teacher.reflect_rate);
            cfg.teacher.endpoint = get_or<std::string>(t, "endpoint", cfg.teacher.endpoint);
            cfg.teacher.auth_env = get_or<std::string>(t, "auth_env", cfg.teacher.auth_env);
            cfg.teacher.timeout_ms = get_or<int>(t, "timeout_ms", cfg.teacher.timeout_ms);
            cfg.teacher.retries = get_or<int>(t, "retries", cfg.teacher.retries);
        }
        if (doc.contains("policy")) {
            const json& p = doc.at("policy");
            cfg.policy.context_len = get_or<int>(p, "context_len", cfg.policy.context_len);
            cfg.policy.width = get_or<int>(p, "width", cfg.policy.width);
            cfg.policy.layers = get_or<int>(p, "layers", cfg.policy.layers);
            cfg.policy.heads = get_or<int>(p, "heads", cfg.policy.heads);
            cfg.policy.init_std = get_or<double>(p, "init_std", cfg.policy.init_std);
            if (p.contains("warmup")) {
                const json& w = p.at("warmup");
                cfg.policy.warmup.enabled = get_or<bool>(w, "enabled", cfg.policy.warmup.enabled);
                cfg.policy.warmup.tasks = get_or<int>(w, "tasks", cfg.policy.warmup.tasks);
                cfg.policy.warmup.epochs = get_or<int>(w, "epochs", cfg.policy.warmup.epochs);
                cfg.policy.warmup.lr = get_or<double>(w, "lr", cfg.policy.warmup.lr);
                cfg.policy.warmup.boxed_fraction =
                    get_or<double>(w, "boxed_fraction", cfg.policy.warmup.boxed_fraction);
                cfg.policy.warmup.batch_size =
                    get_or<int>(w, "batch_size", cfg.policy.warmup.batch_size);
            }
        }
        if (doc.contains("synth")) {
            const json& s = doc.at("synth");
            cfg.synth.pattern = get_or<std::string>(s, "pattern", cfg.synth.pattern);
            cfg.synth.quality = get_or<std::string>(s, "quality", cfg.synth.quality);
            cfg.synth.budget = get_or<int>(s, "budget", cfg.synth.budget);
            cfg.synth.max_attempts = get_or<int>(s, "max_attempts", cfg.synth.max_attempts);
            if (s.contains("keywords")) {
                cfg.synth.keywords = s.at("keywords").get<std::vector<std::string>>();
            }
            cfg.synth.v2_scope = get_or<std::string>(s, "v2_scope", cfg.synth.v2_scope);
        }
        if (doc.contains("sft")) {
            const json& s = doc.at("sft");
            cfg.sft.epochs = get_or<int>(s, "epochs", cfg.sft.epochs);
            cfg.sft.lr = get_or<double>(s, "lr", cfg.sft.lr);
            cfg.sft.batch_size = get_or<int>(s, "batch_size", cfg.sft.batch_size);
            cfg.sft.mask_prompt = get_or<bool>(s, "mask_prompt", cfg.sft.mask_prompt);
            cfg.sft.eval_max_len = get_or<int>(s, "eval_max_len", cfg.sft.eval_max_len);
        }
        if (doc.contains("rl")) {
            const json& r = doc.at("rl");
            cfg.rl.init = get_or<std::string>(r, "init", cfg.rl.init);
            GrpoConfig& g = cfg.rl.grpo;
            g.group_size = get_or<int>(r, "group_size", g.group_size);
            g.clip_eps = get_or<double>(r, "clip_eps", g.clip_eps);
            g.kl_beta = get_or<double>(r, "kl_beta", g.kl_beta);
            g.lr = get_or<double>(r, "lr", g.lr);
            g.episodes = get_or<int>(r, "episodes", g.episodes);
            g.temperature = get_or<double>(r, "temperature", g.temperature);
            g.std_floor = get_or<double>(r, "std_floor", g.std_floor);
            g.max_response_len = get_or<int>(r, "max_response_len", g.max_response_len);
            g.batch_tasks = get_or<int>(r, "batch_tasks", g.batch_tasks);
            g.checkpoint_every = get_or<int>(r, "checkpoint_every", g.checkpoint_every);
            g.eval_every = get_or<int>(r, "eval_every", g.eval_every);
        }
        if (doc.contains("eval")) {
            const json& e = doc.at("eval");
            cfg.eval.target = get_or<std::string>(e, "target", cfg.eval.target);
            cfg.eval.samples_per_task = get_or<int>(e, "samples_per_task", cfg.eval.samples_per_task);
            cfg.eval.temperature = get_or<double>(e, "temperature", cfg.eval.temperature);
            cfg.eval.max_response_len =
                get_or<int>(e, "max_response_len", cfg.eval.max_response_len);
        }
        if (doc.contains("analyze")) {
            const json& a = doc.at("analyze");
            if (a.contains("keywords")) {
                cfg.analyze.keywords = a.at("keywords").get<std::vector<std::string>>();
            }
            cfg.analyze.probe_layer = get_or<int>(a, "probe_layer", cfg.analyze.probe_layer);
            cfg.analyze.erank = get_or<bool>(a, "erank", cfg.analyze.erank);
            cfg.analyze.erank_max_response_len =
                get_or<int>(a, "erank_max_response_len", cfg.analyze.erank_max_response_len);
        }
        if (doc.contains("ablate")) cfg.ablate = doc.at("ablate");
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    cfg.raw = doc;
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    json doc;
    try {
        doc = json::parse(is, nullptr, /*allow_exceptions=*/true, /*ignore_comments=*/true);
    } catch (const json::exception& e) {
        throw ConfigError("config: parse error in " + path + ": " + e.what());
    }
    return parse_run_config(doc);
}

void apply_override(json& doc, const std::string& assignment) {
    const size_t eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("config: override must look like a.b.c=value, got '" + assignment + "'");
    }
    const std::string path = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);
    json* node = &doc;
    size_t start = 0;
    for (;;) {
        const size_t dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (key.empty()) throw ConfigError("config: empty key in override '" + assignment + "'");
        if (dot == std::string::npos) {
            json parsed = json::parse(value, nullptr, /*allow_exceptions=*/false);
            (*node)[key] = parsed.is_discarded() ? json(value) : parsed;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

json config_to_json(const RunConfig& cfg) {
    json j = cfg.raw;
    // CLI-resolved fields win over the raw document.
    j["seed"] = cfg.seed;
    j["out_dir"] = cfg.out_dir;
    j["stages"] = cfg.stages;
    return j;
}

uint64_t config_hash(const RunConfig& cfg) {
    json j = config_to_json(cfg);
    // The output location does not change what is computed.
    j.erase("out_dir");
    return fnv1a64(j.dump());
}

} // namespace grpolab
