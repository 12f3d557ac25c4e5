// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#include "grpolab/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "grpolab/analysis.hpp"
#include "grpolab/errors.hpp"
#include "grpolab/parallel.hpp"
#include "grpolab/rng.hpp"

namespace grpolab {

namespace fs = std::filesystem;
using nlohmann::json;

RunPaths::RunPaths(const std::string& out_dir)
    : root(out_dir),
      outputs(out_dir + "/outputs"),
      logs(out_dir + "/logs"),
      tasks_train(outputs + "/tasks_train.jsonl"),
      tasks_eval(outputs + "/tasks_eval.jsonl"),
      cot(outputs + "/cot.jsonl"),
      synth_stats(outputs + "/synth_stats.json"),
      policy_sft(outputs + "/policy_sft.ckpt"),
      sft_metrics(outputs + "/sft_metrics.jsonl"),
      policy_rl(outputs + "/policy_rl.ckpt"),
      rl_metrics(outputs + "/rl_metrics.jsonl"),
      analysis(outputs + "/analysis.json") {}

std::string RunPaths::eval_report(const std::string& target) const {
    return outputs + "/eval_" + target + ".json";
}

std::string RunPaths::manifest(const std::string& stage) const {
    return root + "/manifest_" + stage + ".json";
}

namespace {

uint64_t file_hash(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DependencyError("missing file: " + path);
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[4096];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        const std::streamsize n = is.gcount();
        for (std::streamsize i = 0; i < n; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ull;
        }
        if (!is) break;
    }
    return h;
}

std::string hex64(uint64_t x) {
    std::ostringstream os;
    os << "0x" << std::hex << x;
    return os.str();
}

void write_manifest(const RunConfig& cfg, const RunPaths& paths, const std::string& stage,
                    const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs) {
    json m;
    m["stage"] = stage;
    m["config_hash"] = hex64(config_hash(cfg));
    m["seed"] = cfg.seed;
    m["versions"] = {{"grpolab", kToolVersion}, {"taskset", 1},   {"cot", 1},
                     {"checkpoint", 1},         {"eval_report", 1}};
    json in = json::object();
    for (const auto& p : inputs) in[fs::path(p).filename().string()] = hex64(file_hash(p));
    m["inputs"] = in;
    json out = json::object();
    for (const auto& p : outputs) out[fs::path(p).filename().string()] = hex64(file_hash(p));
    m["outputs"] = out;
    std::ofstream os(paths.manifest(stage), std::ios::trunc);
    if (!os) throw FormatError("manifest: cannot write " + paths.manifest(stage));
    os << m.dump(2) << "\n";
}

void require_file(const std::string& path, const std::string& why) {
    if (!fs::exists(path)) {
        throw DependencyError("missing " + path + " (" + why + ")");
    }
}

TaskSet load_train(const RunPaths& paths) {
    require_file(paths.tasks_train, "run the synth stage first");
    return load_taskset(paths.tasks_train);
}

TaskSet load_eval(const RunPaths& paths) {
    require_file(paths.tasks_eval, "run the synth stage first");
    return load_taskset(paths.tasks_eval);
}

PolicyConfig arch_from(const RunConfig& cfg, const Vocab& vocab) {
    PolicyConfig pc;
    pc.vocab_size = vocab.size();
    pc.context_len = cfg.policy.context_len;
    pc.width = cfg.policy.width;
    pc.layers = cfg.policy.layers;
    pc.heads = cfg.policy.heads;
    pc.init_std = cfg.policy.init_std;
    pc.seed = derive_seed(cfg.seed, "policy-init");
    pc.vocab_hash = vocab.hash();
    return pc;
}

// Filler sentences for the warmup corpus; generic text over the task
// alphabet, uncorrelated with any ground truth.
std::string warmup_response(Rng& rng, double boxed_fraction) {
    static const char* kFillers[] = {
        "Looking at the image.",
        "Reading the cells row by row.",
        "The grid is small.",
        "Consider each cell in turn.",
        "The bars vary in height.",
        "Numbers and shapes fill the image.",
    };
    std::string out = kFillers[rng.uniform_int(0, 5)];
    if (rng.bernoulli(boxed_fraction)) {
        out += " The answer is \\boxed{" + std::to_string(rng.uniform_int(0, 9)) + "}.";
    }
    return out;
}

// Metrics serializers: the outputs/ copy omits wall times so reruns are
// byte-identical; the logs/ copy keeps them.
void write_sft_metrics(const std::vector<EpochMetrics>& metrics, const std::string& path,
                       bool with_wall_time) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw FormatError("metrics: cannot write " + path);
    for (const auto& em : metrics) {
        json j;
        j["epoch"] = em.epoch;
        j["mean_loss"] = em.mean_loss;
        j["eval_accuracy"] = em.eval_accuracy;
        j["skipped"] = em.skipped;
        if (with_wall_time) j["wall_time"] = em.wall_time_s;
        os << j.dump() << "\n";
    }
}

void write_rl_metrics(const std::vector<RlIterMetrics>& metrics, const std::string& path,
                      bool with_wall_time) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw FormatError("metrics: cannot write " + path);
    for (const auto& im : metrics) {
        json j;
        j["iter"] = im.iter;
        j["mean_reward"] = im.mean_reward;
        j["eval_accuracy"] = im.eval_accuracy;
        j["clip_fraction"] = im.clip_fraction;
        j["mean_kl"] = im.mean_kl;
        if (with_wall_time) j["wall_time"] = im.wall_time_s;
        os << j.dump() << "\n";
    }
}

void stage_synth(const RunConfig& cfg, const RunPaths& paths) {
    const TaskSet train = generate_taskset(cfg.tasks.mix(), cfg.tasks.train_count,
                                           derive_seed(cfg.seed, "tasks-train"),
                                           cfg.tasks.difficulty_lo, cfg.tasks.difficulty_hi,
                                           "train");
    const TaskSet eval_set = generate_taskset(cfg.tasks.mix(), cfg.tasks.eval_count,
                                              derive_seed(cfg.seed, "tasks-eval"),
                                              cfg.tasks.difficulty_lo, cfg.tasks.difficulty_hi,
                                              "eval");
    save_taskset(train, paths.tasks_train);
    save_taskset(eval_set, paths.tasks_eval);

    const Vocab vocab = Vocab::text_ascii();
    auto teacher = make_teacher(cfg.teacher, nullptr, vocab);
    SynthOptions opts;
    opts.max_attempts = cfg.synth.max_attempts;
    opts.budget = cfg.synth.budget;
    opts.keywords = cfg.synth.keywords;
    opts.v2_scope = cfg.synth.v2_scope == "whole" ? KeywordScope::whole_response
                                                  : KeywordScope::pre_answer;
    const SynthResult res =
        synthesize_dataset(*teacher, train, pattern_from_name(cfg.synth.pattern),
                           correctness_from_name(cfg.synth.quality), opts,
                           derive_seed(cfg.seed, "synth"));
    save_cot_records(res.records, paths.cot);

    json stats;
    stats["pattern"] = res.stats.pattern;
    stats["quality"] = res.stats.quality;
    stats["tasks_tried"] = res.stats.tasks_tried;
    stats["records"] = res.stats.records;
    stats["exhausted"] = res.stats.exhausted;
    stats["attempts_total"] = res.stats.attempts_total;
    stats["acceptance_rate"] = res.stats.acceptance_rate;
    stats["mean_attempts"] = res.stats.mean_attempts;
    std::ofstream os(paths.synth_stats, std::ios::trunc);
    os << stats.dump(2) << "\n";

    write_manifest(cfg, paths, "synth", {},
                   {paths.tasks_train, paths.tasks_eval, paths.cot, paths.synth_stats});
}

void stage_sft(const RunConfig& cfg, const RunPaths& paths) {
    const Vocab vocab = Vocab::text_ascii();
    const TaskSet train = load_train(paths);
    const TaskSet eval_set = load_eval(paths);
    require_file(paths.cot, "run the synth stage first");
    const auto records = load_cot_records(paths.cot);

    Policy policy = make_base_policy(cfg, vocab);
    SftConfig sft_cfg = cfg.sft;
    sft_cfg.shuffle_seed = derive_seed(cfg.seed, "sft-shuffle");
    sft_cfg.threads = cfg.threads;
    SftOutcome out = run_sft(std::move(policy), records, train, &eval_set, vocab, sft_cfg);

    out.policy.save(paths.policy_sft);
    write_sft_metrics(out.metrics, paths.sft_metrics, false);
    write_sft_metrics(out.metrics, paths.logs + "/sft_log.jsonl", true);
    write_manifest(cfg, paths, "sft", {paths.tasks_train, paths.tasks_eval, paths.cot},
                   {paths.policy_sft, paths.sft_metrics});
}

void stage_rl(const RunConfig& cfg, const RunPaths& paths) {
    const Vocab vocab = Vocab::text_ascii();
    const TaskSet train = load_train(paths);
    const TaskSet eval_set = load_eval(paths);

    Policy policy = [&]() {
        if (cfg.rl.init == "sft") {
            require_file(paths.policy_sft, "rl.init=sft needs the sft stage checkpoint");
            return Policy::load(paths.policy_sft);
        }
        if (cfg.rl.init == "base") return make_base_policy(cfg, vocab);
        require_file(cfg.rl.init, "rl.init checkpoint");
        return Policy::load(cfg.rl.init);
    }();

    GrpoConfig grpo_cfg = cfg.rl.grpo;
    grpo_cfg.threads = cfg.threads;
    const CheckpointSink sink = [&paths](const Policy& p, int iter, bool aborting) {
        p.save(aborting ? paths.outputs + "/policy_rl_abort.ckpt"
                        : paths.outputs + "/policy_rl_iter" + std::to_string(iter) + ".ckpt");
    };
    RlOutcome out = run_rl(std::move(policy), train, &eval_set, vocab, grpo_cfg,
                           derive_seed(cfg.seed, "rl"), sink);

    out.policy.save(paths.policy_rl);
    write_rl_metrics(out.metrics, paths.rl_metrics, false);
    write_rl_metrics(out.metrics, paths.logs + "/rl_log.jsonl", true);
    write_manifest(cfg, paths, "rl",
                   {paths.tasks_train, paths.tasks_eval},
                   {paths.policy_rl, paths.rl_metrics});
}

struct ResolvedTarget {
    std::string name;
    Policy policy;
};

ResolvedTarget resolve_eval_target(const RunConfig& cfg, const RunPaths& paths,
                                   const Vocab& vocab) {
    const std::string& t = cfg.eval.target;
    if (t == "rl" || (t == "auto" && fs::exists(paths.policy_rl))) {
        require_file(paths.policy_rl, "eval.target=rl needs the rl stage checkpoint");
        return {"rl", Policy::load(paths.policy_rl)};
    }
    if (t == "sft" || (t == "auto" && fs::exists(paths.policy_sft))) {
        require_file(paths.policy_sft, "eval.target=sft needs the sft stage checkpoint");
        return {"sft", Policy::load(paths.policy_sft)};
    }
    if (t == "base" || t == "auto") return {"base", make_base_policy(cfg, vocab)};
    require_file(t, "eval.target checkpoint");
    return {fs::path(t).stem().string(), Policy::load(t)};
}

void stage_eval(const RunConfig& cfg, const RunPaths& paths, bool emit_plot_data) {
    const Vocab vocab = Vocab::text_ascii();
    const TaskSet eval_set = load_eval(paths);
    ResolvedTarget target = resolve_eval_target(cfg, paths, vocab);

    EvalOptions opts;
    opts.samples_per_task = cfg.eval.samples_per_task;
    opts.temperature = cfg.eval.temperature;
    opts.max_response_len = cfg.eval.max_response_len;
    opts.threads = cfg.threads;
    EvalReport report = run_benchmark(target.policy, eval_set, vocab, opts,
                                      derive_seed(cfg.seed, "eval"));
    report.tag = target.name;
    const std::string path = paths.eval_report(target.name);
    save_report(report, path);
    if (emit_plot_data) {
        std::ofstream os(paths.outputs + "/eval_" + target.name + ".csv", std::ios::trunc);
        os << "family,pass1\n";
        for (const auto& [fam, acc] : report.family_pass1) os << fam << "," << acc << "\n";
        os << "overall," << report.overall_pass1 << "\n";
    }
    write_manifest(cfg, paths, "eval", {paths.tasks_eval}, {path});
}

void stage_analyze(const RunConfig& cfg, const RunPaths& paths, bool emit_plot_data) {
    const Vocab vocab = Vocab::text_ascii();

    // Aha analysis over every eval report present.
    std::vector<std::string> report_paths;
    for (const auto& entry : fs::directory_iterator(paths.outputs)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("eval_", 0) == 0 && entry.path().extension() == ".json") {
            report_paths.push_back(entry.path().string());
        }
    }
    std::sort(report_paths.begin(), report_paths.end());
    if (report_paths.empty()) {
        throw DependencyError("analyze needs at least one eval report in " + paths.outputs);
    }
    std::vector<AhaRecord> corpus;
    for (const auto& rp : report_paths) {
        const EvalReport rep = load_report(rp);
        for (const auto& rec : rep.records) {
            for (size_t s = 0; s < rec.responses.size(); ++s) {
                AhaRecord ar;
                ar.query_id = rec.task_id;
                ar.response = rec.responses[s];
                ar.reward = rec.rewards[s];
                ar.model_tag = rep.tag;
                corpus.push_back(std::move(ar));
            }
        }
    }
    const AhaReport aha = aha_report(corpus, cfg.analyze.keywords);

    json doc;
    doc["kind"] = "analysis";
    doc["version"] = 1;
    json aha_json = json::array();
    for (const auto& row : aha.rows) {
        json r;
        r["model"] = row.model_tag;
        r["total"] = row.total;
        r["with_aha"] = row.with_aha;
        r["frequency_pct"] = row.frequency_pct;
        if (row.acc_with_pct) r["acc_with_pct"] = *row.acc_with_pct;
        if (row.acc_without_pct) r["acc_without_pct"] = *row.acc_without_pct;
        aha_json.push_back(r);
    }
    doc["aha"] = aha_json;
    doc["keywords"] = aha.keywords;

    std::vector<std::string> inputs = report_paths;
    if (cfg.analyze.erank) {
        const std::string after_path =
            fs::exists(paths.policy_rl) ? paths.policy_rl
                                        : (fs::exists(paths.policy_sft) ? paths.policy_sft : "");
        if (!after_path.empty()) {
            const TaskSet probe = load_eval(paths);
            const Policy after = Policy::load(after_path);
            const Policy before = make_base_policy(cfg, vocab);
            const int layer =
                cfg.analyze.probe_layer >= 0 ? cfg.analyze.probe_layer : after.cfg.layers;
            const auto rows =
                delta_erank(after, before, probe, vocab, layer, cfg.analyze.erank_max_response_len);
            json erank_json = json::array();
            for (const auto& r : rows) {
                json e;
                e["dataset"] = r.dataset;
                e["erank_before"] = r.erank_before;
                e["erank_after"] = r.erank_after;
                e["delta"] = r.delta;
                erank_json.push_back(e);
            }
            doc["erank"] = erank_json;
            doc["erank_after_checkpoint"] = fs::path(after_path).filename().string();
            inputs.push_back(after_path);
        }
    }

    std::ofstream os(paths.analysis, std::ios::trunc);
    os << doc.dump(2) << "\n";
    std::vector<std::string> outputs = {paths.analysis};
    if (emit_plot_data) {
        AhaReport csv_rep = aha;
        save_aha_csv(csv_rep, paths.outputs + "/aha.csv");
        outputs.push_back(paths.outputs + "/aha.csv");
        if (doc.contains("erank")) {
            std::ofstream es(paths.outputs + "/erank.csv", std::ios::trunc);
            es << "dataset,erank_before,erank_after,delta\n";
            for (const auto& r : doc["erank"]) {
                es << r["dataset"].get<std::string>() << "," << r["erank_before"] << ","
                   << r["erank_after"] << "," << r["delta"] << "\n";
            }
            outputs.push_back(paths.outputs + "/erank.csv");
        }
    }
    write_manifest(cfg, paths, "analyze", inputs, outputs);
}

} // namespace

Policy make_base_policy(const RunConfig& cfg, const Vocab& vocab) {
    Policy policy = Policy::init(arch_from(cfg, vocab));
    const WarmupSpec& w = cfg.policy.warmup;
    if (!w.enabled) return policy;

    const TaskSet warm_tasks =
        generate_taskset(cfg.tasks.mix(), w.tasks, derive_seed(cfg.seed, "warmup-tasks"),
                         cfg.tasks.difficulty_lo, cfg.tasks.difficulty_hi, "warmup");
    std::vector<CotRecord> corpus;
    corpus.reserve(warm_tasks.tasks.size());
    for (size_t i = 0; i < warm_tasks.tasks.size(); ++i) {
        Rng rng(derive_seed(derive_seed(cfg.seed, "warmup-text"), static_cast<uint64_t>(i)));
        CotRecord rec;
        rec.task_id = warm_tasks.tasks[i].id;
        rec.pattern = CotPattern::distilled;
        rec.correctness = Correctness::unjudged;
        rec.response = warmup_response(rng, w.boxed_fraction);
        corpus.push_back(std::move(rec));
    }
    SftConfig warm_cfg;
    warm_cfg.epochs = w.epochs;
    warm_cfg.lr = w.lr;
    warm_cfg.batch_size = w.batch_size;
    warm_cfg.shuffle_seed = derive_seed(cfg.seed, "warmup-shuffle");
    warm_cfg.mask_prompt = false; // plain language modeling over the whole sequence
    warm_cfg.threads = cfg.threads;
    SftOutcome out = run_sft(std::move(policy), corpus, warm_tasks, nullptr, vocab, warm_cfg);
    return std::move(out.policy);
}

std::unique_ptr<Teacher> make_teacher(const TeacherSpec& spec, const Policy* self_policy,
                                      const Vocab& vocab) {
    if (spec.kind == "scripted") {
        return std::make_unique<ScriptedTeacher>(spec.p_err, spec.reflect_rate);
    }
    if (spec.kind == "api") {
        ApiTeacherConfig api;
        api.endpoint = spec.endpoint;
        api.auth_env = spec.auth_env;
        api.timeout_ms = spec.timeout_ms;
        api.retries = spec.retries;
        return std::make_unique<ApiTeacher>(api);
    }
    if (spec.kind == "self" && self_policy != nullptr) {
        SampleOptions opt;
        opt.max_len = 48;
        return std::make_unique<SelfTeacher>(*self_policy, vocab, opt);
    }
    throw ConfigError("unknown teacher kind: " + spec.kind);
}

void run_stage(const RunConfig& cfg, const std::string& stage, bool emit_plot_data) {
    const RunPaths paths(cfg.out_dir);
    fs::create_directories(paths.outputs);
    fs::create_directories(paths.logs);
    if (stage == "synth") return stage_synth(cfg, paths);
    if (stage == "sft") return stage_sft(cfg, paths);
    if (stage == "rl") return stage_rl(cfg, paths);
    if (stage == "eval") return stage_eval(cfg, paths, emit_plot_data);
    if (stage == "analyze") return stage_analyze(cfg, paths, emit_plot_data);
    throw ConfigError("unknown stage: " + stage);
}

void run_ablate(const RunConfig& cfg, bool emit_plot_data) {
    if (!cfg.ablate.is_object() || !cfg.ablate.contains("arms")) {
        throw ConfigError("ablate: config needs an 'ablate.arms' array");
    }
    const auto& arms = cfg.ablate.at("arms");
    if (!arms.is_array() || arms.empty()) throw ConfigError("ablate: 'arms' must be non-empty");
    const int max_parallel = cfg.ablate.value("max_parallel", 1);

    struct Child {
        std::string name;
        RunConfig cfg;
    };
    std::vector<Child> children;
    for (const auto& arm : arms) {
        const std::string name = arm.at("name").get<std::string>();
        json doc = cfg.raw;
        doc.erase("ablate");
        if (arm.contains("overrides")) doc.merge_patch(arm.at("overrides"));
        doc["out_dir"] = cfg.out_dir + "/ablate/" + name;
        children.push_back({name, parse_run_config(doc)});
    }

    parallel_for(static_cast<int>(children.size()), max_parallel, [&](int i) {
        const Child& child = children[static_cast<size_t>(i)];
        for (const auto& stage : child.cfg.stages) {
            run_stage(child.cfg, stage, emit_plot_data);
        }
    });

    // Collect one eval report per child for the comparison table.
    std::vector<EvalReport> reports;
    for (const auto& child : children) {
        const RunPaths child_paths(child.cfg.out_dir);
        for (const auto& entry : fs::directory_iterator(child_paths.outputs)) {
            const std::string name = entry.path().filename().string();
            if (name.rfind("eval_", 0) == 0 && entry.path().extension() == ".json") {
                EvalReport rep = load_report(entry.path().string());
                rep.tag = child.name;
                reports.push_back(std::move(rep));
            }
        }
    }
    if (reports.empty()) {
        throw DependencyError("ablate: no child produced an eval report; include 'eval' in stages");
    }
    const DeltaTable table = compare_runs(reports);

    const RunPaths paths(cfg.out_dir);
    fs::create_directories(paths.outputs);
    json summary;
    summary["kind"] = "ablate_summary";
    json stats = json::array();
    for (const auto& st : table.stats) {
        json s;
        s["tag"] = st.tag;
        s["runs"] = st.runs;
        s["overall_mean"] = st.overall_mean;
        s["overall_min"] = st.overall_min;
        s["overall_max"] = st.overall_max;
        s["family_mean"] = st.family_mean;
        stats.push_back(s);
    }
    summary["stats"] = stats;
    json rows = json::array();
    for (const auto& row : table.rows) {
        json r;
        r["from"] = row.tag_from;
        r["to"] = row.tag_to;
        r["overall_delta"] = row.overall_delta;
        rows.push_back(r);
    }
    summary["deltas"] = rows;
    std::ofstream os(paths.outputs + "/ablate_summary.json", std::ios::trunc);
    os << summary.dump(2) << "\n";
    if (emit_plot_data) {
        save_delta_csv(table, paths.outputs + "/ablate_deltas.csv");
    }
}

} // namespace grpolab
