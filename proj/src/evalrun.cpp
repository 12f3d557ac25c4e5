// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#include "grpolab/evalrun.hpp"

#include <algorithm>
#include <array>
#include <fstream>

#include <json.hpp>

#include "grpolab/errors.hpp"
#include "grpolab/parallel.hpp"
#include "grpolab/rng.hpp"

namespace grpolab {

using nlohmann::json;

namespace {

void fill_tables(EvalReport& rep) {
    // family -> (hits@1, hits@k, total)
    std::map<std::string, std::array<int, 3>> per_family;
    const int k_big = rep.samples_per_task >= 16 ? 16 : 0;
    for (const auto& rec : rep.records) {
        auto& slot = per_family[rec.family];
        slot[2] += 1;
        if (!rec.rewards.empty() && rec.rewards[0] == 1) slot[0] += 1;
        if (k_big > 0) {
            const int upto = std::min<int>(k_big, static_cast<int>(rec.rewards.size()));
            for (int s = 0; s < upto; ++s) {
                if (rec.rewards[static_cast<size_t>(s)] == 1) {
                    slot[1] += 1;
                    break;
                }
            }
        }
    }
    rep.family_pass1.clear();
    rep.passk_overall.clear();
    rep.passk_family.clear();
    double sum1 = 0.0, sumk = 0.0;
    for (const auto& [fam, slot] : per_family) {
        const double p1 = 100.0 * slot[0] / slot[2];
        rep.family_pass1[fam] = p1;
        rep.passk_family[1][fam] = p1;
        sum1 += p1;
        if (k_big > 0) {
            const double pk = 100.0 * slot[1] / slot[2];
            rep.passk_family[k_big][fam] = pk;
            sumk += pk;
        }
    }
    const double nfam = static_cast<double>(per_family.size());
    rep.overall_pass1 = per_family.empty() ? 0.0 : sum1 / nfam;
    rep.passk_overall[1] = rep.overall_pass1;
    if (k_big > 0) rep.passk_overall[k_big] = per_family.empty() ? 0.0 : sumk / nfam;
    rep.task_count = static_cast<int>(rep.records.size());
}

} // namespace

EvalReport run_benchmark(const Policy& policy, const TaskSet& taskset, const Vocab& vocab,
                         const EvalOptions& opts, uint64_t seed) {
    if (opts.samples_per_task < 1) throw ConfigError("eval: samples_per_task must be >= 1");
    EvalReport rep;
    rep.taskset_hash = taskset_hash(taskset);
    rep.seed = seed;
    rep.samples_per_task = opts.samples_per_task;
    rep.temperature = opts.temperature;
    rep.records.resize(taskset.tasks.size());

    const int n = static_cast<int>(taskset.tasks.size());
    parallel_for(n, opts.threads, [&](int i) {
        const Task& task = taskset.tasks[static_cast<size_t>(i)];
        TaskEvalRecord rec;
        rec.task_id = task.id;
        rec.family = family_name(task.family);
        const auto ctx = render_context(task, vocab, policy.cfg.context_len - 1);
        for (int s = 0; s < opts.samples_per_task; ++s) {
            SampleOptions sopt;
            sopt.max_len = opts.max_response_len;
            sopt.eos_id = vocab.eos();
            if (s == 0) {
                sopt.greedy = true;
            } else {
                sopt.temperature = opts.temperature;
            }
            Rng rng(derive_seed(derive_seed(seed, static_cast<uint64_t>(i)),
                                static_cast<uint64_t>(s)));
            const SampleResult sr = policy.sample(ctx, sopt, rng);
            const std::string text = vocab.decode(sr.tokens);
            const auto boxed = extract_boxed(text);
            rec.responses.push_back(text);
            rec.extracted.push_back(boxed);
            rec.rewards.push_back(verify_answer(task, boxed));
        }
        rep.records[static_cast<size_t>(i)] = std::move(rec);
    });

    fill_tables(rep);
    return rep;
}

double pass1_accuracy(const Policy& policy, const TaskSet& taskset, const Vocab& vocab,
                      int max_response_len) {
    EvalOptions opts;
    opts.samples_per_task = 1;
    opts.max_response_len = max_response_len;
    return run_benchmark(policy, taskset, vocab, opts, 0).overall_pass1;
}

EvalReport rescore(const EvalReport& report) {
    EvalReport out = report;
    for (auto& rec : out.records) {
        for (size_t s = 0; s < rec.responses.size(); ++s) {
            rec.extracted[s] = extract_boxed(rec.responses[s]);
        }
    }
    fill_tables(out);
    return out;
}

DeltaTable compare_runs(std::span<const EvalReport> reports) {
    if (reports.empty()) throw ConfigError("compare_runs: no reports");
    for (const auto& r : reports) {
        if (r.taskset_hash != reports.front().taskset_hash) {
            throw DependencyError("compare_runs: taskset hash mismatch between " +
                                  reports.front().tag + " and " + r.tag);
        }
    }
    std::map<std::string, std::vector<const EvalReport*>> by_tag;
    std::vector<std::string> tag_order;
    for (const auto& r : reports) {
        if (!by_tag.count(r.tag)) tag_order.push_back(r.tag);
        by_tag[r.tag].push_back(&r);
    }
    DeltaTable table;
    for (const auto& tag : tag_order) {
        const auto& runs = by_tag[tag];
        TagStats st;
        st.tag = tag;
        st.runs = static_cast<int>(runs.size());
        st.overall_min = runs.front()->overall_pass1;
        st.overall_max = runs.front()->overall_pass1;
        std::map<std::string, double> fam_sum;
        for (const auto* r : runs) {
            st.overall_mean += r->overall_pass1;
            st.overall_min = std::min(st.overall_min, r->overall_pass1);
            st.overall_max = std::max(st.overall_max, r->overall_pass1);
            for (const auto& [fam, acc] : r->family_pass1) fam_sum[fam] += acc;
        }
        st.overall_mean /= st.runs;
        for (const auto& [fam, sum] : fam_sum) st.family_mean[fam] = sum / st.runs;
        table.stats.push_back(std::move(st));
    }
    for (const auto& a : table.stats) {
        for (const auto& b : table.stats) {
            if (a.tag == b.tag) continue;
            DeltaRow row;
            row.tag_from = a.tag;
            row.tag_to = b.tag;
            row.overall_delta = b.overall_mean - a.overall_mean;
            for (const auto& [fam, acc] : b.family_mean) {
                const auto it = a.family_mean.find(fam);
                if (it != a.family_mean.end()) row.family_delta[fam] = acc - it->second;
            }
            table.rows.push_back(std::move(row));
        }
    }
    return table;
}

namespace {

json record_to_json(const TaskEvalRecord& rec) {
    json j;
    j["task_id"] = rec.task_id;
    j["family"] = rec.family;
    j["responses"] = rec.responses;
    json ext = json::array();
    for (const auto& e : rec.extracted) {
        if (e) ext.push_back(*e);
        else ext.push_back(nullptr);
    }
    j["extracted"] = ext;
    j["rewards"] = rec.rewards;
    return j;
}

TaskEvalRecord record_from_json(const json& j) {
    TaskEvalRecord rec;
    rec.task_id = j.at("task_id").get<std::string>();
    rec.family = j.at("family").get<std::string>();
    rec.responses = j.at("responses").get<std::vector<std::string>>();
    for (const auto& e : j.at("extracted")) {
        if (e.is_null()) rec.extracted.push_back(std::nullopt);
        else rec.extracted.push_back(e.get<std::string>());
    }
    rec.rewards = j.at("rewards").get<std::vector<int>>();
    return rec;
}

} // namespace

void save_report(const EvalReport& report, const std::string& path) {
    json j;
    j["kind"] = "eval_report";
    j["version"] = 1;
    j["tag"] = report.tag;
    j["taskset_hash"] = report.taskset_hash;
    j["seed"] = report.seed;
    j["task_count"] = report.task_count;
    j["samples_per_task"] = report.samples_per_task;
    j["temperature"] = report.temperature;
    j["family_pass1"] = report.family_pass1;
    j["overall_pass1"] = report.overall_pass1;
    json pk;
    for (const auto& [k, v] : report.passk_overall) pk[std::to_string(k)] = v;
    j["passk_overall"] = pk;
    json pkf;
    for (const auto& [k, fam] : report.passk_family) pkf[std::to_string(k)] = fam;
    j["passk_family"] = pkf;
    json recs = json::array();
    for (const auto& rec : report.records) recs.push_back(record_to_json(rec));
    j["records"] = recs;
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw FormatError("report: cannot open " + path + " for writing");
    os << j.dump(2) << "\n";
    if (!os) throw FormatError("report: write failed for " + path);
}

EvalReport load_report(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("report: cannot open " + path);
    EvalReport rep;
    try {
        json j;
        is >> j;
        if (j.at("kind") != "eval_report") throw FormatError("report: bad kind in " + path);
        rep.tag = j.at("tag").get<std::string>();
        rep.taskset_hash = j.at("taskset_hash").get<uint64_t>();
        rep.seed = j.at("seed").get<uint64_t>();
        rep.task_count = j.at("task_count").get<int>();
        rep.samples_per_task = j.at("samples_per_task").get<int>();
        rep.temperature = j.at("temperature").get<double>();
        rep.family_pass1 = j.at("family_pass1").get<std::map<std::string, double>>();
        rep.overall_pass1 = j.at("overall_pass1").get<double>();
        for (const auto& [k, v] : j.at("passk_overall").items()) {
            rep.passk_overall[std::stoi(k)] = v.get<double>();
        }
        for (const auto& [k, v] : j.at("passk_family").items()) {
            rep.passk_family[std::stoi(k)] = v.get<std::map<std::string, double>>();
        }
        for (const auto& r : j.at("records")) rep.records.push_back(record_from_json(r));
    } catch (const json::exception& e) {
        throw FormatError("report: parse error in " + path + ": " + e.what());
    }
    return rep;
}

void save_delta_csv(const DeltaTable& table, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw FormatError("delta csv: cannot open " + path + " for writing");
    os << "tag,runs,overall_mean,overall_min,overall_max\n";
    for (const auto& st : table.stats) {
        os << st.tag << "," << st.runs << "," << st.overall_mean << "," << st.overall_min
           << "," << st.overall_max << "\n";
    }
    os << "\nfrom,to,overall_delta\n";
    for (const auto& row : table.rows) {
        os << row.tag_from << "," << row.tag_to << "," << row.overall_delta << "\n";
    }
    if (!os) throw FormatError("delta csv: write failed for " + path);
}

} // namespace grpolab
