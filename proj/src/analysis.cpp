// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#include "grpolab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <json.hpp>

#include "grpolab/errors.hpp"
#include "grpolab/textmatch.hpp"

namespace grpolab {

using nlohmann::json;

AhaDetection detect_aha(std::string_view response, std::span<const std::string> keywords) {
    if (keywords.empty()) throw ConfigError("detect_aha: empty keyword set");
    AhaDetection det;
    det.matched = match_keywords(response, keywords);
    det.has_aha = !det.matched.empty();
    return det;
}

AhaReport aha_report(std::span<const AhaRecord> records,
                     std::span<const std::string> keywords) {
    if (records.empty()) throw DataError("aha_report: empty corpus");
    AhaReport rep;
    rep.keywords.assign(keywords.begin(), keywords.end());

    std::map<std::string, AhaModelRow> by_tag;
    for (const auto& rec : records) {
        AhaModelRow& row = by_tag[rec.model_tag];
        row.model_tag = rec.model_tag;
        row.total += 1;
        const AhaDetection det = detect_aha(rec.response, keywords);
        if (det.has_aha) {
            row.with_aha += 1;
            row.correct_with += rec.reward;
        } else {
            row.correct_without += rec.reward;
        }
    }
    for (auto& [tag, row] : by_tag) {
        row.frequency_pct = 100.0 * row.with_aha / row.total;
        if (row.with_aha > 0) {
            row.acc_with_pct = 100.0 * row.correct_with / row.with_aha;
        }
        const int without = row.total - row.with_aha;
        if (without > 0) {
            row.acc_without_pct = 100.0 * row.correct_without / without;
        }
        rep.rows.push_back(row);
    }
    return rep;
}

double effective_rank(int rows, int cols, std::span<const double> data) {
    if (rows < 1 || cols < 1 || data.size() != static_cast<size_t>(rows) * cols) {
        throw ConfigError("effective_rank: bad matrix shape");
    }
    for (double v : data) {
        if (!std::isfinite(v)) throw NumericError("effective_rank: non-finite entry");
    }
    Eigen::MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) m(r, c) = data[static_cast<size_t>(r) * cols + c];
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    const Eigen::VectorXd sigma = svd.singularValues();
    const double total = sigma.sum();
    if (!(total > 0.0)) throw NumericError("effective_rank: all-zero matrix");
    double entropy = 0.0;
    for (Eigen::Index i = 0; i < sigma.size(); ++i) {
        const double p = sigma[i] / total;
        if (p > 0.0) entropy -= p * std::log(p);
    }
    return std::exp(entropy);
}

namespace {

// Stack response-token hidden rows over the probe subset, mean-center the
// rows, and take the effective rank.
double pooled_erank(const Policy& policy, std::span<const Task* const> tasks,
                    const Vocab& vocab, int layer, int max_response_len) {
    const int W = policy.cfg.width;
    std::vector<double> rows;
    int nrows = 0;
    for (const Task* task : tasks) {
        const auto ctx = render_context(*task, vocab, policy.cfg.context_len - 1);
        SampleOptions opt;
        opt.greedy = true;
        opt.max_len = max_response_len;
        opt.eos_id = vocab.eos();
        Rng rng(0); // unused in greedy mode
        const SampleResult sr = policy.sample(ctx, opt, rng);
        if (sr.tokens.empty()) continue;
        std::vector<int> seq = ctx;
        seq.insert(seq.end(), sr.tokens.begin(), sr.tokens.end());
        const HiddenStates hs = policy.hidden_states(seq, layer);
        for (size_t t = ctx.size(); t < seq.size(); ++t) {
            for (int c = 0; c < W; ++c) rows.push_back(hs.at(static_cast<int>(t), c));
            ++nrows;
        }
    }
    if (nrows == 0) throw DataError("delta_erank: no response tokens collected");
    std::vector<double> mean(static_cast<size_t>(W), 0.0);
    for (int r = 0; r < nrows; ++r) {
        for (int c = 0; c < W; ++c) mean[static_cast<size_t>(c)] += rows[static_cast<size_t>(r) * W + c];
    }
    for (auto& v : mean) v /= nrows;
    for (int r = 0; r < nrows; ++r) {
        for (int c = 0; c < W; ++c) rows[static_cast<size_t>(r) * W + c] -= mean[static_cast<size_t>(c)];
    }
    return effective_rank(nrows, W, rows);
}

} // namespace

std::vector<ErankResult> delta_erank(const Policy& after, const Policy& before,
                                     const TaskSet& probe, const Vocab& vocab, int layer,
                                     int max_response_len) {
    if (!after.cfg.same_shape(before.cfg)) {
        throw ConfigError("delta_erank: policy architecture mismatch");
    }
    std::map<std::string, std::vector<const Task*>> subsets;
    for (const auto& t : probe.tasks) {
        subsets[family_name(t.family)].push_back(&t);
        subsets["all"].push_back(&t);
    }
    std::vector<ErankResult> out;
    for (const auto& [name, tasks] : subsets) {
        ErankResult res;
        res.dataset = name;
        res.erank_before = pooled_erank(before, tasks, vocab, layer, max_response_len);
        res.erank_after = pooled_erank(after, tasks, vocab, layer, max_response_len);
        res.delta = res.erank_after - res.erank_before;
        out.push_back(std::move(res));
    }
    return out;
}

void save_aha_records(std::span<const AhaRecord> records, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw FormatError("aha corpus: cannot open " + path + " for writing");
    for (const auto& rec : records) {
        json j;
        j["query_id"] = rec.query_id;
        j["response"] = rec.response;
        j["reward"] = rec.reward;
        j["model_tag"] = rec.model_tag;
        os << j.dump() << "\n";
    }
    if (!os) throw FormatError("aha corpus: write failed for " + path);
}

std::vector<AhaRecord> load_aha_records(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("aha corpus: cannot open " + path);
    std::vector<AhaRecord> out;
    std::string line;
    try {
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const json j = json::parse(line);
            AhaRecord rec;
            rec.query_id = j.at("query_id").get<std::string>();
            rec.response = j.at("response").get<std::string>();
            rec.reward = j.at("reward").get<int>();
            rec.model_tag = j.at("model_tag").get<std::string>();
            out.push_back(std::move(rec));
        }
    } catch (const json::exception& e) {
        throw FormatError("aha corpus: parse error in " + path + ": " + e.what());
    }
    return out;
}

void save_aha_csv(const AhaReport& report, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw FormatError("aha csv: cannot open " + path + " for writing");
    os << "model,total,with_aha,frequency_pct,acc_with_pct,acc_without_pct\n";
    for (const auto& row : report.rows) {
        os << row.model_tag << "," << row.total << "," << row.with_aha << ","
           << row.frequency_pct << ",";
        if (row.acc_with_pct) os << *row.acc_with_pct;
        os << ",";
        if (row.acc_without_pct) os << *row.acc_without_pct;
        os << "\n";
    }
    if (!os) throw FormatError("aha csv: write failed for " + path);
}

} // namespace grpolab
