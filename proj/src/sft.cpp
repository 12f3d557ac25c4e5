// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#include "grpolab/sft.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>

#include "grpolab/errors.hpp"
#include "grpolab/evalrun.hpp"
#include "grpolab/parallel.hpp"

namespace grpolab {

void SftConfig::validate() const {
    if (epochs < 0) throw ConfigError("sft: epochs must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("sft: lr must be > 0");
    if (batch_size < 1) throw ConfigError("sft: batch_size must be >= 1");
}

double sft_loss(const Policy& policy, std::span<const int> context,
                std::span<const int> response, std::span<const uint8_t> mask) {
    if (mask.size() != response.size()) throw ConfigError("sft_loss: mask length mismatch");
    int n = 0;
    for (uint8_t m : mask) n += (m != 0);
    if (n == 0) return 0.0;
    const auto logp = policy.log_probs(context, response);
    double sum = 0.0;
    for (size_t i = 0; i < logp.size(); ++i) {
        if (mask[i]) sum += logp[i];
    }
    const double loss = -sum / n;
    if (!std::isfinite(loss)) throw NumericError("sft_loss: non-finite loss");
    return loss;
}

namespace {

struct Example {
    std::string task_id;
    std::vector<int> seq;            // context ++ response
    std::vector<LogpQuery> queries;  // one per trained position
};

// context = BOS + render(task); response = encode(record.response) + EOS.
// With prompt masking off the context tokens are trained too (plain LM).
std::vector<Example> build_examples(std::span<const CotRecord> records,
                                    const TaskSet& train_tasks, const Vocab& vocab,
                                    const Policy& policy, bool mask_prompt, int* skipped) {
    std::map<std::string, const Task*> by_id;
    for (const auto& t : train_tasks.tasks) by_id[t.id] = &t;

    std::vector<Example> out;
    for (const auto& rec : records) {
        const auto it = by_id.find(rec.task_id);
        if (it == by_id.end()) {
            throw DataError("sft: record references unknown task id " + rec.task_id);
        }
        Example ex;
        ex.task_id = rec.task_id;
        ex.seq = render_context(*it->second, vocab, policy.cfg.context_len);
        const int ctx_len = static_cast<int>(ex.seq.size());
        const auto resp = vocab.encode(rec.response);
        ex.seq.insert(ex.seq.end(), resp.begin(), resp.end());
        ex.seq.push_back(vocab.eos());
        if (static_cast<int>(ex.seq.size()) > policy.cfg.context_len) {
            ++*skipped;
            continue;
        }
        const int first = mask_prompt ? ctx_len : 1;
        for (int pos = first; pos < static_cast<int>(ex.seq.size()); ++pos) {
            ex.queries.push_back({pos - 1, ex.seq[static_cast<size_t>(pos)]});
        }
        if (!ex.queries.empty()) out.push_back(std::move(ex));
    }
    return out;
}

} // namespace

SftOutcome run_sft(Policy policy, std::span<const CotRecord> records, const TaskSet& train_tasks,
                   const TaskSet* eval_tasks, const Vocab& vocab, const SftConfig& cfg) {
    cfg.validate();

    // Canonical order before shuffling: permuting the input file must not
    // change anything.
    std::vector<CotRecord> sorted(records.begin(), records.end());
    std::sort(sorted.begin(), sorted.end(), [](const CotRecord& a, const CotRecord& b) {
        if (a.task_id != b.task_id) return a.task_id < b.task_id;
        if (a.pattern != b.pattern) return a.pattern < b.pattern;
        return a.response < b.response;
    });

    int skipped = 0;
    const std::vector<Example> examples =
        build_examples(sorted, train_tasks, vocab, policy, cfg.mask_prompt, &skipped);
    if (examples.empty()) throw DataError("sft: no trainable records (all skipped or empty)");

    SftOutcome out;
    OptimState optim;
    OptimConfig opt;
    opt.rule = cfg.rule;
    opt.lr = cfg.lr;

    const int n = static_cast<int>(examples.size());
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        Rng shuffle_rng(derive_seed(cfg.shuffle_seed, static_cast<uint64_t>(epoch)));
        for (int i = n - 1; i > 0; --i) {
            const int j = shuffle_rng.uniform_int(0, i);
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
        }

        double loss_sum = 0.0;
        for (int start = 0; start < n; start += cfg.batch_size) {
            const int b = std::min(cfg.batch_size, n - start);
            std::vector<std::vector<double>> grads(static_cast<size_t>(b));
            std::vector<double> losses(static_cast<size_t>(b));
            parallel_for(b, cfg.threads, [&](int bi) {
                const Example& ex = examples[static_cast<size_t>(order[static_cast<size_t>(start + bi)])];
                const double weight = -1.0 / (static_cast<double>(b) * ex.queries.size());
                const EngineResult er = policy.weighted_logprob_grad(
                    ex.seq, ex.queries, [&](std::span<const double>, std::span<double> w) {
                        std::fill(w.begin(), w.end(), weight);
                    });
                double ls = 0.0;
                for (double lp : er.logp) ls -= lp;
                ls /= static_cast<double>(ex.queries.size());
                if (!std::isfinite(ls)) {
                    throw NumericError("sft: non-finite loss on task " + ex.task_id);
                }
                losses[static_cast<size_t>(bi)] = ls;
                grads[static_cast<size_t>(bi)] = std::move(er.grad);
            });
            std::vector<double> grad(policy.params.size(), 0.0);
            for (int bi = 0; bi < b; ++bi) {
                const auto& gb = grads[static_cast<size_t>(bi)];
                for (size_t k = 0; k < grad.size(); ++k) grad[k] += gb[k];
                loss_sum += losses[static_cast<size_t>(bi)];
            }
            apply_update(policy, grad, optim, opt);
        }

        EpochMetrics em;
        em.epoch = epoch + 1;
        em.mean_loss = loss_sum / n;
        em.skipped = skipped;
        if (eval_tasks != nullptr) {
            em.eval_accuracy = pass1_accuracy(policy, *eval_tasks, vocab, cfg.eval_max_len);
        }
        em.wall_time_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out.metrics.push_back(em);
    }

    out.policy = std::move(policy);
    return out;
}

} // namespace grpolab
