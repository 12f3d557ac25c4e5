// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "grpolab/rng.hpp"

namespace grpolab {

// Architecture descriptor. Initialization is a pure function of this struct,
// so (config, seed) fully determines a fresh policy.
struct PolicyConfig {
    int vocab_size = 0;
    int context_len = 128;
    int width = 32;
    int layers = 2;
    int heads = 4;
    double init_std = 0.08;
    uint64_t seed = 0;
    uint64_t vocab_hash = 0;

    int head_dim() const { return width / heads; }
    int mlp_dim() const { return 4 * width; }
    int param_count() const;
    void validate() const;

    bool same_shape(const PolicyConfig& o) const {
        return vocab_size == o.vocab_size && context_len == o.context_len &&
               width == o.width && layers == o.layers && heads == o.heads;
    }
};

struct SampleOptions {
    double temperature = 1.0;
    bool greedy = false; // temperature -> 0 limit; argmax decoding
    int max_len = 64;
    int eos_id = -1; // -1: stop only at max_len / context limit
};

struct SampleResult {
    std::vector<int> tokens;
    std::vector<double> logprobs; // temperature-1 bookkeeping
    double temperature = 1.0;
    bool greedy = false;
};

// Per-position hidden vectors (rows = positions, cols = width).
struct HiddenStates {
    int layer = 0;
    int rows = 0;
    int cols = 0;
    std::vector<double> data; // row-major

    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
};

// One log-probability query against a sequence: the logits at position `pos`
// score `token` as the next symbol, i.e. log P(token | seq[0..pos]).
struct LogpQuery {
    int pos = 0;
    int token = 0;
};

// Maps the queried log-probs to dLoss/dlogp weights. Evaluated once after
// the forward pass so surrogate losses (which need the values) can set
// their own weights.
using WeightFn = std::function<void(std::span<const double> logp, std::span<double> weight)>;

struct EngineResult {
    std::vector<double> logp;
    std::vector<double> grad; // dLoss/dtheta, length = param_count
};

enum class UpdateRule { sgd, adam };

struct OptimConfig {
    UpdateRule rule = UpdateRule::adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct OptimState {
    std::vector<double> m;
    std::vector<double> v;
    int64_t step = 0;
};

// Two-block pre-LN causal self-attention model (configurable depth/width)
// with learned positional embeddings and an exact hand-written backward
// pass. Double precision throughout; forward passes are position-by-position
// against a key/value history, so sampling, scoring and training all share
// one arithmetic path and agree bitwise.
//
// Value semantics: copying a Policy is how pi_old / pi_ref snapshots are
// taken; a copy never aliases the source parameters.
class Policy {
public:
    PolicyConfig cfg;
    std::vector<double> params;

    static Policy init(const PolicyConfig& cfg);

    // All-zero parameters: every context yields uniform logits. Test helper.
    static Policy zeros(const PolicyConfig& cfg);

    // log P(continuation[j] | context, continuation[0..j)) for each j.
    // Entries are <= 0. Throws on out-of-vocab tokens or context overflow.
    std::vector<double> log_probs(std::span<const int> context,
                                  std::span<const int> continuation) const;

    // Autoregressive sampling. Stops at eos_id (included in the output) or
    // after max_len tokens or at the context limit, whichever comes first.
    // Reported logprobs are the temperature-1 values for the chosen tokens.
    SampleResult sample(std::span<const int> context, const SampleOptions& opt, Rng& rng) const;

    // Hidden states after block `layer` (layer 0 = embedding + positional).
    HiddenStates hidden_states(std::span<const int> seq, int layer) const;

    // Forward + backward for losses of the form L = f(logp at queries):
    // computes the queried log-probs, asks `weights` for dL/dlogp, and
    // returns dL/dtheta.
    EngineResult weighted_logprob_grad(std::span<const int> seq,
                                       std::span<const LogpQuery> queries,
                                       const WeightFn& weights) const;

    void save(const std::string& path) const;
    static Policy load(const std::string& path);

private:
    void check_tokens(std::span<const int> seq) const;
};

// In-place first-order update. SGD: theta -= lr * g (exact). Adam: standard
// bias-corrected moments. Throws on shape mismatch.
void apply_update(Policy& policy, std::span<const double> grad, OptimState& state,
                  const OptimConfig& opt);

} // namespace grpolab
