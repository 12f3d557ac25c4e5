// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#include "grpolab/policy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "grpolab/errors.hpp"

namespace grpolab {

namespace {

constexpr double kLnEps = 1e-5;
constexpr uint32_t kCheckpointMagic = 0x42'4c'50'47; // "GPLB"
constexpr uint32_t kCheckpointVersion = 1;

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
}

inline double gelu_prime(double x) {
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

// Offsets of every parameter tensor inside the flat vector.
struct Layout {
    int V, C, W, L, H, M;
    size_t tok_emb, pos_emb;
    struct Block {
        size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o;
        size_t ln2_g, ln2_b, w_up, b_up, w_down, b_down;
    };
    std::vector<Block> blocks;
    size_t lnf_g, lnf_b, w_head, b_head;
    size_t total;

    explicit Layout(const PolicyConfig& c)
        : V(c.vocab_size), C(c.context_len), W(c.width), L(c.layers), H(c.heads), M(c.mlp_dim()) {
        size_t o = 0;
        auto take = [&o](size_t n) { size_t at = o; o += n; return at; };
        tok_emb = take(static_cast<size_t>(V) * W);
        pos_emb = take(static_cast<size_t>(C) * W);
        blocks.resize(static_cast<size_t>(L));
        for (auto& b : blocks) {
            b.ln1_g = take(W);
            b.ln1_b = take(W);
            b.w_qkv = take(static_cast<size_t>(W) * 3 * W);
            b.b_qkv = take(static_cast<size_t>(3) * W);
            b.w_o = take(static_cast<size_t>(W) * W);
            b.b_o = take(W);
            b.ln2_g = take(W);
            b.ln2_b = take(W);
            b.w_up = take(static_cast<size_t>(W) * M);
            b.b_up = take(M);
            b.w_down = take(static_cast<size_t>(M) * W);
            b.b_down = take(W);
        }
        lnf_g = take(W);
        lnf_b = take(W);
        w_head = take(static_cast<size_t>(W) * V);
        b_head = take(V);
        total = o;
    }
};

// y[c] = b[c] + sum_r x[r] * w[r*cols + c]
inline void affine(const double* x, const double* w, const double* b, double* y,
                   int rows, int cols) {
    for (int c = 0; c < cols; ++c) y[c] = b[c];
    for (int r = 0; r < rows; ++r) {
        const double xr = x[r];
        const double* wr = w + static_cast<size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) y[c] += xr * wr[c];
    }
}

inline void layernorm(const double* x, const double* g, const double* b, int n,
                      double* out, double* mean_out, double* rstd_out) {
    double mean = 0.0;
    for (int i = 0; i < n; ++i) mean += x[i];
    mean /= n;
    double var = 0.0;
    for (int i = 0; i < n; ++i) {
        const double d = x[i] - mean;
        var += d * d;
    }
    var /= n;
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    for (int i = 0; i < n; ++i) out[i] = (x[i] - mean) * rstd * g[i] + b[i];
    *mean_out = mean;
    *rstd_out = rstd;
}

// Backward through y = norm(x)*g + b. Accumulates into dgain/dbias and
// writes dLoss/dx into dx_out (overwrite).
inline void layernorm_backward(const double* x, double mean, double rstd, const double* g,
                               const double* dy, int n, double* dx_out, double* dgain,
                               double* dbias) {
    double m1 = 0.0, m2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double norm = (x[i] - mean) * rstd;
        const double dn = dy[i] * g[i];
        dgain[i] += dy[i] * norm;
        dbias[i] += dy[i];
        m1 += dn;
        m2 += dn * norm;
    }
    m1 /= n;
    m2 /= n;
    for (int i = 0; i < n; ++i) {
        const double norm = (x[i] - mean) * rstd;
        const double dn = dy[i] * g[i];
        dx_out[i] = rstd * (dn - m1 - norm * m2);
    }
}

// Full activation record of one forward pass; everything backward needs.
struct Trace {
    int T = 0;
    int L, W, M, H, C;
    std::vector<int> tokens;
    // [L+1][T][W]: xs[0] = embedding out, xs[l+1] = output of block l.
    std::vector<double> xs;
    std::vector<double> a, q, k, v, u, xmid, a2; // [L][T][W]
    std::vector<double> att;                     // [L][H][T][T]
    std::vector<double> hpre, h;                 // [L][T][M]
    std::vector<double> xf;                      // [T][W]
    std::vector<double> mean1, rstd1, mean2, rstd2; // [L][T]
    std::vector<double> meanf, rstdf;               // [T]

    Trace(const Layout& ly, int t_count) : T(t_count), L(ly.L), W(ly.W), M(ly.M), H(ly.H), C(ly.C) {
        const size_t ltw = static_cast<size_t>(L) * T * W;
        xs.assign(static_cast<size_t>(L + 1) * T * W, 0.0);
        a.assign(ltw, 0.0);
        q.assign(ltw, 0.0);
        k.assign(ltw, 0.0);
        v.assign(ltw, 0.0);
        u.assign(ltw, 0.0);
        xmid.assign(ltw, 0.0);
        a2.assign(ltw, 0.0);
        att.assign(static_cast<size_t>(L) * H * T * T, 0.0);
        hpre.assign(static_cast<size_t>(L) * T * M, 0.0);
        h.assign(static_cast<size_t>(L) * T * M, 0.0);
        xf.assign(static_cast<size_t>(T) * W, 0.0);
        mean1.assign(static_cast<size_t>(L) * T, 0.0);
        rstd1.assign(static_cast<size_t>(L) * T, 0.0);
        mean2.assign(static_cast<size_t>(L) * T, 0.0);
        rstd2.assign(static_cast<size_t>(L) * T, 0.0);
        meanf.assign(T, 0.0);
        rstdf.assign(T, 0.0);
    }

    double* xs_row(int l, int t) { return xs.data() + (static_cast<size_t>(l) * T + t) * W; }
    double* row(std::vector<double>& arr, int l, int t, int dim) {
        return arr.data() + (static_cast<size_t>(l) * T + t) * dim;
    }
    double* att_row(int l, int head, int t) {
        return att.data() + ((static_cast<size_t>(l) * H + head) * T + t) * T;
    }
};

// Per-layer key/value history for incremental forward passes.
struct KvCache {
    int filled = 0;
    std::vector<std::vector<double>> k, v; // per layer, [C][W]

    KvCache(int layers, int context_len, int width) {
        k.assign(static_cast<size_t>(layers), std::vector<double>(static_cast<size_t>(context_len) * width, 0.0));
        v.assign(static_cast<size_t>(layers), std::vector<double>(static_cast<size_t>(context_len) * width, 0.0));
    }
};

struct StepScratch {
    std::vector<double> x, xprev, aa, qkv, uu, yy, score;
    std::vector<double> hp, hh;
    std::vector<double> xf;

    StepScratch(int width, int mlp, int context_len)
        : x(width), xprev(width), aa(width), qkv(static_cast<size_t>(3) * width), uu(width),
          yy(width), score(context_len), hp(mlp), hh(mlp), xf(width) {}
};

inline double logsumexp(const double* logits, int n) {
    double mx = logits[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += std::exp(logits[i] - mx);
    return mx + std::log(s);
}

} // namespace

int PolicyConfig::param_count() const {
    return static_cast<int>(Layout(*this).total);
}

void PolicyConfig::validate() const {
    if (vocab_size < 2) throw ConfigError("policy: vocab_size must be >= 2");
    if (context_len < 1) throw ConfigError("policy: context_len must be >= 1");
    if (width < 1 || layers < 1 || heads < 1) throw ConfigError("policy: invalid shape");
    if (width % heads != 0) throw ConfigError("policy: width must be divisible by heads");
    if (!(init_std > 0.0)) throw ConfigError("policy: init_std must be > 0");
}

Policy Policy::init(const PolicyConfig& cfg) {
    cfg.validate();
    const Layout ly(cfg);
    Policy p;
    p.cfg = cfg;
    p.params.assign(ly.total, 0.0);
    Rng rng(cfg.seed);
    auto fill_normal = [&](size_t off, size_t n) {
        for (size_t i = 0; i < n; ++i) p.params[off + i] = rng.normal() * cfg.init_std;
    };
    auto fill_ones = [&](size_t off, size_t n) {
        for (size_t i = 0; i < n; ++i) p.params[off + i] = 1.0;
    };
    fill_normal(ly.tok_emb, static_cast<size_t>(ly.V) * ly.W);
    fill_normal(ly.pos_emb, static_cast<size_t>(ly.C) * ly.W);
    for (const auto& b : ly.blocks) {
        fill_ones(b.ln1_g, ly.W);
        fill_normal(b.w_qkv, static_cast<size_t>(ly.W) * 3 * ly.W);
        fill_normal(b.w_o, static_cast<size_t>(ly.W) * ly.W);
        fill_ones(b.ln2_g, ly.W);
        fill_normal(b.w_up, static_cast<size_t>(ly.W) * ly.M);
        fill_normal(b.w_down, static_cast<size_t>(ly.M) * ly.W);
    }
    fill_ones(ly.lnf_g, ly.W);
    fill_normal(ly.w_head, static_cast<size_t>(ly.W) * ly.V);
    return p;
}

Policy Policy::zeros(const PolicyConfig& cfg) {
    cfg.validate();
    Policy p;
    p.cfg = cfg;
    p.params.assign(Layout(cfg).total, 0.0);
    return p;
}

void Policy::check_tokens(std::span<const int> seq) const {
    for (int id : seq) {
        if (id < 0 || id >= cfg.vocab_size) {
            throw ConfigError("policy: token " + std::to_string(id) + " out of vocabulary");
        }
    }
    if (static_cast<int>(seq.size()) > cfg.context_len) {
        throw ConfigError("policy: sequence of length " + std::to_string(seq.size()) +
                          " overflows context " + std::to_string(cfg.context_len));
    }
}

namespace {

// One position through the whole stack. Appends this position's k/v rows to
// the cache and leaves the final-LN hidden vector in s.xf. All forward
// entry points (scoring, sampling, training, hidden-state export) run this
// exact routine, so their arithmetic agrees bitwise.
void forward_position(const Layout& ly, const double* p, int t,
                      int token, KvCache& kv, StepScratch& s, Trace* tr,
                      int capture_layer, double* capture_out) {
    const int W = ly.W, H = ly.H, M = ly.M;
    const int dh = W / H;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    const double* te = p + ly.tok_emb + static_cast<size_t>(token) * W;
    const double* pe = p + ly.pos_emb + static_cast<size_t>(t) * W;
    for (int d = 0; d < W; ++d) s.x[d] = te[d] + pe[d];
    if (tr) std::memcpy(tr->xs_row(0, t), s.x.data(), sizeof(double) * W);
    if (capture_layer == 0 && capture_out) std::memcpy(capture_out, s.x.data(), sizeof(double) * W);

    for (int l = 0; l < ly.L; ++l) {
        const auto& b = ly.blocks[static_cast<size_t>(l)];
        double mean = 0.0, rstd = 0.0;
        layernorm(s.x.data(), p + b.ln1_g, p + b.ln1_b, W, s.aa.data(), &mean, &rstd);
        if (tr) {
            std::memcpy(tr->row(tr->a, l, t, W), s.aa.data(), sizeof(double) * W);
            tr->mean1[static_cast<size_t>(l) * tr->T + t] = mean;
            tr->rstd1[static_cast<size_t>(l) * tr->T + t] = rstd;
        }
        affine(s.aa.data(), p + b.w_qkv, p + b.b_qkv, s.qkv.data(), W, 3 * W);
        double* krow = kv.k[static_cast<size_t>(l)].data() + static_cast<size_t>(t) * W;
        double* vrow = kv.v[static_cast<size_t>(l)].data() + static_cast<size_t>(t) * W;
        std::memcpy(krow, s.qkv.data() + W, sizeof(double) * W);
        std::memcpy(vrow, s.qkv.data() + 2 * W, sizeof(double) * W);
        if (tr) {
            std::memcpy(tr->row(tr->q, l, t, W), s.qkv.data(), sizeof(double) * W);
            std::memcpy(tr->row(tr->k, l, t, W), krow, sizeof(double) * W);
            std::memcpy(tr->row(tr->v, l, t, W), vrow, sizeof(double) * W);
        }

        const double* kbase = kv.k[static_cast<size_t>(l)].data();
        const double* vbase = kv.v[static_cast<size_t>(l)].data();
        for (int head = 0; head < H; ++head) {
            const int hb = head * dh;
            const double* qh = s.qkv.data() + hb;
            double mx = -std::numeric_limits<double>::infinity();
            for (int pos = 0; pos <= t; ++pos) {
                const double* kp = kbase + static_cast<size_t>(pos) * W + hb;
                double dot = 0.0;
                for (int d = 0; d < dh; ++d) dot += qh[d] * kp[d];
                s.score[static_cast<size_t>(pos)] = dot * inv_sqrt_dh;
                mx = std::max(mx, s.score[static_cast<size_t>(pos)]);
            }
            double denom = 0.0;
            for (int pos = 0; pos <= t; ++pos) {
                s.score[static_cast<size_t>(pos)] = std::exp(s.score[static_cast<size_t>(pos)] - mx);
                denom += s.score[static_cast<size_t>(pos)];
            }
            for (int d = 0; d < dh; ++d) s.uu[hb + d] = 0.0;
            for (int pos = 0; pos <= t; ++pos) {
                const double w = s.score[static_cast<size_t>(pos)] / denom;
                if (tr) tr->att_row(l, head, t)[pos] = w;
                const double* vp = vbase + static_cast<size_t>(pos) * W + hb;
                for (int d = 0; d < dh; ++d) s.uu[hb + d] += w * vp[d];
            }
        }
        if (tr) std::memcpy(tr->row(tr->u, l, t, W), s.uu.data(), sizeof(double) * W);

        affine(s.uu.data(), p + b.w_o, p + b.b_o, s.yy.data(), W, W);
        for (int d = 0; d < W; ++d) s.x[d] += s.yy[d];
        if (tr) std::memcpy(tr->row(tr->xmid, l, t, W), s.x.data(), sizeof(double) * W);

        layernorm(s.x.data(), p + b.ln2_g, p + b.ln2_b, W, s.aa.data(), &mean, &rstd);
        if (tr) {
            std::memcpy(tr->row(tr->a2, l, t, W), s.aa.data(), sizeof(double) * W);
            tr->mean2[static_cast<size_t>(l) * tr->T + t] = mean;
            tr->rstd2[static_cast<size_t>(l) * tr->T + t] = rstd;
        }
        affine(s.aa.data(), p + b.w_up, p + b.b_up, s.hp.data(), W, M);
        for (int j = 0; j < M; ++j) s.hh[j] = gelu(s.hp[j]);
        if (tr) {
            std::memcpy(tr->row(tr->hpre, l, t, M), s.hp.data(), sizeof(double) * M);
            std::memcpy(tr->row(tr->h, l, t, M), s.hh.data(), sizeof(double) * M);
        }
        affine(s.hh.data(), p + b.w_down, p + b.b_down, s.yy.data(), M, W);
        for (int d = 0; d < W; ++d) s.x[d] += s.yy[d];
        if (tr) std::memcpy(tr->xs_row(l + 1, t), s.x.data(), sizeof(double) * W);
        if (capture_layer == l + 1 && capture_out) {
            std::memcpy(capture_out, s.x.data(), sizeof(double) * W);
        }
    }

    double mean = 0.0, rstd = 0.0;
    layernorm(s.x.data(), p + ly.lnf_g, p + ly.lnf_b, W, s.xf.data(), &mean, &rstd);
    if (tr) {
        std::memcpy(tr->xf.data() + static_cast<size_t>(t) * W, s.xf.data(), sizeof(double) * W);
        tr->meanf[static_cast<size_t>(t)] = mean;
        tr->rstdf[static_cast<size_t>(t)] = rstd;
    }
    kv.filled = t + 1;
}

void head_logits(const Layout& ly, const double* p, const double* xf, double* logits) {
    affine(xf, p + ly.w_head, p + ly.b_head, logits, ly.W, ly.V);
}

} // namespace

std::vector<double> Policy::log_probs(std::span<const int> context,
                                      std::span<const int> continuation) const {
    if (continuation.empty()) return {};
    if (context.empty()) throw ConfigError("policy: empty context");
    std::vector<int> seq(context.begin(), context.end());
    seq.insert(seq.end(), continuation.begin(), continuation.end());
    check_tokens(seq);

    const Layout ly(cfg);
    KvCache kv(cfg.layers, cfg.context_len, cfg.width);
    StepScratch s(cfg.width, cfg.mlp_dim(), cfg.context_len);
    std::vector<double> logits(static_cast<size_t>(cfg.vocab_size));
    std::vector<double> out;
    out.reserve(continuation.size());
    const int T = static_cast<int>(seq.size());
    const int c0 = static_cast<int>(context.size());
    // Logits at position t score seq[t+1]; continuation tokens live at
    // positions c0..T-1, so logits from positions c0-1..T-2 are scored.
    for (int t = 0; t < T - 1; ++t) {
        forward_position(ly, params.data(), t, seq[static_cast<size_t>(t)], kv, s, nullptr, -1, nullptr);
        if (t >= c0 - 1) {
            head_logits(ly, params.data(), s.xf.data(), logits.data());
            const double lse = logsumexp(logits.data(), cfg.vocab_size);
            out.push_back(logits[static_cast<size_t>(seq[static_cast<size_t>(t + 1)])] - lse);
        }
    }
    return out;
}

SampleResult Policy::sample(std::span<const int> context, const SampleOptions& opt, Rng& rng) const {
    if (context.empty()) throw ConfigError("policy: empty context");
    if (!opt.greedy && !(opt.temperature > 0.0)) {
        throw ConfigError("policy: temperature must be > 0 (or greedy)");
    }
    if (opt.max_len < 1) throw ConfigError("policy: max_len must be >= 1");
    check_tokens(context);
    if (static_cast<int>(context.size()) >= cfg.context_len) {
        throw ConfigError("policy: context full, cannot sample");
    }

    const Layout ly(cfg);
    KvCache kv(cfg.layers, cfg.context_len, cfg.width);
    StepScratch s(cfg.width, cfg.mlp_dim(), cfg.context_len);
    std::vector<double> logits(static_cast<size_t>(cfg.vocab_size));
    std::vector<double> probs(static_cast<size_t>(cfg.vocab_size));

    SampleResult res;
    res.temperature = opt.greedy ? 0.0 : opt.temperature;
    res.greedy = opt.greedy;

    for (size_t i = 0; i < context.size(); ++i) {
        forward_position(ly, params.data(), static_cast<int>(i), context[i], kv, s, nullptr, -1, nullptr);
    }
    int t = static_cast<int>(context.size()) - 1;
    while (static_cast<int>(res.tokens.size()) < opt.max_len &&
           t + 1 < cfg.context_len) {
        head_logits(ly, params.data(), s.xf.data(), logits.data());
        const double lse = logsumexp(logits.data(), cfg.vocab_size);
        int chosen;
        if (opt.greedy) {
            chosen = 0;
            for (int vtok = 1; vtok < cfg.vocab_size; ++vtok) {
                if (logits[static_cast<size_t>(vtok)] > logits[static_cast<size_t>(chosen)]) chosen = vtok;
            }
        } else {
            double mx = -std::numeric_limits<double>::infinity();
            for (int vtok = 0; vtok < cfg.vocab_size; ++vtok) {
                mx = std::max(mx, logits[static_cast<size_t>(vtok)] / opt.temperature);
            }
            double denom = 0.0;
            for (int vtok = 0; vtok < cfg.vocab_size; ++vtok) {
                probs[static_cast<size_t>(vtok)] = std::exp(logits[static_cast<size_t>(vtok)] / opt.temperature - mx);
                denom += probs[static_cast<size_t>(vtok)];
            }
            const double draw = rng.uniform01() * denom;
            double acc = 0.0;
            chosen = cfg.vocab_size - 1;
            for (int vtok = 0; vtok < cfg.vocab_size; ++vtok) {
                acc += probs[static_cast<size_t>(vtok)];
                if (draw < acc) { chosen = vtok; break; }
            }
        }
        res.tokens.push_back(chosen);
        res.logprobs.push_back(logits[static_cast<size_t>(chosen)] - lse);
        if (chosen == opt.eos_id) break;
        ++t;
        forward_position(ly, params.data(), t, chosen, kv, s, nullptr, -1, nullptr);
    }
    return res;
}

HiddenStates Policy::hidden_states(std::span<const int> seq, int layer) const {
    if (layer < 0 || layer > cfg.layers) {
        throw ConfigError("policy: hidden-state layer " + std::to_string(layer) + " out of range");
    }
    if (seq.empty()) throw ConfigError("policy: empty sequence");
    check_tokens(seq);
    const Layout ly(cfg);
    KvCache kv(cfg.layers, cfg.context_len, cfg.width);
    StepScratch s(cfg.width, cfg.mlp_dim(), cfg.context_len);
    HiddenStates hs;
    hs.layer = layer;
    hs.rows = static_cast<int>(seq.size());
    hs.cols = cfg.width;
    hs.data.assign(static_cast<size_t>(hs.rows) * hs.cols, 0.0);
    for (size_t i = 0; i < seq.size(); ++i) {
        forward_position(ly, params.data(), static_cast<int>(i), seq[i], kv, s, nullptr,
                         layer, hs.data.data() + i * static_cast<size_t>(cfg.width));
    }
    return hs;
}

EngineResult Policy::weighted_logprob_grad(std::span<const int> seq,
                                           std::span<const LogpQuery> queries,
                                           const WeightFn& weights) const {
    const Layout ly(cfg);
    EngineResult res;
    res.grad.assign(ly.total, 0.0);
    if (queries.empty()) return res;
    if (seq.empty()) throw ConfigError("policy: empty sequence");
    check_tokens(seq);
    const int T = static_cast<int>(seq.size());
    for (const auto& qr : queries) {
        if (qr.pos < 0 || qr.pos >= T) throw ConfigError("policy: query position out of range");
        if (qr.token < 0 || qr.token >= cfg.vocab_size) throw ConfigError("policy: query token out of vocabulary");
    }

    // Forward with full trace.
    Trace tr(ly, T);
    tr.tokens.assign(seq.begin(), seq.end());
    KvCache kv(cfg.layers, cfg.context_len, cfg.width);
    StepScratch s(cfg.width, cfg.mlp_dim(), cfg.context_len);
    for (int t = 0; t < T; ++t) {
        forward_position(ly, params.data(), t, seq[static_cast<size_t>(t)], kv, s, &tr, -1, nullptr);
    }

    // Logits and log-probs at the queried positions only.
    const int V = cfg.vocab_size, W = cfg.width;
    std::vector<int> qpos; // unique positions, ascending
    for (const auto& qr : queries) qpos.push_back(qr.pos);
    std::sort(qpos.begin(), qpos.end());
    qpos.erase(std::unique(qpos.begin(), qpos.end()), qpos.end());

    std::vector<double> logits(static_cast<size_t>(qpos.size()) * V);
    std::vector<double> lse(qpos.size());
    for (size_t i = 0; i < qpos.size(); ++i) {
        const double* xf = tr.xf.data() + static_cast<size_t>(qpos[i]) * W;
        head_logits(ly, params.data(), xf, logits.data() + i * static_cast<size_t>(V));
        lse[i] = logsumexp(logits.data() + i * static_cast<size_t>(V), V);
    }
    auto pos_slot = [&qpos](int pos) {
        return static_cast<size_t>(std::lower_bound(qpos.begin(), qpos.end(), pos) - qpos.begin());
    };

    res.logp.resize(queries.size());
    for (size_t qi = 0; qi < queries.size(); ++qi) {
        const size_t slot = pos_slot(queries[qi].pos);
        res.logp[qi] = logits[slot * static_cast<size_t>(V) + queries[qi].token] - lse[slot];
    }

    std::vector<double> w(queries.size(), 0.0);
    weights(res.logp, w);

    // dLoss/dlogits per queried position.
    std::vector<double> dlogits(static_cast<size_t>(qpos.size()) * V, 0.0);
    for (size_t qi = 0; qi < queries.size(); ++qi) {
        if (w[qi] == 0.0) continue;
        const size_t slot = pos_slot(queries[qi].pos);
        double* dl = dlogits.data() + slot * static_cast<size_t>(V);
        const double* l = logits.data() + slot * static_cast<size_t>(V);
        const double wq = w[qi];
        for (int vtok = 0; vtok < V; ++vtok) {
            const double p = std::exp(l[static_cast<size_t>(vtok)] - lse[slot]);
            dl[static_cast<size_t>(vtok)] -= wq * p;
        }
        dl[static_cast<size_t>(queries[qi].token)] += wq;
    }

    double* g = res.grad.data();
    const double* p = params.data();

    // Head backward: dxf rows for queried positions.
    std::vector<double> dx(static_cast<size_t>(T) * W, 0.0); // running d wrt xs[L]
    {
        std::vector<double> dxf(W);
        for (size_t i = 0; i < qpos.size(); ++i) {
            const int t = qpos[i];
            const double* dl = dlogits.data() + i * static_cast<size_t>(V);
            const double* xf = tr.xf.data() + static_cast<size_t>(t) * W;
            std::fill(dxf.begin(), dxf.end(), 0.0);
            for (int r = 0; r < W; ++r) {
                const double* wr = p + ly.w_head + static_cast<size_t>(r) * V;
                double acc = 0.0;
                for (int vtok = 0; vtok < V; ++vtok) acc += dl[static_cast<size_t>(vtok)] * wr[vtok];
                dxf[static_cast<size_t>(r)] = acc;
                double* gw = g + ly.w_head + static_cast<size_t>(r) * V;
                const double xr = xf[r];
                for (int vtok = 0; vtok < V; ++vtok) gw[vtok] += xr * dl[static_cast<size_t>(vtok)];
            }
            for (int vtok = 0; vtok < V; ++vtok) g[ly.b_head + static_cast<size_t>(vtok)] += dl[static_cast<size_t>(vtok)];
            // Final layernorm backward for this row.
            const double* xin = tr.xs_row(cfg.layers, t);
            layernorm_backward(xin, tr.meanf[static_cast<size_t>(t)], tr.rstdf[static_cast<size_t>(t)],
                               p + ly.lnf_g, dxf.data(), W,
                               dx.data() + static_cast<size_t>(t) * W,
                               g + ly.lnf_g, g + ly.lnf_b);
        }
    }

    const int H = cfg.heads, M = cfg.mlp_dim();
    const int dh = W / H;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<double> dxmid(static_cast<size_t>(T) * W);
    std::vector<double> du(static_cast<size_t>(T) * W);
    std::vector<double> dq(static_cast<size_t>(T) * W);
    std::vector<double> dk(static_cast<size_t>(T) * W);
    std::vector<double> dv(static_cast<size_t>(T) * W);
    std::vector<double> drow(std::max(M, W));
    std::vector<double> drow2(std::max(M, W));
    std::vector<double> datt(static_cast<size_t>(T));
    std::vector<double> dscore(static_cast<size_t>(T));

    for (int l = cfg.layers - 1; l >= 0; --l) {
        const auto& b = ly.blocks[static_cast<size_t>(l)];
        // ---- MLP sub-block backward (per position) ----
        for (int t = 0; t < T; ++t) {
            const double* dxt = dx.data() + static_cast<size_t>(t) * W;
            const double* hrow = tr.row(tr.h, l, t, M);
            const double* hprerow = tr.row(tr.hpre, l, t, M);
            const double* a2row = tr.row(tr.a2, l, t, W);
            // dm = dxt; w_down/b_down grads + dh
            for (int j = 0; j < M; ++j) {
                const double* wr = p + b.w_down + static_cast<size_t>(j) * W;
                double acc = 0.0;
                for (int c = 0; c < W; ++c) acc += dxt[c] * wr[c];
                drow[static_cast<size_t>(j)] = acc * gelu_prime(hprerow[j]); // dhpre
                double* gw = g + b.w_down + static_cast<size_t>(j) * W;
                const double hj = hrow[j];
                for (int c = 0; c < W; ++c) gw[c] += hj * dxt[c];
            }
            for (int c = 0; c < W; ++c) g[b.b_down + static_cast<size_t>(c)] += dxt[c];
            // w_up/b_up grads + da2
            for (int r = 0; r < W; ++r) {
                const double* wr = p + b.w_up + static_cast<size_t>(r) * M;
                double acc = 0.0;
                for (int j = 0; j < M; ++j) acc += drow[static_cast<size_t>(j)] * wr[j];
                drow2[static_cast<size_t>(r)] = acc;
                double* gw = g + b.w_up + static_cast<size_t>(r) * M;
                const double ar = a2row[r];
                for (int j = 0; j < M; ++j) gw[j] += ar * drow[static_cast<size_t>(j)];
            }
            for (int j = 0; j < M; ++j) g[b.b_up + static_cast<size_t>(j)] += drow[static_cast<size_t>(j)];
            // LN2 backward; dxmid = dx (residual) + ln2 input grad
            const double* xmidrow = tr.row(tr.xmid, l, t, W);
            double* dxm = dxmid.data() + static_cast<size_t>(t) * W;
            layernorm_backward(xmidrow, tr.mean2[static_cast<size_t>(l) * T + t],
                               tr.rstd2[static_cast<size_t>(l) * T + t], p + b.ln2_g,
                               drow2.data(), W, dxm, g + b.ln2_g, g + b.ln2_b);
            for (int c = 0; c < W; ++c) dxm[c] += dxt[c];
        }

        // ---- attention sub-block backward ----
        // du rows and w_o/b_o grads.
        for (int t = 0; t < T; ++t) {
            const double* dy = dxmid.data() + static_cast<size_t>(t) * W;
            const double* urow = tr.row(tr.u, l, t, W);
            double* dut = du.data() + static_cast<size_t>(t) * W;
            for (int r = 0; r < W; ++r) {
                const double* wr = p + b.w_o + static_cast<size_t>(r) * W;
                double acc = 0.0;
                for (int c = 0; c < W; ++c) acc += dy[c] * wr[c];
                dut[r] = acc;
                double* gw = g + b.w_o + static_cast<size_t>(r) * W;
                const double ur = urow[r];
                for (int c = 0; c < W; ++c) gw[c] += ur * dy[c];
            }
            for (int c = 0; c < W; ++c) g[b.b_o + static_cast<size_t>(c)] += dy[c];
        }
        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        for (int head = 0; head < H; ++head) {
            const int hb = head * dh;
            for (int t = 0; t < T; ++t) {
                const double* dut = du.data() + static_cast<size_t>(t) * W + hb;
                const double* attrow = tr.att_row(l, head, t);
                double dot_sum = 0.0;
                for (int pos = 0; pos <= t; ++pos) {
                    const double* vrow = tr.row(tr.v, l, pos, W) + hb;
                    double acc = 0.0;
                    for (int d = 0; d < dh; ++d) acc += dut[d] * vrow[d];
                    datt[static_cast<size_t>(pos)] = acc;
                    dot_sum += attrow[pos] * acc;
                    double* dvrow = dv.data() + static_cast<size_t>(pos) * W + hb;
                    const double w_ts = attrow[pos];
                    for (int d = 0; d < dh; ++d) dvrow[d] += w_ts * dut[d];
                }
                for (int pos = 0; pos <= t; ++pos) {
                    dscore[static_cast<size_t>(pos)] =
                        attrow[pos] * (datt[static_cast<size_t>(pos)] - dot_sum);
                }
                const double* qrow = tr.row(tr.q, l, t, W) + hb;
                double* dqrow = dq.data() + static_cast<size_t>(t) * W + hb;
                for (int pos = 0; pos <= t; ++pos) {
                    const double ds = dscore[static_cast<size_t>(pos)] * inv_sqrt_dh;
                    const double* krow = tr.row(tr.k, l, pos, W) + hb;
                    double* dkrow = dk.data() + static_cast<size_t>(pos) * W + hb;
                    for (int d = 0; d < dh; ++d) {
                        dqrow[d] += ds * krow[d];
                        dkrow[d] += ds * qrow[d];
                    }
                }
            }
        }
        // qkv projection backward + LN1 backward; produces d(xin) into dx.
        for (int t = 0; t < T; ++t) {
            const double* arow = tr.row(tr.a, l, t, W);
            // dqkv = [dq | dk | dv] row t
            const double* dqt = dq.data() + static_cast<size_t>(t) * W;
            const double* dkt = dk.data() + static_cast<size_t>(t) * W;
            const double* dvt = dv.data() + static_cast<size_t>(t) * W;
            for (int r = 0; r < W; ++r) {
                const double* wr = p + b.w_qkv + static_cast<size_t>(r) * 3 * W;
                double acc = 0.0;
                for (int c = 0; c < W; ++c) acc += dqt[c] * wr[c];
                for (int c = 0; c < W; ++c) acc += dkt[c] * wr[W + c];
                for (int c = 0; c < W; ++c) acc += dvt[c] * wr[2 * W + c];
                drow[static_cast<size_t>(r)] = acc; // da
                double* gw = g + b.w_qkv + static_cast<size_t>(r) * 3 * W;
                const double ar = arow[r];
                for (int c = 0; c < W; ++c) gw[c] += ar * dqt[c];
                for (int c = 0; c < W; ++c) gw[W + c] += ar * dkt[c];
                for (int c = 0; c < W; ++c) gw[2 * W + c] += ar * dvt[c];
            }
            for (int c = 0; c < W; ++c) {
                g[b.b_qkv + static_cast<size_t>(c)] += dqt[c];
                g[b.b_qkv + static_cast<size_t>(W + c)] += dkt[c];
                g[b.b_qkv + static_cast<size_t>(2 * W + c)] += dvt[c];
            }
            const double* xinrow = tr.xs_row(l, t);
            double* dxt = dx.data() + static_cast<size_t>(t) * W;
            layernorm_backward(xinrow, tr.mean1[static_cast<size_t>(l) * T + t],
                               tr.rstd1[static_cast<size_t>(l) * T + t], p + b.ln1_g,
                               drow.data(), W, drow2.data(), g + b.ln1_g, g + b.ln1_b);
            const double* dxm = dxmid.data() + static_cast<size_t>(t) * W;
            for (int c = 0; c < W; ++c) dxt[c] = dxm[c] + drow2[static_cast<size_t>(c)];
        }
    }

    // Embedding backward.
    for (int t = 0; t < T; ++t) {
        const double* dxt = dx.data() + static_cast<size_t>(t) * W;
        double* gte = g + ly.tok_emb + static_cast<size_t>(seq[static_cast<size_t>(t)]) * W;
        double* gpe = g + ly.pos_emb + static_cast<size_t>(t) * W;
        for (int d = 0; d < W; ++d) {
            gte[d] += dxt[d];
            gpe[d] += dxt[d];
        }
    }

    for (double gv : res.grad) {
        if (!std::isfinite(gv)) throw NumericError("policy: non-finite gradient");
    }
    return res;
}

void apply_update(Policy& policy, std::span<const double> grad, OptimState& state,
                  const OptimConfig& opt) {
    const size_t n = policy.params.size();
    if (grad.size() != n) throw ConfigError("apply_update: gradient shape mismatch");
    if (opt.rule == UpdateRule::sgd) {
        for (size_t i = 0; i < n; ++i) policy.params[i] -= opt.lr * grad[i];
        state.step += 1;
        return;
    }
    if (state.m.empty()) {
        state.m.assign(n, 0.0);
        state.v.assign(n, 0.0);
    }
    if (state.m.size() != n || state.v.size() != n) {
        throw ConfigError("apply_update: optimizer state shape mismatch");
    }
    state.step += 1;
    const double b1c = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
    const double b2c = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
    for (size_t i = 0; i < n; ++i) {
        state.m[i] = opt.beta1 * state.m[i] + (1.0 - opt.beta1) * grad[i];
        state.v[i] = opt.beta2 * state.v[i] + (1.0 - opt.beta2) * grad[i] * grad[i];
        const double mhat = state.m[i] / b1c;
        const double vhat = state.v[i] / b2c;
        policy.params[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
    }
}

namespace {

void put_u32(std::ostream& os, uint32_t x) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((x >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, uint64_t x) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((x >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= static_cast<uint32_t>(b[i]) << (8 * i);
    return x;
}

uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= static_cast<uint64_t>(b[i]) << (8 * i);
    return x;
}

uint64_t bytes_hash(const void* data, size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

} // namespace

void Policy::save(const std::string& path) const {
    static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes little-endian");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("checkpoint: cannot open " + path + " for writing");
    put_u32(os, kCheckpointMagic);
    put_u32(os, kCheckpointVersion);
    put_u32(os, static_cast<uint32_t>(cfg.vocab_size));
    put_u32(os, static_cast<uint32_t>(cfg.context_len));
    put_u32(os, static_cast<uint32_t>(cfg.width));
    put_u32(os, static_cast<uint32_t>(cfg.layers));
    put_u32(os, static_cast<uint32_t>(cfg.heads));
    uint64_t std_bits;
    std::memcpy(&std_bits, &cfg.init_std, 8);
    put_u64(os, std_bits);
    put_u64(os, cfg.seed);
    put_u64(os, cfg.vocab_hash);
    put_u64(os, static_cast<uint64_t>(params.size()));
    os.write(reinterpret_cast<const char*>(params.data()),
             static_cast<std::streamsize>(params.size() * sizeof(double)));
    put_u64(os, bytes_hash(params.data(), params.size() * sizeof(double)));
    if (!os) throw FormatError("checkpoint: write failed for " + path);
}

Policy Policy::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("checkpoint: cannot open " + path);
    if (get_u32(is) != kCheckpointMagic) throw FormatError("checkpoint: bad magic in " + path);
    const uint32_t version = get_u32(is);
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint: unsupported format version " + std::to_string(version));
    }
    PolicyConfig cfg;
    cfg.vocab_size = static_cast<int>(get_u32(is));
    cfg.context_len = static_cast<int>(get_u32(is));
    cfg.width = static_cast<int>(get_u32(is));
    cfg.layers = static_cast<int>(get_u32(is));
    cfg.heads = static_cast<int>(get_u32(is));
    const uint64_t std_bits = get_u64(is);
    std::memcpy(&cfg.init_std, &std_bits, 8);
    cfg.seed = get_u64(is);
    cfg.vocab_hash = get_u64(is);
    const uint64_t n = get_u64(is);
    if (!is) throw FormatError("checkpoint: truncated header in " + path);
    cfg.validate();
    if (n != static_cast<uint64_t>(cfg.param_count())) {
        throw FormatError("checkpoint: parameter count mismatch in " + path);
    }
    Policy p;
    p.cfg = cfg;
    p.params.resize(n);
    is.read(reinterpret_cast<char*>(p.params.data()), static_cast<std::streamsize>(n * sizeof(double)));
    const uint64_t want = get_u64(is);
    if (!is) throw FormatError("checkpoint: truncated parameter block in " + path);
    if (bytes_hash(p.params.data(), n * sizeof(double)) != want) {
        throw FormatError("checkpoint: checksum mismatch in " + path);
    }
    return p;
}

} // namespace grpolab
