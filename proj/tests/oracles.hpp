// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Independent reference implementations used as test oracles. Everything in
// here recomputes results through a different route than the library code it
// checks (Eigen batched matrices vs. incremental scalar loops, direct scans
// vs. the production matchers) and must stay decoupled from src/.

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "grpolab/grpo.hpp"
#include "grpolab/policy.hpp"

namespace oracle {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Reference transformer forward pass (batched, Eigen). Reads the parameter
// vector with its own offset bookkeeping.
// ---------------------------------------------------------------------------

struct RefParams {
    MatrixXd tok_emb, pos_emb;
    struct Block {
        VectorXd ln1_g, ln1_b, ln2_g, ln2_b;
        MatrixXd w_qkv, w_o, w_up, w_down;
        VectorXd b_qkv, b_o, b_up, b_down;
    };
    std::vector<Block> blocks;
    VectorXd lnf_g, lnf_b;
    MatrixXd w_head;
    VectorXd b_head;
};

inline RefParams ref_read_params(const grpolab::Policy& p) {
    const auto& c = p.cfg;
    const int V = c.vocab_size, C = c.context_len, W = c.width, L = c.layers, M = 4 * W;
    size_t o = 0;
    auto mat = [&](int rows, int cols) {
        MatrixXd m(rows, cols);
        for (int r = 0; r < rows; ++r) {
            for (int cc = 0; cc < cols; ++cc) m(r, cc) = p.params[o + static_cast<size_t>(r) * cols + cc];
        }
        o += static_cast<size_t>(rows) * cols;
        return m;
    };
    auto vec = [&](int n) {
        VectorXd v(n);
        for (int i = 0; i < n; ++i) v(i) = p.params[o + static_cast<size_t>(i)];
        o += static_cast<size_t>(n);
        return v;
    };
    RefParams rp;
    rp.tok_emb = mat(V, W);
    rp.pos_emb = mat(C, W);
    rp.blocks.resize(static_cast<size_t>(L));
    for (auto& b : rp.blocks) {
        b.ln1_g = vec(W);
        b.ln1_b = vec(W);
        b.w_qkv = mat(W, 3 * W);
        b.b_qkv = vec(3 * W);
        b.w_o = mat(W, W);
        b.b_o = vec(W);
        b.ln2_g = vec(W);
        b.ln2_b = vec(W);
        b.w_up = mat(W, M);
        b.b_up = vec(M);
        b.w_down = mat(M, W);
        b.b_down = vec(W);
    }
    rp.lnf_g = vec(W);
    rp.lnf_b = vec(W);
    rp.w_head = mat(W, V);
    rp.b_head = vec(V);
    return rp;
}

inline MatrixXd ref_layernorm(const MatrixXd& x, const VectorXd& g, const VectorXd& b) {
    MatrixXd out(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double mean = x.row(r).mean();
        const double var = (x.row(r).array() - mean).square().mean();
        const double rstd = 1.0 / std::sqrt(var + 1e-5);
        out.row(r) = (((x.row(r).array() - mean) * rstd).transpose() * g.array() + b.array())
                         .matrix()
                         .transpose();
    }
    return out;
}

struct RefForward {
    std::vector<MatrixXd> block_out; // block_out[0] = embeddings, [l+1] = after block l
    MatrixXd logprobs;               // T x V, log-softmax rows
};

inline RefForward ref_forward(const grpolab::Policy& p, std::span<const int> seq) {
    const auto& c = p.cfg;
    const int T = static_cast<int>(seq.size());
    const int W = c.width, H = c.heads, V = c.vocab_size;
    const int dh = W / H;
    const RefParams rp = ref_read_params(p);

    MatrixXd x(T, W);
    for (int t = 0; t < T; ++t) {
        x.row(t) = rp.tok_emb.row(seq[static_cast<size_t>(t)]) + rp.pos_emb.row(t);
    }
    RefForward rf;
    rf.block_out.push_back(x);
    for (const auto& b : rp.blocks) {
        const MatrixXd a = ref_layernorm(x, b.ln1_g, b.ln1_b);
        const MatrixXd qkv = (a * b.w_qkv).rowwise() + b.b_qkv.transpose();
        MatrixXd u = MatrixXd::Zero(T, W);
        for (int h = 0; h < H; ++h) {
            const MatrixXd q = qkv.middleCols(h * dh, dh);
            const MatrixXd k = qkv.middleCols(W + h * dh, dh);
            const MatrixXd v = qkv.middleCols(2 * W + h * dh, dh);
            MatrixXd scores = q * k.transpose() / std::sqrt(static_cast<double>(dh));
            for (int t = 0; t < T; ++t) {
                for (int s = t + 1; s < T; ++s) scores(t, s) = -1e300;
                const double mx = scores.row(t).head(t + 1).maxCoeff();
                VectorXd e = (scores.row(t).head(t + 1).array() - mx).exp();
                e /= e.sum();
                for (int s = 0; s <= t; ++s) u.row(t).segment(h * dh, dh) += e(s) * v.row(s);
            }
        }
        const MatrixXd y = (u * b.w_o).rowwise() + b.b_o.transpose();
        x += y;
        const MatrixXd a2 = ref_layernorm(x, b.ln2_g, b.ln2_b);
        MatrixXd hpre = (a2 * b.w_up).rowwise() + b.b_up.transpose();
        const MatrixXd hact =
            hpre.unaryExpr([](double z) { return 0.5 * z * (1.0 + std::erf(z * M_SQRT1_2)); });
        x += (hact * b.w_down).rowwise() + b.b_down.transpose();
        rf.block_out.push_back(x);
    }
    const MatrixXd xf = ref_layernorm(x, rp.lnf_g, rp.lnf_b);
    MatrixXd logits = (xf * rp.w_head).rowwise() + rp.b_head.transpose();
    rf.logprobs.resize(T, V);
    for (int t = 0; t < T; ++t) {
        const double mx = logits.row(t).maxCoeff();
        const double lse = mx + std::log((logits.row(t).array() - mx).exp().sum());
        rf.logprobs.row(t) = logits.row(t).array() - lse;
    }
    return rf;
}

// log P(continuation | context) per token, reference route.
inline std::vector<double> ref_log_probs(const grpolab::Policy& p, std::span<const int> context,
                                         std::span<const int> continuation) {
    std::vector<int> seq(context.begin(), context.end());
    seq.insert(seq.end(), continuation.begin(), continuation.end());
    const RefForward rf = ref_forward(p, seq);
    std::vector<double> out;
    for (size_t j = 0; j < continuation.size(); ++j) {
        const int pos = static_cast<int>(context.size() + j) - 1;
        out.push_back(rf.logprobs(pos, continuation[j]));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Central finite differences over all parameters.
// ---------------------------------------------------------------------------

inline std::vector<double> finite_diff_grad(const grpolab::Policy& policy,
                                            const std::function<double(const grpolab::Policy&)>& loss,
                                            double h = 1e-4) {
    grpolab::Policy probe = policy;
    std::vector<double> grad(policy.params.size(), 0.0);
    for (size_t i = 0; i < policy.params.size(); ++i) {
        const double orig = probe.params[i];
        probe.params[i] = orig + h;
        const double up = loss(probe);
        probe.params[i] = orig - h;
        const double down = loss(probe);
        probe.params[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

inline double max_rel_error(std::span<const double> a, std::span<const double> b) {
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double diff = std::abs(a[i] - b[i]);
        const double denom = std::max({1e-6, std::abs(a[i]), std::abs(b[i])});
        worst = std::max(worst, diff / denom);
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Brute-force GRPO objective from first principles: probabilities through
// the reference forward pass, formula recomputed directly in long double.
// ---------------------------------------------------------------------------

inline double brute_grpo_loss(const grpolab::RolloutGroup& group, const grpolab::Policy& theta,
                              const grpolab::Policy& ref, const grpolab::GrpoConfig& cfg) {
    const int G = static_cast<int>(group.responses.size());
    long double j_sum = 0.0L;
    for (int i = 0; i < G; ++i) {
        const auto& resp = group.responses[static_cast<size_t>(i)];
        if (resp.empty()) continue;
        const auto lp_t = ref_log_probs(theta, group.context, resp);
        const auto lp_r = ref_log_probs(ref, group.context, resp);
        const auto& lp_o = group.logp_old[static_cast<size_t>(i)];
        const long double adv = group.advantages[static_cast<size_t>(i)];
        long double acc = 0.0L;
        for (size_t t = 0; t < resp.size(); ++t) {
            const long double gamma = std::exp(static_cast<long double>(lp_t[t]) - lp_o[t]);
            long double clipped = gamma;
            if (clipped < 1.0L - cfg.clip_eps) clipped = 1.0L - cfg.clip_eps;
            if (clipped > 1.0L + cfg.clip_eps) clipped = 1.0L + cfg.clip_eps;
            const long double surr = std::min(gamma * adv, clipped * adv);
            const long double d = static_cast<long double>(lp_r[t]) - lp_t[t];
            const long double kl = std::exp(d) - d - 1.0L;
            acc += surr - cfg.kl_beta * kl;
        }
        j_sum += acc / static_cast<long double>(resp.size());
    }
    return static_cast<double>(-j_sum / G);
}

// ---------------------------------------------------------------------------
// Hand-rolled cyclic Jacobi eigensolver on M^T M; singular values are the
// square roots of its eigenvalues. Second route for the effective rank.
// ---------------------------------------------------------------------------

inline std::vector<double> jacobi_singular_values(int rows, int cols,
                                                  std::span<const double> data) {
    const int n = cols;
    std::vector<double> a(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            long double s = 0.0L;
            for (int r = 0; r < rows; ++r) {
                s += static_cast<long double>(data[static_cast<size_t>(r) * cols + i]) *
                     data[static_cast<size_t>(r) * cols + j];
            }
            a[static_cast<size_t>(i) * n + j] = static_cast<double>(s);
        }
    }
    auto at = [&](int i, int j) -> double& { return a[static_cast<size_t>(i) * n + j]; };
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int i = 0; i < n; ++i) {
            for (int j = i + 1; j < n; ++j) off += at(i, j) * at(i, j);
        }
        if (off < 1e-26) break;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                if (std::abs(at(p, q)) < 1e-300) continue;
                const double theta = 0.5 * (at(q, q) - at(p, p)) / at(p, q);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = at(k, p), akq = at(k, q);
                    at(k, p) = c * akp - s * akq;
                    at(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = at(p, k), aqk = at(q, k);
                    at(p, k) = c * apk - s * aqk;
                    at(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> sv;
    for (int i = 0; i < n; ++i) sv.push_back(std::sqrt(std::max(0.0, at(i, i))));
    std::sort(sv.rbegin(), sv.rend());
    return sv;
}

inline double brute_effective_rank(int rows, int cols, std::span<const double> data) {
    const auto sv = jacobi_singular_values(rows, cols, data);
    long double total = 0.0L;
    for (double s : sv) total += s;
    long double entropy = 0.0L;
    for (double s : sv) {
        const long double p = s / total;
        if (p > 0.0L) entropy -= p * std::log(p);
    }
    return static_cast<double>(std::exp(entropy));
}

// ---------------------------------------------------------------------------
// Brute-force text scanners (regex-free second implementations).
// ---------------------------------------------------------------------------

inline bool brute_keyword_hit(std::string_view text, std::string_view keyword) {
    std::string lt(text), lk(keyword);
    for (auto& ch : lt) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    for (auto& ch : lk) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    auto alnum = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
    size_t from = 0;
    for (;;) {
        const size_t at = lt.find(lk, from);
        if (at == std::string::npos) return false;
        const bool left_ok = at == 0 || !alnum(lt[at - 1]) || !alnum(lk.front());
        const size_t end = at + lk.size();
        const bool right_ok = end == lt.size() || !alnum(lt[end]) || !alnum(lk.back());
        if (left_ok && right_ok) return true;
        from = at + 1;
    }
}

// Scans from the end of the string for the last marker and matches braces
// by explicit counting; no reuse of the production scanner.
inline std::optional<std::string> brute_extract_boxed(std::string_view text) {
    const std::string marker = "\\boxed{";
    size_t best = std::string_view::npos;
    for (size_t i = 0; i + marker.size() <= text.size(); ++i) {
        if (text.substr(i, marker.size()) == marker) best = i;
    }
    if (best == std::string_view::npos) return std::nullopt;
    int depth = 0;
    for (size_t i = best + marker.size() - 1; i < text.size(); ++i) {
        if (text[i] == '{') ++depth;
        if (text[i] == '}') {
            --depth;
            if (depth == 0) {
                const size_t start = best + marker.size();
                return std::string(text.substr(start, i - start));
            }
        }
    }
    return std::nullopt;
}

} // namespace oracle
