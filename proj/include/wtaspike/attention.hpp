#pragma once

// Spiking self-attention:
//   WSSA  (encoder):  A_w = WTA(Q K^T * s),            Out = Linear(SN(A_w V))
//   CWSSA (decoder):  A_w = WTA(M(Q K^T * s)),         M = causal mask
//   SSA baseline:     Out = Linear(SN(Q K^T V * s))    (M on Q K^T when causal)
//   Softmax baseline: A   = softmax(M(Q K^T * s))      (ablation reference)
// with Q = SN_Q(Linear_Q(SN(X))) etc.
//
// Masking is candidate exclusion: masked scores are dropped from the argmax /
// softmax candidate set, never set to -inf, so no NaN can reach the spike
// path and masked attention entries are exactly zero.
//
// With hard/top-k WTA at inference, the multiplication by s is skipped
// (argmax is invariant under positive scaling), leaving the score and
// weighted-sum paths accumulate-only.

#include <cstdint>
#include <string>
#include <vector>

#include "wtaspike/energy.hpp"
#include "wtaspike/neurons.hpp"
#include "wtaspike/tensor.hpp"
#include "wtaspike/wta.hpp"

namespace wtaspike {

enum class AttentionVariant : uint8_t { WTA, SSA, Softmax };

struct AttentionConfig {
    int num_heads = 4;
    int head_dim = 16;
    double scale_s = 0.125;
    WTAKind wta = WTAKind::hard();
    bool causal = false;
    bool fold_scale_at_inference = true;
    AttentionVariant variant = AttentionVariant::WTA;

    int model_dim() const { return num_heads * head_dim; }

    void validate() const {
        if (num_heads < 1 || head_dim < 1)
            throw InputError("AttentionConfig: heads and head_dim must be >= 1");
        if (scale_s <= 0.0) throw InputError("AttentionConfig: scale_s must be positive");
        if (wta.surrogate_tau <= 0.0)
            throw InputError("AttentionConfig: surrogate temperature must be positive");
        if (wta.variant == WTAKind::TopK && wta.k < 1)
            throw InputError("AttentionConfig: top-k requires k >= 1");
    }
};

// A time sequence of equally shaped activations; index 0 is the first step.
using TimeSeq = std::vector<Tensor>;

// ---------------------------------------------------------------------------
// Linear layer with probe hook. m = fan-in, n = fan-out; spike-fed calls are
// priced SNN, real-fed ANN.
// ---------------------------------------------------------------------------
struct Linear {
    Tensor w; // [in, out]
    Tensor b; // [out], optional
    std::string name;

    Tensor apply(const Tensor& x, ForwardProbe* probe = nullptr, int64_t t_eff = 1) const {
        if (probe) {
            probe->record_layer(name, x.domain().is_spike(), w.dim(0), w.dim(1), t_eff);
            probe->firing.add(name, x);
        }
        Tensor y = matmul(x, w);
        if (b.defined()) y = add_rows(y, b);
        return y;
    }
};

namespace detail {

inline Tensor split_heads(const Tensor& x, int heads, int head_dim) {
    // [B, N, d] -> [B, h, N, dh]
    Tensor r = reshape(x, {x.dim(0), x.dim(1), heads, head_dim});
    return permute(r, {0, 2, 1, 3});
}

inline Tensor merge_heads(const Tensor& x) {
    // [B, h, N, dh] -> [B, N, d]
    Tensor p = permute(x, {0, 2, 1, 3});
    return reshape(p, {p.dim(0), p.dim(1), p.dim(2) * p.dim(3)});
}

// Accumulate-event count for a spike-spike matmul a[..., m, k] @ b[..., k, n]^T
// under the unfolded convention: an NI-LIF value k/D carries k binary events.
inline uint64_t spike_matmul_events(const Tensor& q, const Tensor& k) {
    double uq = q.domain().kind == ValueDomain::Ternary ? q.domain().unit : 1.0;
    double dq = q.domain().kind == ValueDomain::NormInt ? q.domain().d_max : 1;
    double uk = k.domain().kind == ValueDomain::Ternary ? k.domain().unit : 1.0;
    double dk = k.domain().kind == ValueDomain::NormInt ? k.domain().d_max : 1;
    int64_t cols = q.shape().back();
    int64_t q_rows = q.size() / cols;
    int64_t k_rows = k.size() / cols;
    int64_t batches_q = q_rows / q.shape()[q.ndim() - 2];
    (void)batches_q;
    // column sums per leading batch
    int64_t n_q = q.shape()[q.ndim() - 2];
    int64_t n_k = k.shape()[k.ndim() - 2];
    int64_t batches = q.size() / (n_q * cols);
    double events = 0.0;
    for (int64_t bi = 0; bi < batches; ++bi) {
        const double* qd = q.value().data() + bi * n_q * cols;
        const double* kd = k.value().data() + bi * n_k * cols;
        for (int64_t c = 0; c < cols; ++c) {
            double sq = 0.0, sk = 0.0;
            for (int64_t i = 0; i < n_q; ++i) sq += std::abs(qd[i * cols + c]) / uq * dq;
            for (int64_t j = 0; j < n_k; ++j) sk += std::abs(kd[j * cols + c]) / uk * dk;
            events += sq * sk;
        }
    }
    (void)k_rows;
    return static_cast<uint64_t>(events + 0.5);
}

// Recorded row-wise WTA over the key axis of scores [B, h, N, N].
// Causal rows restrict candidates to columns <= row. Backward is the softmax
// surrogate (exact sparsemax Jacobian for real-valued sparsemax).
inline Tensor wta_attention_op(const Tensor& scores, WTAKind kind, bool causal) {
    const int64_t n = scores.shape().back();
    const int64_t rows_total = scores.size() / n;
    const int64_t rows_per_map = scores.shape()[scores.ndim() - 2];

    auto allowed_for = [n, rows_per_map, causal](int64_t flat_row, std::vector<uint8_t>& allowed) {
        allowed.assign(static_cast<size_t>(n), 1);
        if (causal) {
            int64_t i = flat_row % rows_per_map;
            for (int64_t j = i + 1; j < n; ++j) allowed[static_cast<size_t>(j)] = 0;
        }
    };

    CustomOp op;
    op.label = "wta_attention";
    op.out_shape = [](const std::vector<Tensor>& in) { return in[0].shape(); };
    op.forward = [n, rows_total, allowed_for, kind](const std::vector<Tensor>& in) {
        const auto& sv = in[0].value();
        std::vector<double> out(sv.size(), 0.0);
        std::vector<uint8_t> allowed;
        for (int64_t r = 0; r < rows_total; ++r) {
            allowed_for(r, allowed);
            auto row = std::span<const double>(sv.data() + r * n, static_cast<size_t>(n));
            auto y = wta_forward_row(row, kind, allowed);
            std::copy(y.begin(), y.end(), out.begin() + r * n);
        }
        return out;
    };
    op.smooth = [n, rows_total, allowed_for, kind](const std::vector<Tensor>& in) {
        const auto& sv = in[0].value();
        std::vector<double> out(sv.size(), 0.0);
        std::vector<uint8_t> allowed;
        for (int64_t r = 0; r < rows_total; ++r) {
            allowed_for(r, allowed);
            auto row = std::span<const double>(sv.data() + r * n, static_cast<size_t>(n));
            std::vector<double> y;
            if (kind.variant == WTAKind::Sparsemax && !kind.binarize_support)
                y = wta_forward_row(row, kind, allowed);
            else
                y = softmax_tau(row, kind.surrogate_tau, allowed);
            std::copy(y.begin(), y.end(), out.begin() + r * n);
        }
        return out;
    };
    op.backward = [n, rows_total, allowed_for, kind](const std::vector<Tensor>& in,
                                                     const std::vector<double>&,
                                                     const std::vector<double>& g) {
        const auto& sv = in[0].value();
        std::vector<double> gs(sv.size(), 0.0);
        std::vector<uint8_t> allowed;
        for (int64_t r = 0; r < rows_total; ++r) {
            allowed_for(r, allowed);
            auto row = std::span<const double>(sv.data() + r * n, static_cast<size_t>(n));
            auto up = std::span<const double>(g.data() + r * n, static_cast<size_t>(n));
            std::vector<double> gr;
            if (kind.variant == WTAKind::Sparsemax && !kind.binarize_support)
                gr = sparsemax_backward(row, up, allowed);
            else
                gr = wta_backward(row, up, kind.surrogate_tau, allowed);
            std::copy(gr.begin(), gr.end(), gs.begin() + r * n);
        }
        return std::vector<std::vector<double>>{std::move(gs)};
    };

    Tensor out = apply_custom(op, {scores});
    bool binary = kind.variant != WTAKind::Sparsemax || kind.binarize_support;
    out.domain() = binary ? ValueDomain::binary() : ValueDomain::real();
    return out;
}

// Recorded row-wise masked softmax (exact gradient); the ablation reference.
inline Tensor softmax_attention_op(const Tensor& scores, bool causal) {
    const int64_t n = scores.shape().back();
    const int64_t rows_total = scores.size() / n;
    const int64_t rows_per_map = scores.shape()[scores.ndim() - 2];

    CustomOp op;
    op.label = "softmax_attention";
    op.out_shape = [](const std::vector<Tensor>& in) { return in[0].shape(); };
    auto forward = [n, rows_total, rows_per_map, causal](const std::vector<Tensor>& in) {
        const auto& sv = in[0].value();
        std::vector<double> out(sv.size(), 0.0);
        std::vector<uint8_t> allowed(static_cast<size_t>(n), 1);
        for (int64_t r = 0; r < rows_total; ++r) {
            if (causal) {
                allowed.assign(static_cast<size_t>(n), 1);
                int64_t i = r % rows_per_map;
                for (int64_t j = i + 1; j < n; ++j) allowed[static_cast<size_t>(j)] = 0;
            }
            auto row = std::span<const double>(sv.data() + r * n, static_cast<size_t>(n));
            auto p = softmax_tau(row, 1.0, allowed);
            std::copy(p.begin(), p.end(), out.begin() + r * n);
        }
        return out;
    };
    op.forward = forward;
    op.backward = [n, rows_total](const std::vector<Tensor>&, const std::vector<double>& out,
                                  const std::vector<double>& g) {
        std::vector<double> gs(out.size(), 0.0);
        for (int64_t r = 0; r < rows_total; ++r) {
            const double* p = out.data() + r * n;
            const double* up = g.data() + r * n;
            double dot = 0.0;
            for (int64_t j = 0; j < n; ++j) dot += p[j] * up[j];
            for (int64_t j = 0; j < n; ++j) gs[static_cast<size_t>(r * n + j)] = p[j] * (up[j] - dot);
        }
        return std::vector<std::vector<double>>{std::move(gs)};
    };

    Tensor out = apply_custom(op, {scores});
    out.domain() = ValueDomain::real();
    return out;
}

// Zeroes score entries above the diagonal (the SSA baseline's causal mask; no
// normalization follows, so zeroing is the whole mask).
inline Tensor causal_zero(const Tensor& scores) {
    const int64_t n = scores.shape().back();
    const int64_t rows_per_map = scores.shape()[scores.ndim() - 2];
    Tensor mask = Tensor::zeros(scores.shape());
    auto& mv = mask.value();
    const int64_t rows_total = scores.size() / n;
    for (int64_t r = 0; r < rows_total; ++r) {
        int64_t i = r % rows_per_map;
        for (int64_t j = 0; j <= i && j < n; ++j) mv[static_cast<size_t>(r * n + j)] = 1.0;
    }
    Tensor out = mul(scores, mask);
    out.domain() = scores.domain();
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// The attention block. One instance per transformer layer; owns its neuron
// layers and projections.
// ---------------------------------------------------------------------------
struct AttentionLayer {
    AttentionConfig cfg;
    Linear q, k, v, out; // out has no bias
    SpikingLayer sn_in, sn_q, sn_k, sn_v, sn_att;
    std::string name = "attn";
    int64_t t_eff = 1; // effective binary time steps for energy pricing

    // Q/K/V projection: spike input -> linear -> spiking neuron, per Eqs 12-14.
    // Returns stacked per-step spike sequences.
    std::array<TimeSeq, 3> qkv_project(const TimeSeq& x_spikes, ForwardProbe* probe) const {
        TimeSeq q_pre, k_pre, v_pre;
        for (const Tensor& xt : x_spikes) {
            q_pre.push_back(q.apply(xt, probe, t_eff));
            k_pre.push_back(k.apply(xt, probe, t_eff));
            v_pre.push_back(v.apply(xt, probe, t_eff));
        }
        return {sn_q.apply(q_pre), sn_k.apply(k_pre), sn_v.apply(v_pre)};
    }

    TimeSeq forward(const TimeSeq& xs, ForwardProbe* probe = nullptr) const {
        cfg.validate();
        const bool inference = Tape::active() == nullptr;
        const bool fold_scale = inference && cfg.fold_scale_at_inference &&
                                cfg.variant == AttentionVariant::WTA &&
                                cfg.wta.variant != WTAKind::Sparsemax;

        TimeSeq x_spikes = sn_in.apply(xs);
        auto [Q, K, V] = qkv_project(x_spikes, probe);

        const std::string score_site = name + ".scores";
        const std::string av_site = name + ".av";
        if (probe) {
            probe->add_audit_site(score_site);
            probe->add_audit_site(av_site);
        }

        TimeSeq merged;
        merged.reserve(xs.size());
        for (size_t t = 0; t < xs.size(); ++t) {
            Tensor qh = detail::split_heads(Q[t], cfg.num_heads, cfg.head_dim);
            Tensor kh = detail::split_heads(K[t], cfg.num_heads, cfg.head_dim);
            Tensor vh = detail::split_heads(V[t], cfg.num_heads, cfg.head_dim);

            Tensor scores = matmul(qh, transpose_last2(kh));
            if (probe) {
                if (qh.domain().mul_free() && kh.domain().mul_free())
                    probe->counter.add_acs(score_site, detail::spike_matmul_events(qh, kh));
                else
                    probe->counter.add_macs(score_site,
                                            static_cast<uint64_t>(scores.size()) *
                                                static_cast<uint64_t>(cfg.head_dim));
            }
            if (!fold_scale) {
                scores = scale(scores, cfg.scale_s);
                if (probe)
                    probe->counter.add_macs(score_site, static_cast<uint64_t>(scores.size()));
            }

            Tensor ctx;
            switch (cfg.variant) {
                case AttentionVariant::WTA: {
                    Tensor aw = detail::wta_attention_op(scores, cfg.wta, cfg.causal);
                    if (probe) {
                        if (!aw.domain().mul_free())
                            probe->counter.add_macs(av_site,
                                                    static_cast<uint64_t>(aw.size()) *
                                                        static_cast<uint64_t>(cfg.head_dim));
                        else
                            probe->counter.add_acs(av_site,
                                                   detail::spike_matmul_events(
                                                       aw, transpose_last2(vh)));
                        if (!aw.domain().mul_free())
                            probe->record_layer(av_site, false,
                                                cfg.num_heads * static_cast<int>(xs[t].dim(1)) *
                                                    static_cast<int>(xs.size()),
                                                cfg.head_dim, static_cast<int64_t>(xs.size()));
                    }
                    ctx = matmul(aw, vh);
                    break;
                }
                case AttentionVariant::Softmax: {
                    Tensor aw = detail::softmax_attention_op(scores, cfg.causal);
                    const std::string sm_site = name + ".softmax";
                    if (probe) {
                        probe->add_audit_site(sm_site);
                        probe->counter.add_macs(sm_site, static_cast<uint64_t>(aw.size()));
                        probe->record_layer(sm_site, false,
                                            cfg.num_heads * static_cast<int>(xs[t].dim(1)) *
                                                static_cast<int>(xs.size()),
                                            1, static_cast<int64_t>(xs.size()));
                        probe->counter.add_macs(av_site, static_cast<uint64_t>(aw.size()) *
                                                             static_cast<uint64_t>(cfg.head_dim));
                        probe->record_layer(av_site, false,
                                            cfg.num_heads * static_cast<int>(xs[t].dim(1)) *
                                                static_cast<int>(xs.size()),
                                            cfg.head_dim, static_cast<int64_t>(xs.size()));
                    }
                    ctx = matmul(aw, vh);
                    break;
                }
                case AttentionVariant::SSA: {
                    Tensor aw = cfg.causal ? detail::causal_zero(scores) : scores;
                    if (probe) {
                        if (aw.domain().mul_free())
                            probe->counter.add_acs(av_site, detail::spike_matmul_events(
                                                                aw, transpose_last2(vh)));
                        else
                            probe->counter.add_macs(av_site,
                                                    static_cast<uint64_t>(aw.size()) *
                                                        static_cast<uint64_t>(cfg.head_dim));
                    }
                    ctx = matmul(aw, vh);
                    break;
                }
            }
            merged.push_back(detail::merge_heads(ctx));
        }

        TimeSeq att_spikes = sn_att.apply(merged);
        TimeSeq result;
        result.reserve(xs.size());
        for (const Tensor& a : att_spikes) result.push_back(out.apply(a, probe, t_eff));
        return result;
    }
};

} // namespace wtaspike
