#pragma once

// Spiking neuron dynamics.
//
// T-LIF (ternary):
//   U[t] = H[t-1] + X[t]
//   S[t] = b * alpha,  b = -1 if U < -alpha, 0 if |U| < alpha, +1 if U > alpha
//   H[t] = V_reset * |b| + beta * U[t] * (1 - |b|)
// Training backward uses a rectangular surrogate of width 1 around each
// threshold (slope 1/width inside the window, 0 outside). alpha is a
// learnable per-layer scalar, constant across time steps.
//
// NI-LIF (normalized integer):
//   U[t] = H[t-1] + X[t]
//   S[t] = clip(round(U[t]), 0, D) / D
//   H[t] = beta * (U[t] - S[t] * D)
// round is half-away-from-zero; round/clip carry straight-through backwards,
// so the whole step is built from recorded primitive ops.
//
// At inference an NI-LIF value k/D unfolds into D binary sub-steps carrying
// k spikes, earliest-first.

#include <cmath>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "wtaspike/tensor.hpp"

namespace wtaspike {

struct TLIFParams {
    double alpha = 1.0; // initial spike magnitude; learnable at the layer level
    double beta = 0.5;  // decay factor, 0 < beta < 1
    double v_reset = 0.0;
    double surrogate_width = 1.0;

    void validate() const {
        if (alpha <= 0.0) throw InputError("TLIFParams: alpha must be positive");
        if (beta <= 0.0 || beta >= 1.0) throw InputError("TLIFParams: beta must be in (0,1)");
    }
};

struct NILIFParams {
    int d_max = 4;     // maximum quantized integer value D
    double beta = 0.5; // decay factor, 0 < beta <= 1

    void validate() const {
        if (d_max < 1) throw InputError("NILIFParams: d_max must be >= 1");
        if (beta <= 0.0 || beta > 1.0) throw InputError("NILIFParams: beta must be in (0,1]");
    }
};

// Membrane carry-over H[t-1], shaped like the feature map it serves.
// Zero-initialized at every new sequence.
struct NeuronState {
    Tensor h;

    static NeuronState zeros(Shape shape) { return {Tensor::zeros(std::move(shape))}; }
};

namespace detail {

// Ternary sign with rectangular surrogate. Inputs: (U, alpha scalar).
// Output b in {-1, 0, +1}. Backward to U: (1/w) inside a width-w window
// around each threshold; backward to alpha: zero (threshold shifts are not
// trained through the spike, only the magnitude S = b * alpha is).
// Twin: (clip(U, a-w/2, a+w/2) + clip(U, -a-w/2, -a+w/2)) / w.
inline CustomOp tlif_sign_op(double width) {
    CustomOp op;
    op.label = "tlif_sign";
    op.forward = [](const std::vector<Tensor>& in) {
        const auto& u = in[0].value();
        double a = in[1].item();
        std::vector<double> b(u.size());
        for (size_t i = 0; i < u.size(); ++i) b[i] = u[i] > a ? 1.0 : (u[i] < -a ? -1.0 : 0.0);
        return b;
    };
    op.smooth = [width](const std::vector<Tensor>& in) {
        const auto& u = in[0].value();
        double a = in[1].item();
        double hw = width / 2.0;
        std::vector<double> b(u.size());
        for (size_t i = 0; i < u.size(); ++i) {
            double hi = std::min(a + hw, std::max(a - hw, u[i]));
            double lo = std::min(-a + hw, std::max(-a - hw, u[i]));
            b[i] = (hi + lo) / width;
        }
        return b;
    };
    op.backward = [width](const std::vector<Tensor>& in, const std::vector<double>&,
                          const std::vector<double>& g) {
        const auto& u = in[0].value();
        double a = in[1].item();
        double hw = width / 2.0;
        std::vector<double> gu(u.size(), 0.0);
        for (size_t i = 0; i < u.size(); ++i) {
            double slope = 0.0;
            if (std::abs(u[i] - a) <= hw) slope += 1.0 / width;
            if (std::abs(u[i] + a) <= hw) slope += 1.0 / width;
            gu[i] = g[i] * slope;
        }
        return std::vector<std::vector<double>>{std::move(gu), {0.0}};
    };
    return op;
}

} // namespace detail

// One T-LIF step. alpha is passed as a (possibly learnable) scalar tensor so
// dS/dalpha = b flows through the recorded multiply.
inline std::pair<Tensor, NeuronState> tlif_step(const TLIFParams& params, const Tensor& alpha,
                                                const NeuronState& state, const Tensor& x) {
    detail::check_same_shape(x, state.h, "tlif_step");
    Tensor u = add(state.h, x);
    Tensor b = apply_custom(detail::tlif_sign_op(params.surrogate_width), {u, alpha});
    Tensor spikes = mul(b, alpha);
    spikes.domain() = ValueDomain::ternary(alpha.item());
    Tensor abs_b = mul(b, b); // b in {-1,0,1} so b*b == |b|
    Tensor keep = sub(Tensor::scalar(1.0), abs_b);
    Tensor h_next = add(scale(abs_b, params.v_reset), mul(scale(u, params.beta), keep));
    return {spikes, NeuronState{h_next}};
}

inline std::pair<Tensor, NeuronState> tlif_step(const TLIFParams& params,
                                                const NeuronState& state, const Tensor& x) {
    return tlif_step(params, Tensor::scalar(params.alpha), state, x);
}

// One NI-LIF step, built entirely from primitive recorded ops.
inline std::pair<Tensor, NeuronState> nilif_step(const NILIFParams& params,
                                                 const NeuronState& state, const Tensor& x) {
    detail::check_same_shape(x, state.h, "nilif_step");
    double d = static_cast<double>(params.d_max);
    Tensor u = add(state.h, x);
    Tensor counts = clip(round_st(u), 0.0, d); // integer k in [0, D]
    Tensor spikes = scale(counts, 1.0 / d);
    spikes.domain() = ValueDomain::norm_int(params.d_max);
    Tensor h_next = scale(sub(u, counts), params.beta);
    return {spikes, NeuronState{h_next}};
}

// Unfold one normalized-integer value s = k/D into D binary sub-steps with
// exactly k ones, earliest-first.
inline std::vector<double> nilif_unfold(double s, int d_max) {
    if (d_max < 1) throw InputError("nilif_unfold: d_max must be >= 1");
    double scaled = s * static_cast<double>(d_max);
    double k_real = std::round(scaled);
    if (std::abs(scaled - k_real) > 1e-9)
        throw ContractError("nilif_unfold: s*D = " + std::to_string(scaled) +
                            " is not an integer");
    int k = static_cast<int>(k_real);
    if (k < 0 || k > d_max)
        throw ContractError("nilif_unfold: spike count " + std::to_string(k) +
                            " outside [0, D]");
    std::vector<double> train(static_cast<size_t>(d_max), 0.0);
    for (int i = 0; i < k; ++i) train[static_cast<size_t>(i)] = 1.0;
    return train;
}

// ---------------------------------------------------------------------------
// Spiking layer: a neuron bank applied across a time sequence, threading
// membrane state. One instance per network site; alpha is this layer's
// learnable magnitude when the neuron is T-LIF.
// ---------------------------------------------------------------------------
enum class NeuronKind : uint8_t { TLIF, NILIF };

struct SpikingLayer {
    NeuronKind kind = NeuronKind::NILIF;
    TLIFParams tlif;
    NILIFParams nilif;
    Tensor alpha; // scalar parameter, T-LIF only

    static SpikingLayer make_tlif(TLIFParams p, bool learnable_alpha = true) {
        p.validate();
        SpikingLayer l;
        l.kind = NeuronKind::TLIF;
        l.tlif = p;
        l.alpha = Tensor::scalar(p.alpha, learnable_alpha);
        return l;
    }

    static SpikingLayer make_nilif(NILIFParams p) {
        p.validate();
        SpikingLayer l;
        l.kind = NeuronKind::NILIF;
        l.nilif = p;
        return l;
    }

    // Applies the step to each element of the time sequence in order,
    // starting from a zero membrane.
    std::vector<Tensor> apply(const std::vector<Tensor>& xs) const {
        std::vector<Tensor> out;
        out.reserve(xs.size());
        if (xs.empty()) return out;
        NeuronState state = NeuronState::zeros(xs[0].shape());
        for (const Tensor& x : xs) {
            if (kind == NeuronKind::TLIF) {
                auto [s, st] = tlif_step(tlif, alpha, state, x);
                out.push_back(std::move(s));
                state = std::move(st);
            } else {
                auto [s, st] = nilif_step(nilif, state, x);
                out.push_back(std::move(s));
                state = std::move(st);
            }
        }
        return out;
    }
};

// Folds a neuron step over axis 0 of a stacked [T, ...] tensor, threading
// state from a zero start; output stacks the per-step spikes.
inline Tensor run_sequence(const SpikingLayer& layer, const Tensor& xs) {
    if (xs.ndim() < 1) throw DimError("run_sequence: input must have a leading time axis");
    if (xs.dim(0) == 0) return Tensor::zeros(xs.shape());
    auto steps = unstack_time(xs);
    auto spikes = layer.apply(steps);
    Tensor out = stack_time(spikes);
    out.domain() = spikes[0].domain();
    return out;
}

} // namespace wtaspike
