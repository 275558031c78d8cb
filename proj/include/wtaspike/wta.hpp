#pragma once

// Winner-Take-All layer family: Hard WTA, Top-K WTA, Sparsemax, plus the
// temperature softmax and the softmax surrogate backward that trains the
// binarized variants.
//
// Vector-level functions here are pure; attention.hpp wraps them row-wise
// into a recorded tensor op with mask handling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "wtaspike/tensor.hpp"

namespace wtaspike {

struct WTAKind {
    enum Variant : uint8_t { Hard, TopK, Sparsemax };
    Variant variant = Hard;
    int k = 1;                    // Top-K only
    bool binarize_support = false; // Sparsemax only: emit the 0/1 support instead of probabilities
    double surrogate_tau = 1.0;    // temperature of the backward softmax

    static WTAKind hard(double tau = 1.0) { return {Hard, 1, false, tau}; }
    static WTAKind topk(int k, double tau = 1.0) { return {TopK, k, false, tau}; }
    static WTAKind sparsemax(bool binarize = false, double tau = 1.0) {
        return {Sparsemax, 1, binarize, tau};
    }

    std::string to_string() const {
        switch (variant) {
            case Hard: return "hard";
            case TopK: return "topk:" + std::to_string(k);
            case Sparsemax: return binarize_support ? "sparsemax:binary" : "sparsemax";
        }
        return "?";
    }
};

// ---------------------------------------------------------------------------
// Hard WTA: one-hot at the argmax. Ties break to the lowest index. Entries
// with allowed[i] == 0 never win; masking is candidate exclusion, not -inf
// arithmetic, so no NaN can enter the spike path.
// ---------------------------------------------------------------------------
inline size_t hard_wta_index(std::span<const double> a, std::span<const uint8_t> allowed = {}) {
    if (a.empty()) throw InputError("hard_wta: empty input");
    bool found = false;
    size_t best = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        if (!allowed.empty() && !allowed[i]) continue;
        if (!found || a[i] > a[best]) {
            best = i;
            found = true;
        }
    }
    if (!found) throw ContractError("hard_wta: all entries masked");
    return best;
}

inline std::vector<double> hard_wta(std::span<const double> a,
                                    std::span<const uint8_t> allowed = {}) {
    std::vector<double> y(a.size(), 0.0);
    y[hard_wta_index(a, allowed)] = 1.0;
    return y;
}

// ---------------------------------------------------------------------------
// Top-K WTA: k-hot at the k largest entries; ties at the cut break to the
// lowest index. Emits min(k, candidate count) ones.
// ---------------------------------------------------------------------------
inline std::vector<double> topk_wta(std::span<const double> a, int k,
                                    std::span<const uint8_t> allowed = {}) {
    if (a.empty()) throw InputError("topk_wta: empty input");
    if (k < 1 || k > static_cast<int>(a.size()))
        throw InputError("topk_wta: k=" + std::to_string(k) + " out of range [1, " +
                         std::to_string(a.size()) + "]");
    std::vector<size_t> cand;
    cand.reserve(a.size());
    for (size_t i = 0; i < a.size(); ++i)
        if (allowed.empty() || allowed[i]) cand.push_back(i);
    // stable sort by value desc keeps lower indices first among ties
    std::stable_sort(cand.begin(), cand.end(),
                     [&](size_t i, size_t j) { return a[i] > a[j]; });
    std::vector<double> y(a.size(), 0.0);
    size_t take = std::min<size_t>(static_cast<size_t>(k), cand.size());
    for (size_t i = 0; i < take; ++i) y[cand[i]] = 1.0;
    return y;
}

// ---------------------------------------------------------------------------
// Sparsemax: Euclidean projection onto the probability simplex via the
// closed-form threshold over sorted coordinates,
//   k(a) = max{ k : 1 + k*a_(k) > sum_{j<=k} a_(j) },
//   tau  = (sum_{j<=k(a)} a_(j) - 1) / k(a),
//   y_i  = max(a_i - tau, 0).
// ---------------------------------------------------------------------------
struct SparsemaxThreshold {
    double tau = 0.0;
    std::vector<size_t> support; // indices with a_i > tau, ascending
};

inline SparsemaxThreshold sparsemax_threshold(std::span<const double> a) {
    if (a.empty()) throw InputError("sparsemax_threshold: empty input");
    std::vector<double> sorted(a.begin(), a.end());
    std::sort(sorted.begin(), sorted.end(), std::greater<double>());
    double cum = 0.0;
    double tau = 0.0;
    for (size_t k = 1; k <= sorted.size(); ++k) {
        cum += sorted[k - 1];
        // the qualifying set is a prefix of the sorted order; stop at the first failure
        if (1.0 + static_cast<double>(k) * sorted[k - 1] <= cum) break;
        tau = (cum - 1.0) / static_cast<double>(k);
    }
    SparsemaxThreshold out;
    out.tau = tau;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i] > out.tau) out.support.push_back(i);
    return out;
}

inline std::vector<double> sparsemax(std::span<const double> a) {
    auto th = sparsemax_threshold(a);
    std::vector<double> y(a.size(), 0.0);
    for (size_t i = 0; i < a.size(); ++i) y[i] = std::max(a[i] - th.tau, 0.0);
    return y;
}

// ---------------------------------------------------------------------------
// Temperature softmax, stable: p_i = exp((a_i - max)/tau) / sum.
// tau = 1 is standard softmax; tau -> 0+ converges to hard WTA.
// ---------------------------------------------------------------------------
inline std::vector<double> softmax_tau(std::span<const double> a, double tau,
                                       std::span<const uint8_t> allowed = {}) {
    if (tau <= 0.0) throw InputError("softmax_tau: tau must be positive");
    if (a.empty()) throw InputError("softmax_tau: empty input");
    double mx = -std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < a.size(); ++i)
        if ((allowed.empty() || allowed[i]) && a[i] > mx) mx = a[i];
    if (mx == -std::numeric_limits<double>::infinity())
        throw ContractError("softmax_tau: all entries masked");
    std::vector<double> p(a.size(), 0.0);
    double z = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        if (!allowed.empty() && !allowed[i]) continue;
        p[i] = std::exp((a[i] - mx) / tau);
        z += p[i];
    }
    for (double& v : p) v /= z;
    return p;
}

// ---------------------------------------------------------------------------
// Surrogate backward for the binarized WTA variants (hard / top-k / binarized
// sparsemax): the Jacobian-vector product of softmax(a / tau_sg),
//   J^T u = (p . u - p (p^T u)) / tau_sg,   p = softmax(a / tau_sg).
// The 1/tau_sg factor makes the rule the exact derivative of the twin for
// every temperature (it is 1 at the default tau_sg = 1).
// Masked entries carry zero probability and receive zero gradient.
// ---------------------------------------------------------------------------
inline std::vector<double> wta_backward(std::span<const double> a,
                                        std::span<const double> upstream, double tau_sg,
                                        std::span<const uint8_t> allowed = {}) {
    if (a.size() != upstream.size())
        throw DimError("wta_backward: size mismatch " + std::to_string(a.size()) + " vs " +
                       std::to_string(upstream.size()));
    std::vector<double> p = softmax_tau(a, tau_sg, allowed);
    double dot = 0.0;
    for (size_t i = 0; i < p.size(); ++i) dot += p[i] * upstream[i];
    std::vector<double> g(a.size(), 0.0);
    for (size_t i = 0; i < a.size(); ++i) g[i] = p[i] * (upstream[i] - dot) / tau_sg;
    return g;
}

// Exact sparsemax Jacobian-vector product (used when sparsemax outputs its
// real-valued probabilities): J^T u = 1_S . (u - mean_S(u)).
inline std::vector<double> sparsemax_backward(std::span<const double> a,
                                              std::span<const double> upstream,
                                              std::span<const uint8_t> allowed = {}) {
    std::vector<double> masked(a.begin(), a.end());
    // candidate exclusion: drop masked entries far below the rest
    if (!allowed.empty()) {
        double mn = *std::min_element(a.begin(), a.end());
        for (size_t i = 0; i < a.size(); ++i)
            if (!allowed[i]) masked[i] = mn - 1e6;
    }
    auto th = sparsemax_threshold(masked);
    double mean_u = 0.0;
    for (size_t i : th.support) mean_u += upstream[i];
    mean_u /= static_cast<double>(th.support.size());
    std::vector<double> g(a.size(), 0.0);
    for (size_t i : th.support) g[i] = upstream[i] - mean_u;
    return g;
}

// ---------------------------------------------------------------------------
// The forward the WTA layer presents to attention: one row, candidate mask,
// kind-dispatched.
// ---------------------------------------------------------------------------
inline std::vector<double> wta_forward_row(std::span<const double> a, const WTAKind& kind,
                                           std::span<const uint8_t> allowed = {}) {
    switch (kind.variant) {
        case WTAKind::Hard: return hard_wta(a, allowed);
        case WTAKind::TopK: {
            int k = std::min<int>(kind.k, static_cast<int>(a.size()));
            return topk_wta(a, k, allowed);
        }
        case WTAKind::Sparsemax: {
            std::vector<double> masked(a.begin(), a.end());
            if (!allowed.empty()) {
                double mn = *std::min_element(a.begin(), a.end());
                for (size_t i = 0; i < a.size(); ++i)
                    if (!allowed[i]) masked[i] = mn - 1e6;
            }
            auto y = sparsemax(masked);
            if (!allowed.empty())
                for (size_t i = 0; i < y.size(); ++i)
                    if (!allowed[i]) y[i] = 0.0;
            if (kind.binarize_support) {
                for (double& v : y) v = v > 0.0 ? 1.0 : 0.0;
            }
            return y;
        }
    }
    throw ContractError("wta_forward_row: bad variant");
}

} // namespace wtaspike
