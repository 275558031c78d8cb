#pragma once

// Masked and causal language-modeling objectives.
//
// MLM: select round-half-up(ratio * N) positions per sequence uniformly
// without replacement; 80% become the mask token, 10% a uniform random
// regular token, 10% stay unchanged. Loss is the mean NLL over the selected
// positions only (multiply back |M| to recover the summed form).
//
// CLM: mean NLL of token t+1 under the logits at position t, for
// t = 0 .. N-2.

#include <cstdint>
#include <vector>

#include "wtaspike/rng.hpp"
#include "wtaspike/tensor.hpp"

namespace wtaspike {

struct MaskAction {
    enum Kind : uint8_t { MaskToken, RandomToken, Keep };
    int64_t position;
    Kind kind;
};

struct MaskingPlan {
    // per sequence in the batch: selected positions with their actions
    std::vector<std::vector<MaskAction>> actions;
    uint64_t seed = 0;
};

struct MlmMasked {
    std::vector<std::vector<int64_t>> tokens; // corrupted batch
    MaskingPlan plan;
};

// tokens: batch of equal-length sequences. mask_id replaces 80% of selected
// positions; random replacements draw uniformly from [0, num_regular).
inline MlmMasked mlm_mask(const std::vector<std::vector<int64_t>>& tokens, double ratio,
                          uint64_t seed, int64_t mask_id, int64_t num_regular) {
    if (ratio < 0.0 || ratio > 1.0)
        throw InputError("mlm_mask: ratio " + std::to_string(ratio) + " outside [0, 1]");
    MlmMasked out;
    out.tokens = tokens;
    out.plan.seed = seed;
    SplitMix64 rng(seed);
    for (size_t b = 0; b < tokens.size(); ++b) {
        size_t n = tokens[b].size();
        size_t m = static_cast<size_t>(std::floor(ratio * static_cast<double>(n) + 0.5));
        auto selected = sample_without_replacement(rng, n, m);
        std::vector<MaskAction> acts;
        acts.reserve(selected.size());
        for (size_t pos : selected) {
            double u = rng.next_double();
            MaskAction a{static_cast<int64_t>(pos), MaskAction::MaskToken};
            if (u < 0.8) {
                out.tokens[b][pos] = mask_id;
            } else if (u < 0.9) {
                a.kind = MaskAction::RandomToken;
                out.tokens[b][pos] = static_cast<int64_t>(rng.next_below(
                    static_cast<uint64_t>(num_regular)));
            } else {
                a.kind = MaskAction::Keep;
            }
            acts.push_back(a);
        }
        out.plan.actions.push_back(std::move(acts));
    }
    return out;
}

// Mean NLL of the original tokens at the masked positions. Positions outside
// the plan never contribute. Empty plans yield zero loss and set the flag.
inline Tensor mlm_loss(const Tensor& logits, const std::vector<std::vector<int64_t>>& original,
                       const MaskingPlan& plan, bool* empty_mask_flag = nullptr) {
    if (logits.ndim() != 3)
        throw DimError("mlm_loss: logits must be [B, N, V], got " + shape_str(logits.shape()));
    int64_t batch = logits.dim(0), n = logits.dim(1);
    if (static_cast<int64_t>(original.size()) != batch ||
        static_cast<int64_t>(plan.actions.size()) != batch)
        throw DimError("mlm_loss: batch size mismatch");
    std::vector<int64_t> targets(static_cast<size_t>(batch * n), 0);
    std::vector<uint8_t> mask(static_cast<size_t>(batch * n), 0);
    for (int64_t b = 0; b < batch; ++b) {
        for (const MaskAction& a : plan.actions[static_cast<size_t>(b)]) {
            if (a.position < 0 || a.position >= n)
                throw InputError("mlm_loss: plan position " + std::to_string(a.position) +
                                 " outside [0, " + std::to_string(n) + ")");
            size_t flat = static_cast<size_t>(b * n + a.position);
            targets[flat] = original[static_cast<size_t>(b)][static_cast<size_t>(a.position)];
            mask[flat] = 1;
        }
    }
    return cross_entropy_from_logits(logits, targets, mask, empty_mask_flag);
}

// Mean NLL of token t+1 from logits at position t, over t = 0 .. N-2.
inline Tensor clm_loss(const Tensor& logits, const std::vector<std::vector<int64_t>>& tokens) {
    if (logits.ndim() != 3)
        throw DimError("clm_loss: logits must be [B, N, V], got " + shape_str(logits.shape()));
    int64_t batch = logits.dim(0), n = logits.dim(1);
    if (n < 2) throw InputError("clm_loss: sequence length must be >= 2");
    if (static_cast<int64_t>(tokens.size()) != batch)
        throw DimError("clm_loss: batch size mismatch");
    std::vector<int64_t> targets(static_cast<size_t>(batch * n), 0);
    std::vector<uint8_t> mask(static_cast<size_t>(batch * n), 0);
    for (int64_t b = 0; b < batch; ++b) {
        if (static_cast<int64_t>(tokens[static_cast<size_t>(b)].size()) != n)
            throw DimError("clm_loss: token row length mismatch");
        for (int64_t t = 0; t + 1 < n; ++t) {
            size_t flat = static_cast<size_t>(b * n + t);
            targets[flat] = tokens[static_cast<size_t>(b)][static_cast<size_t>(t + 1)];
            mask[flat] = 1;
        }
    }
    return cross_entropy_from_logits(logits, targets, mask);
}

} // namespace wtaspike
