#pragma once

// Blockwise mask sampling and the mask/random/keep corruption policy.
//
// The sampler targets a 15% masking budget over usable (non-special,
// non-pad) tokens. Each step is a single token 60% of the time and a
// contiguous 2-6 block 40% of the time. The block length is drawn first and
// the position is then resampled until the span is free, so accepted step
// lengths keep the drawn distribution instead of being skewed by placement
// rejections; the length is redrawn only when no valid placement exists.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pmlm/common.hpp"
#include "pmlm/corpus.hpp"
#include "pmlm/rng.hpp"
#include "pmlm/vocab.hpp"

namespace pmlm {

struct MaskStep {
    int begin = 0;  // first masked position (index into the packed input)
    int len = 0;    // contiguous run length, 1..6

    int end() const { return begin + len; }
};

struct FactorizationOrder {
    std::vector<MaskStep> steps;  // in sampled (= factorization) order

    int num_steps() const { return static_cast<int>(steps.size()); }

    int masked_count() const {
        int n = 0;
        for (const auto& s : steps) n += s.len;
        return n;
    }

    std::vector<int> all_positions() const {
        std::vector<int> out;
        for (const auto& s : steps)
            for (int p = s.begin; p < s.end(); ++p) out.push_back(p);
        return out;
    }

    // 1-based step index owning position p, or 0.
    int step_of(int p) const {
        for (size_t i = 0; i < steps.size(); ++i)
            if (p >= steps[i].begin && p < steps[i].end()) return static_cast<int>(i) + 1;
        return 0;
    }
};

struct MaskSamplerOptions {
    double mask_ratio = 0.15;
    double block_prob = 0.4;  // 0 => all-singleton steps (autoregressive factorization)
    int block_min = 2;
    int block_max = 6;
};

inline FactorizationOrder sample_blockwise_mask(const PackedInput& x, Rng& rng,
                                                const MaskSamplerOptions& opts = {}) {
    const int n = x.length();
    std::vector<bool> maskable(static_cast<size_t>(n));
    int usable = 0;
    for (int i = 0; i < n; ++i) {
        maskable[static_cast<size_t>(i)] = !Vocab::is_special(x.token_ids[static_cast<size_t>(i)]);
        usable += maskable[static_cast<size_t>(i)] ? 1 : 0;
    }
    require(usable >= 1, "no usable tokens to mask");

    // ceil(mask_ratio * usable)
    const int budget = static_cast<int>(std::ceil(opts.mask_ratio * usable));

    std::vector<bool> free_slot = maskable;
    const auto span_free = [&](int p, int l) {
        if (p < 0 || p + l > n) return false;
        for (int i = p; i < p + l; ++i)
            if (!free_slot[static_cast<size_t>(i)]) return false;
        return true;
    };
    const auto placement_exists = [&](int l) {
        int run = 0;
        for (int i = 0; i < n; ++i) {
            run = free_slot[static_cast<size_t>(i)] ? run + 1 : 0;
            if (run >= l) return true;
        }
        return false;
    };

    FactorizationOrder order;
    int total = 0;
    while (total < budget) {
        int l = 1;
        if (rng.uniform() < opts.block_prob) l = rng.rand_int(opts.block_min, opts.block_max);
        if (l > 1 && !placement_exists(l)) continue;  // redraw length; l=1 always placeable here

        int p = rng.rand_int(0, n - 1);
        int attempts = 0;
        while (!span_free(p, l)) {
            if (++attempts > 64) {
                // dense tail: enumerate valid placements and pick one uniformly
                std::vector<int> starts;
                for (int q = 0; q + l <= n; ++q)
                    if (span_free(q, l)) starts.push_back(q);
                p = starts[static_cast<size_t>(rng.rand_int(0, static_cast<int>(starts.size()) - 1))];
                break;
            }
            p = rng.rand_int(0, n - 1);
        }

        for (int i = p; i < p + l; ++i) free_slot[static_cast<size_t>(i)] = false;
        order.steps.push_back({p, l});
        total += l;
    }
    return order;
}

enum class CorruptAction : uint8_t { mask, random_token, keep };

struct CorruptionPolicy {
    double p_mask = 0.8;
    double p_random = 0.1;  // keep probability is the remainder
};

struct CorruptionPlan {
    std::vector<int> positions;  // flattened step order
    std::vector<CorruptAction> actions;
    std::vector<int> replacements;  // replacement ids where action == random_token, else -1

    int index_of(int pos) const {
        for (size_t i = 0; i < positions.size(); ++i)
            if (positions[i] == pos) return static_cast<int>(i);
        return -1;
    }

    // Token id occupying the conventional-mask slot at `pos`.
    int slot_token(int pos, int original) const {
        const int i = index_of(pos);
        require(i >= 0, "position not in corruption plan: " + std::to_string(pos));
        switch (actions[static_cast<size_t>(i)]) {
            case CorruptAction::mask: return kMaskId;
            case CorruptAction::random_token: return replacements[static_cast<size_t>(i)];
            case CorruptAction::keep: return original;
        }
        return kMaskId;
    }
};

inline CorruptionPlan plan_corruption(const FactorizationOrder& order, const Vocab& vocab, Rng& rng,
                                      const CorruptionPolicy& policy = {}) {
    CorruptionPlan plan;
    const int non_special = vocab.size() - kNumSpecials;
    for (const auto& step : order.steps) {
        for (int p = step.begin; p < step.end(); ++p) {
            const double u = rng.uniform();
            CorruptAction a = CorruptAction::keep;
            if (u < policy.p_mask) a = CorruptAction::mask;
            else if (u < policy.p_mask + policy.p_random) a = CorruptAction::random_token;
            int repl = -1;
            if (a == CorruptAction::random_token) {
                if (non_special <= 0) a = CorruptAction::mask;  // degenerate vocab
                else repl = kNumSpecials + rng.rand_int(0, non_special - 1);
            }
            plan.positions.push_back(p);
            plan.actions.push_back(a);
            plan.replacements.push_back(repl);
        }
    }
    return plan;
}

inline const char* to_string(CorruptAction a) {
    switch (a) {
        case CorruptAction::mask: return "mask";
        case CorruptAction::random_token: return "random";
        case CorruptAction::keep: return "keep";
    }
    return "?";
}

}  // namespace pmlm
