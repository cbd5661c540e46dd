#include <gtest/gtest.h>

#include <array>
#include <set>
#include <sstream>

#include "pmlm/masking.hpp"
#include "pmlm/rng.hpp"
#include "pmlm/vocab.hpp"

using namespace pmlm;

namespace {

PackedInput synthetic_input(int total_len) {
    std::vector<int> s1(static_cast<size_t>(total_len - 3), kNumSpecials);
    return pack_pair(s1, {}, total_len);
}

Vocab small_vocab(int content = 24) {
    std::ostringstream os;
    for (int i = 0; i < content; ++i) os << "w" << i << " ";
    std::istringstream in(os.str());
    return Vocab::build(in, kNumSpecials + content, {});
}

}  // namespace

TEST(BlockwiseMask, Length512MeetsBudget) {
    // ceil(0.15 * 509 usable) = 77
    const PackedInput x = synthetic_input(512);
    Rng rng(1);
    const FactorizationOrder order = sample_blockwise_mask(x, rng);
    EXPECT_GE(order.masked_count(), 77);
}

TEST(BlockwiseMask, DeterministicGivenSeed) {
    const PackedInput x = synthetic_input(64);
    const Vocab v = small_vocab();
    for (uint64_t seed : {3ULL, 17ULL, 123456ULL}) {
        Rng r1(seed), r2(seed);
        const FactorizationOrder a = sample_blockwise_mask(x, r1);
        const FactorizationOrder b = sample_blockwise_mask(x, r2);
        ASSERT_EQ(a.num_steps(), b.num_steps());
        for (int i = 0; i < a.num_steps(); ++i) {
            EXPECT_EQ(a.steps[static_cast<size_t>(i)].begin, b.steps[static_cast<size_t>(i)].begin);
            EXPECT_EQ(a.steps[static_cast<size_t>(i)].len, b.steps[static_cast<size_t>(i)].len);
        }
        const CorruptionPlan pa = plan_corruption(a, v, r1);
        const CorruptionPlan pb = plan_corruption(b, v, r2);
        EXPECT_EQ(pa.positions, pb.positions);
        EXPECT_TRUE(pa.actions == pb.actions);
        EXPECT_EQ(pa.replacements, pb.replacements);
    }
}

TEST(BlockwiseMask, SingletonOnlyWhenBlockProbZero) {
    const PackedInput x = synthetic_input(128);
    MaskSamplerOptions opts;
    opts.block_prob = 0.0;  // autoregressive factorization
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const FactorizationOrder order = sample_blockwise_mask(x, rng, opts);
        for (const MaskStep& s : order.steps) EXPECT_EQ(s.len, 1);
        EXPECT_EQ(order.num_steps(), order.masked_count());
    }
}

// Monte-Carlo tally with an independent counter; expected frequencies are
// forced by the 0.4 block branch with uniform length in [2,6].
TEST(BlockwiseMask, BlockLengthFrequencies) {
    const PackedInput x = synthetic_input(512);
    std::array<int64_t, 7> counts{};
    int64_t total_steps = 0;
    int n = 0;
    while (total_steps < 100000) {
        Rng rng(Rng::derive(777, static_cast<uint64_t>(n++)));
        const FactorizationOrder order = sample_blockwise_mask(x, rng);
        for (const MaskStep& s : order.steps) {
            ++counts[static_cast<size_t>(s.len)];
            ++total_steps;
        }
    }
    EXPECT_NEAR(static_cast<double>(counts[1]) / total_steps, 0.60, 0.01);
    for (int l = 2; l <= 6; ++l)
        EXPECT_NEAR(static_cast<double>(counts[static_cast<size_t>(l)]) / total_steps, 0.08, 0.01);
}

// Alg. 1 overshoots by at most one block.
TEST(BlockwiseMask, MaskedFractionBand) {
    const PackedInput x = synthetic_input(512);
    const int usable = x.usable_length();
    for (int i = 0; i < 2000; ++i) {
        Rng rng(Rng::derive(31, static_cast<uint64_t>(i)));
        const FactorizationOrder order = sample_blockwise_mask(x, rng);
        const double ratio = static_cast<double>(order.masked_count()) / usable;
        EXPECT_GE(ratio, 0.15);
        EXPECT_LE(ratio, 0.17);
    }
}

TEST(BlockwiseMask, StepsDisjointContiguousAndOffSpecials) {
    for (uint64_t seed = 0; seed < 50; ++seed) {
        std::vector<int> s1(17, kNumSpecials), s2(9, kNumSpecials + 1);
        const PackedInput x = pack_pair(s1, s2, 64);
        Rng rng(seed);
        const FactorizationOrder order = sample_blockwise_mask(x, rng);
        std::set<int> seen;
        for (const MaskStep& s : order.steps) {
            EXPECT_GE(s.len, 1);
            EXPECT_LE(s.len, 6);
            for (int p = s.begin; p < s.end(); ++p) {
                EXPECT_TRUE(seen.insert(p).second) << "overlapping step at position " << p;
                EXPECT_FALSE(Vocab::is_special(x.token_ids[static_cast<size_t>(p)]))
                    << "masked a special at position " << p;
            }
        }
    }
}

TEST(BlockwiseMask, TinyInputStillMeetsBudget) {
    // pre: usable length >= 1
    const PackedInput x = synthetic_input(4);  // one usable token
    Rng rng(5);
    const FactorizationOrder order = sample_blockwise_mask(x, rng);
    EXPECT_GE(order.masked_count(), 1);
    PackedInput empty;
    empty.token_ids = {kSosId, kEosId, kEosId};
    empty.segment_ids = {0, 0, 1};
    Rng rng2(5);
    EXPECT_THROW(sample_blockwise_mask(empty, rng2), Error);
}

TEST(Corruption, AllMaskWhenPolicyForcesMaskBranch) {
    const PackedInput x = synthetic_input(64);
    const Vocab v = small_vocab();
    Rng rng(9);
    const FactorizationOrder order = sample_blockwise_mask(x, rng);
    const CorruptionPlan plan = plan_corruption(order, v, rng, {1.0, 0.0});
    for (const CorruptAction a : plan.actions) EXPECT_EQ(a, CorruptAction::mask);
    for (size_t i = 0; i < plan.positions.size(); ++i)
        EXPECT_EQ(plan.slot_token(plan.positions[i], 123), kMaskId);
}

// Monte-Carlo tally of 1e5 positions against the 0.8/0.1/0.1 policy.
TEST(Corruption, ActionFrequencies) {
    const PackedInput x = synthetic_input(512);
    const Vocab v = small_vocab();
    int64_t n_mask = 0, n_random = 0, n_keep = 0;
    int64_t total = 0;
    int i = 0;
    while (total < 100000) {
        Rng rng(Rng::derive(55, static_cast<uint64_t>(i++)));
        const FactorizationOrder order = sample_blockwise_mask(x, rng);
        const CorruptionPlan plan = plan_corruption(order, v, rng);
        for (const CorruptAction a : plan.actions) {
            n_mask += a == CorruptAction::mask;
            n_random += a == CorruptAction::random_token;
            n_keep += a == CorruptAction::keep;
            ++total;
        }
    }
    EXPECT_NEAR(static_cast<double>(n_mask) / total, 0.8, 0.01);
    EXPECT_NEAR(static_cast<double>(n_random) / total, 0.1, 0.01);
    EXPECT_NEAR(static_cast<double>(n_keep) / total, 0.1, 0.01);
}

TEST(Corruption, RandomReplacementsAreNonSpecial) {
    const PackedInput x = synthetic_input(256);
    const Vocab v = small_vocab();
    for (uint64_t seed = 0; seed < 30; ++seed) {
        Rng rng(seed);
        const FactorizationOrder order = sample_blockwise_mask(x, rng);
        const CorruptionPlan plan = plan_corruption(order, v, rng, {0.0, 1.0});
        for (size_t i = 0; i < plan.actions.size(); ++i) {
            ASSERT_EQ(plan.actions[i], CorruptAction::random_token);
            EXPECT_GE(plan.replacements[i], kNumSpecials);
            EXPECT_LT(plan.replacements[i], v.size());
        }
    }
}

TEST(Corruption, KeepBranchRetainsOriginalInSlot) {
    const PackedInput x = synthetic_input(32);
    const Vocab v = small_vocab();
    Rng rng(2);
    const FactorizationOrder order = sample_blockwise_mask(x, rng);
    const CorruptionPlan plan = plan_corruption(order, v, rng, {0.0, 0.0});  // all keep
    for (const int p : plan.positions) {
        const int original = x.token_ids[static_cast<size_t>(p)];
        EXPECT_EQ(plan.slot_token(p, original), original);
    }
}
