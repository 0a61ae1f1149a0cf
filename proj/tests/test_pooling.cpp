#include <gtest/gtest.h>

#include "support.hpp"

using namespace l3p;
using l3p::test::random_batch;
using l3p::test::tiny_config;

namespace {

Tensor hidden(std::size_t b, std::size_t s, std::size_t d, std::vector<double> v) {
    return Tensor(Shape{b, s, d}, std::move(v));
}

PoolingMask mask_for(std::vector<std::size_t> lengths, std::vector<std::size_t> instr, std::size_t seq) {
    return PoolingMask::build(lengths, instr, seq);
}

}  // namespace

TEST(Pooling, SingleTokenIsIdentity) {
    const Tensor h = hidden(1, 1, 3, {0.5, -2.0, 7.0});
    const Tensor out = weighted_mean_pool(h, mask_for({1}, {0}, 1));
    EXPECT_EQ(out[0], 0.5);
    EXPECT_EQ(out[1], -2.0);
    EXPECT_EQ(out[2], 7.0);
}

TEST(Pooling, HandEvaluatedThreeTokens) {
    const Tensor h = hidden(1, 3, 2, {1, 0, 0, 1, 1, 1});
    const Tensor out = weighted_mean_pool(h, mask_for({3}, {0}, 3));
    EXPECT_NEAR(out[0], 4.0 / 6.0, 1e-15);
    EXPECT_NEAR(out[1], 5.0 / 6.0, 1e-15);
}

TEST(Pooling, InstructionTokensExcluded) {
    // Two instruction rows then two content rows.
    const Tensor with = hidden(1, 4, 2, {9, 9, -9, 3, 1, 2, 3, 4});
    const Tensor alone = hidden(1, 2, 2, {1, 2, 3, 4});
    const Tensor a = weighted_mean_pool(with, mask_for({4}, {2}, 4));
    const Tensor b = weighted_mean_pool(alone, mask_for({2}, {0}, 2));
    EXPECT_TRUE(a == b);
    EXPECT_NEAR(a[0], (1 * 1 + 2 * 3) / 3.0, 1e-15);
}

TEST(Pooling, WeightsNormalizedAndIncreasing) {
    const PoolingMask m = mask_for({7, 3, 5}, {2, 0, 4}, 7);
    const Tensor w = m.weights();
    for (std::size_t b = 0; b < 3; ++b) {
        double total = 0.0, prev = 0.0;
        for (std::size_t s = 0; s < 7; ++s) {
            const double x = w[b * 7 + s];
            total += x;
            if (m.keep[b * 7 + s]) {
                EXPECT_GT(x, prev);
                prev = x;
            } else {
                EXPECT_EQ(x, 0.0);
            }
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
    // Ranks are contiguous from 1.
    EXPECT_EQ(m.rank[0 * 7 + 2], 1u);
    EXPECT_EQ(m.rank[0 * 7 + 6], 5u);
    EXPECT_EQ(m.rank[2 * 7 + 4], 1u);
}

TEST(Pooling, AllMaskedIsAnError) {
    EXPECT_THROW(mask_for({3}, {3}, 3), DataError);
    const Tensor h = hidden(1, 3, 1, {1, 2, 3});
    EXPECT_THROW(weighted_mean_pool(h, mask_for({2}, {0}, 2)), ShapeError);
}

TEST(Embed, PaddingInvariance) {
    const Transformer m = init_model(tiny_config(3, 2));
    const TokenBatch one{{4, 8, 15, 16}};
    const TokenBatch two{{4, 8, 15, 16}, {23, 4, 2, 8, 9, 10, 11, 12}};
    const Tensor a = embed(m, one, 1);
    const Tensor b = embed(m, two, 1);
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(a[c], b[c]);
}

TEST(Embed, IdenticalRows) {
    const Transformer m = init_model(tiny_config(2, 2));
    const Tensor e = embed(m, TokenBatch{{3, 5, 7}, {3, 5, 7}}, 0);
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(e[c], e[8 + c]);
}

TEST(Embed, PrunedLastLayerEqualsFullAtSameDepth) {
    const Transformer full = init_model(tiny_config(5, 3));
    Rng rng(5);
    const TokenBatch batch = random_batch(rng, 4, 40, 3, 8);
    const std::vector<std::size_t> lens{1, 2, 0, 1};
    for (std::size_t k = 1; k <= 5; ++k) {
        const auto pruned = prune_layers(full, PruneSpec{PruneLayers{k}, "t"}).first;
        EXPECT_TRUE(embed(pruned, batch, lens) == embed(full, batch, lens, k)) << k;
    }
}

TEST(Embed, LayerOutOfRange) {
    const Transformer m = init_model(tiny_config(3));
    EXPECT_THROW(embed(m, TokenBatch{{3, 4}}, 0, 0), UsageError);
    EXPECT_THROW(embed(m, TokenBatch{{3, 4}}, 0, 4), UsageError);
}

TEST(Embed, InstructionExclusionWithoutMixing) {
    // In a zero-block model tokens do not interact, so an instruction of any
    // length with the same content yields the same embedding.
    Transformer m = init_model(tiny_config(1, 4));
    m = prune_layers(m, PruneSpec{PruneLayers{1}, "t"}).first;
    auto& b = m.layers[0];
    for (Tensor* t : {&b.wo, &b.w_down}) std::fill(t->data().begin(), t->data().end(), 0.0);
    const Tensor short_instr = embed(m, TokenBatch{{2, 20, 21, 22}}, 1);
    const Tensor long_instr = embed(m, TokenBatch{{2, 3, 4, 5, 20, 21, 22}}, 4);
    const Tensor none = embed(m, TokenBatch{{20, 21, 22}}, 0);
    EXPECT_TRUE(short_instr == long_instr);
    EXPECT_TRUE(short_instr == none);
}
