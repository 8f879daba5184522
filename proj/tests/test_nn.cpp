// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "rmot/nn.hpp"

using namespace rmot;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
    return t;
}

void set_identity(Linear& l) {
    l.fill(0.0, 0.0);
    for (std::size_t i = 0; i < std::min(l.in(), l.out()); ++i) l.weight.mutable_data()[i * l.out() + i] = 1.0;
}

PyramidLayout single_level(std::size_t h, std::size_t w) { return {LevelShape{h, w, 0}}; }

}  // namespace

TEST(Attention, SingleKeyGivesProjectedValue) {
    ParamStore store;
    Rng rng(1);
    AttentionParams p(store, "a", 8, 2, rng);
    const Tensor q = random_tensor({5, 8}, rng);
    const Tensor kv = random_tensor({1, 8}, rng);
    const Tensor out = attn(p, q, random_tensor({1, 8}, rng), kv);
    const Tensor expect = p.o(p.v(kv));
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out.at(r, c), expect.at(0, c), 1e-12);
}

TEST(Attention, IdenticalKeysAverageValues) {
    ParamStore store;
    Rng rng(2);
    AttentionParams p(store, "a", 8, 4, rng);
    const Tensor key = random_tensor({1, 8}, rng);
    const Tensor keys = concat_rows({key, key, key});
    const Tensor values = random_tensor({3, 8}, rng);
    const Tensor out = attn(p, random_tensor({2, 8}, rng), keys, values);
    const Tensor mean_v = scale(add(add(slice_rows(values, 0, 1), slice_rows(values, 1, 2)), slice_rows(values, 2, 3)), 1.0 / 3);
    const Tensor expect = p.o(p.v(mean_v));
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out.at(r, c), expect.at(0, c), 1e-12);
}

TEST(Attention, ConvexHullWithIdentityProjections) {
    ParamStore store;
    Rng rng(3);
    AttentionParams p(store, "a", 4, 1, rng);
    set_identity(p.v);
    set_identity(p.o);
    const Tensor values = random_tensor({6, 4}, rng);
    const Tensor out = attn(p, random_tensor({5, 4}, rng), random_tensor({6, 4}, rng), values);
    for (std::size_t r = 0; r < 5; ++r) {
        for (std::size_t c = 0; c < 4; ++c) {
            double lo = 1e9, hi = -1e9;
            for (std::size_t k = 0; k < 6; ++k) {
                lo = std::min(lo, values.at(k, c));
                hi = std::max(hi, values.at(k, c));
            }
            EXPECT_GE(out.at(r, c), lo - 1e-12);
            EXPECT_LE(out.at(r, c), hi + 1e-12);
        }
    }
}

TEST(Attention, PositionalTermsSkipValues) {
    ParamStore store;
    Rng rng(4);
    AttentionParams p(store, "a", 8, 2, rng);
    const Tensor kv = random_tensor({1, 8}, rng);
    // with one key the output is independent of any positional term
    const Tensor a = attn(p, random_tensor({3, 8}, rng), kv, kv);
    const Tensor b = attn(p, random_tensor({3, 8}, rng), kv, kv, random_tensor({3, 8}, rng), random_tensor({1, 8}, rng));
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Attention, DimensionErrors) {
    ParamStore store;
    Rng rng(5);
    AttentionParams p(store, "a", 8, 2, rng);
    EXPECT_THROW(attn(p, Tensor::zeros({2, 7}), Tensor::zeros({3, 8}), Tensor::zeros({3, 8})), DimensionError);
    EXPECT_THROW(attn(p, Tensor::zeros({2, 8}), Tensor::zeros({3, 8}), Tensor::zeros({2, 8})), DimensionError);
    EXPECT_THROW(AttentionParams(store, "b", 6, 4, rng), ContractError);
}

TEST(Attention, GradCheck) {
    ParamStore store;
    Rng rng(6);
    AttentionParams p(store, "a", 8, 2, rng);
    Tensor q = random_tensor({3, 8}, rng), k = random_tensor({4, 8}, rng), v = random_tensor({4, 8}, rng);
    const Tensor pq = random_tensor({3, 8}, rng), pk = random_tensor({4, 8}, rng);
    std::vector<Tensor> wrt = {q, k, v, p.q.weight, p.k.weight, p.v.weight, p.o.bias};
    EXPECT_LE(grad_check([&] { return attn(p, q, k, v, pq, pk); }, wrt), 1e-4);
}

TEST(DeformAttn, ZeroOffsetsSinglePointAtPixelCenter) {
    ParamStore store;
    Rng rng(7);
    DeformAttnParams p(store, "d", 8, 2, 1, 1, rng);
    p.offsets.fill(0.0, 0.0);
    const auto layout = single_level(4, 5);
    const Tensor values = random_tensor({20, 8}, rng);
    // pixel (row 2, col 3) has center ((3 + .5)/5, (2 + .5)/4)
    const Tensor ref = Tensor::matrix(1, 2, {3.5 / 5, 2.5 / 4});
    const Tensor out = ms_deform_attn(p, random_tensor({1, 8}, rng), ref, values, layout);
    const Tensor expect = p.output(p.value(slice_rows(values, 13, 14)));
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out.at(0, c), expect.at(0, c), 1e-12);
}

TEST(DeformAttn, UniformWeightsAverageSamples) {
    ParamStore store;
    Rng rng(8);
    DeformAttnParams p(store, "d", 4, 1, 1, 2, rng);
    p.offsets.fill(0.0, 0.0);
    // point 0 stays at the reference, point 1 moves one cell right
    p.offsets.bias.mutable_data()[2] = 1.0;
    const auto layout = single_level(3, 3);
    const Tensor values = random_tensor({9, 4}, rng);
    const Tensor ref = Tensor::matrix(1, 2, {0.5 / 3, 1.5 / 3});
    const auto full = ms_deform_attn_full(p, random_tensor({1, 4}, rng), ref, values, layout);
    EXPECT_NEAR(full.weights[0], 0.5, 1e-15);
    const Tensor mean_in = scale(add(slice_rows(values, 3, 4), slice_rows(values, 4, 5)), 0.5);
    const Tensor expect = p.output(p.value(mean_in));
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(full.out.at(0, c), expect.at(0, c), 1e-12);
}

TEST(DeformAttn, ConstantCellInterpolatesToCorner) {
    const LevelShape lv{4, 4, 0};
    std::vector<double> vals(16, 0.0);
    for (std::size_t r : {5u, 6u, 9u, 10u}) vals[r] = 2.5;  // cell between pixels (1,1)..(2,2)
    const Tensor value({16, 1}, vals);
    Rng rng(9);
    for (int trial = 0; trial < 10; ++trial) {
        const double u = (1.5 + rng.uniform()) / 4, v = (1.5 + rng.uniform()) / 4;
        const Tensor loc = Tensor::matrix(1, 2, {u, v});
        const Tensor out = deform_sample(value, {lv}, loc, Tensor::matrix(1, 1, {1.0}), 1, 1);
        EXPECT_NEAR(out.item(), 2.5, 1e-12);
    }
}

TEST(DeformAttn, OutsideSamplesAreZeroPadded) {
    const Tensor value({4, 1}, 1.0);
    const Tensor loc = Tensor::matrix(1, 2, {-0.5, 0.25});
    EXPECT_EQ(deform_sample(value, single_level(2, 2), loc, Tensor::matrix(1, 1, {1.0}), 1, 1).item(), 0.0);
}

TEST(DeformAttn, WeightsSumToOnePerHead) {
    ParamStore store;
    Rng rng(10);
    DeformAttnParams p(store, "d", 8, 2, 2, 3, rng);
    init_uniform_fan_in(p.weights.weight, 8, rng);
    const PyramidLayout layout = {LevelShape{4, 4, 0}, LevelShape{2, 2, 16}};
    const auto full = ms_deform_attn_full(p, random_tensor({5, 8}, rng), random_tensor({5, 2}, rng, 0, 1),
                                          random_tensor({20, 8}, rng), layout);
    for (std::size_t q = 0; q < 5; ++q) {
        for (std::size_t h = 0; h < 2; ++h) {
            double s = 0.0;
            for (std::size_t k = 0; k < 6; ++k) s += full.weights.at(q, h * 6 + k);
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(DeformAttn, ReferenceOutsideUnitSquareIsContractError) {
    ParamStore store;
    Rng rng(11);
    DeformAttnParams p(store, "d", 4, 1, 1, 1, rng);
    EXPECT_THROW(ms_deform_attn(p, Tensor::zeros({1, 4}), Tensor::matrix(1, 2, {1.2, 0.5}), Tensor::zeros({4, 4}),
                                single_level(2, 2)),
                 ContractError);
}

TEST(DeformAttn, GradCheck) {
    ParamStore store;
    Rng rng(12);
    DeformAttnParams p(store, "d", 8, 2, 2, 2, rng);
    init_uniform_fan_in(p.offsets.weight, 8, rng);
    init_uniform_fan_in(p.weights.weight, 8, rng);
    const PyramidLayout layout = {LevelShape{4, 4, 0}, LevelShape{2, 2, 16}};
    Tensor q = random_tensor({3, 8}, rng), v = random_tensor({20, 8}, rng);
    Tensor ref = random_tensor({3, 2}, rng, 0.1, 0.9);
    std::vector<Tensor> wrt = {q, v, ref, p.offsets.weight, p.weights.weight, p.value.weight};
    EXPECT_LE(grad_check([&] { return ms_deform_attn(p, q, ref, v, layout); }, wrt), 1e-4);
}

TEST(Ffn3, ZeroWeightsGiveZero) {
    ParamStore store;
    Rng rng(13);
    Mlp f = make_ffn3(store, "f", 8, 16, 4, rng);
    for (auto& l : f.layers) l.fill(0.0, 0.0);
    for (double v : f(random_tensor({3, 8}, rng)).to_vector()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(f.layers.size(), 3u);
}

TEST(Ffn3, IdentityMiddleCollapsesToOneLinearMap) {
    ParamStore store;
    Rng rng(14);
    Mlp f = make_ffn3(store, "f", 4, 4, 4, rng);
    set_identity(f.layers[0]);
    set_identity(f.layers[1]);
    // positive inputs pass ReLU unchanged
    const Tensor x = random_tensor({5, 4}, rng, 0.1, 1.0);
    const Tensor a = f(x);
    const Tensor b = f.layers[2](x);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-14);
}

TEST(Ffn3, GradCheck) {
    ParamStore store;
    Rng rng(15);
    Mlp f = make_ffn3(store, "f", 6, 10, 4, rng);
    Tensor x = random_tensor({4, 6}, rng);
    std::vector<Tensor> wrt = {x, f.layers[0].weight, f.layers[1].bias, f.layers[2].weight};
    EXPECT_LE(grad_check([&] { return sigmoid(f(x)); }, wrt), 1e-4);
}

TEST(SinusoidalPe, OriginIsSinZeroCosOne) {
    const Tensor pe = sinusoidal_pe2d(8, 8, 16);
    for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(pe.at(0, c), c % 2 == 0 ? 0.0 : 1.0);
}

TEST(SinusoidalPe, DeterministicAndDistinct) {
    const Tensor a = sinusoidal_pe2d(8, 8, 32), b = sinusoidal_pe2d(8, 8, 32);
    EXPECT_EQ(a.to_vector(), b.to_vector());
    for (std::size_t i = 0; i < 64; ++i) {
        for (std::size_t j = i + 1; j < 64; ++j) {
            double gap = 0.0;
            for (std::size_t c = 0; c < 32; ++c) gap = std::max(gap, std::fabs(a.at(i, c) - a.at(j, c)));
            EXPECT_GT(gap, 1e-6) << i << "," << j;
        }
    }
    EXPECT_THROW(sinusoidal_pe2d(2, 2, 6), ContractError);
}

TEST(PositionalEncoders, TemporalTableHasWindowSlots) {
    ParamStore store;
    Rng rng(16);
    PositionalEncoders pe(store, 8, 12, 5, rng);
    EXPECT_EQ(pe.window(), 5u);
    const Tensor rows = pe.ages({0, 1, 5});
    for (std::size_t c = 0; c < 8; ++c) {
        EXPECT_EQ(rows.at(0, c), 0.0);
        EXPECT_EQ(rows.at(1, c), pe.temporal.at(0, c));
        EXPECT_EQ(rows.at(2, c), pe.temporal.at(4, c));
    }
    EXPECT_THROW(pe.ages({6}), ContractError);
    EXPECT_THROW(pe.words(13), ContractError);
}
