#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pseg/networks.hpp"
#include "pseg/nn.hpp"
#include "test_util.hpp"

using namespace pseg;
using Td = Tensor<double>;

TEST(Init, DeterministicInSeed) {
    const LayoutSpec spec{{"w", {4, 3}, 3, false}, {"b", {4}, 3, true}};
    auto a = init_parameters<double>(spec, 5), b = init_parameters<double>(spec, 5), c = init_parameters<double>(spec, 6);
    EXPECT_TRUE(std::equal(a.at("w").data().begin(), a.at("w").data().end(), b.at("w").data().begin()));
    EXPECT_FALSE(std::equal(a.at("w").data().begin(), a.at("w").data().end(), c.at("w").data().begin()));
    for (double v : a.at("b").data()) EXPECT_EQ(v, 0.0);
    EXPECT_TRUE(a.at("w").requires_grad());
    EXPECT_EQ(a.scalar_count(), 16u);
    EXPECT_THROW(init_parameters<double>({{"z", {0}, 1, false}}, 1), ShapeError);
}

TEST(ParameterSetOps, SubsetMergeAndDuplicates) {
    ParameterSet<double> p;
    p.insert(Td::parameter("a.x", {1}, {1}));
    p.insert(Td::parameter("b.y", {1}, {2}));
    EXPECT_EQ(p.subset("a.").size(), 1u);
    EXPECT_THROW(p.insert(Td::parameter("a.x", {1}, {3})), std::invalid_argument);
    EXPECT_THROW(p.at("c"), std::out_of_range);
    auto f = frozen(p);
    EXPECT_FALSE(f.at("a.x").requires_grad());
    EXPECT_EQ(f.at("b.y")[0], 2);
}

TEST(Adam, MatchesHandComputation) {
    ParameterSet<double> p;
    p.insert(Td::parameter("w", {2}, {1.0, -2.0}));
    AdamState<double> st;
    st.hyper = {0.1, 0.9, 0.999, 1e-8, 0.01};
    GradientMap<double> g{{"w", {0.5, 0.25}}};
    std::vector<double> theta{1.0, -2.0}, m(2), v(2);
    for (int t = 1; t <= 3; ++t) {
        auto r = adam_step(p, g, st);
        for (std::size_t i = 0; i < 2; ++i) {
            const double gi = g["w"][i] + 0.01 * theta[i];
            m[i] = 0.9 * m[i] + 0.1 * gi;
            v[i] = 0.999 * v[i] + 0.001 * gi * gi;
            const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
            theta[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
            EXPECT_NEAR(r.params.at("w")[i], theta[i], 1e-14);
        }
        EXPECT_EQ(r.state.t, static_cast<std::uint64_t>(t));
        p = r.params;
        st = r.state;
    }
}

TEST(Adam, IsPureAndValidatesGradients) {
    ParameterSet<double> p;
    p.insert(Td::parameter("w", {1}, {1.0}));
    AdamState<double> st;
    auto r = adam_step(p, {{"w", {1.0}}}, st);
    EXPECT_EQ(p.at("w")[0], 1.0);
    EXPECT_EQ(st.t, 0u);
    EXPECT_NE(r.params.at("w")[0], 1.0);
    EXPECT_THROW(adam_step(p, {}, st), std::invalid_argument);
    EXPECT_THROW(adam_step(p, {{"w", {1.0, 2.0}}}, st), ShapeError);
    EXPECT_THROW(adam_step(p, {{"w", {std::nan("")}}}, st), DomainError);
}

TEST(Checkpoint, RoundTripIsExact) {
    const auto dir = testutil::temp_dir("ckpt");
    auto m = make_seg_module<float>("gs.", Domain::source, SegArch{}, 3);
    save_checkpoint(dir, m.params);
    auto back = load_checkpoint<float>(dir);
    ASSERT_EQ(back.size(), m.params.size());
    for (const auto& p : m.params) {
        const auto& q = back.at(p.name());
        EXPECT_EQ(q.shape(), p.shape());
        EXPECT_TRUE(std::equal(p.data().begin(), p.data().end(), q.data().begin()));
    }
    std::filesystem::remove_all(dir);
    EXPECT_THROW(load_checkpoint<float>(dir), FormatError);
}

TEST(Networks, HeadsShareStructure) {
    const auto l = make_seg_layout(SegArch{});
    ASSERT_EQ(l.seg_head.size(), l.proj_head.size());
    for (std::size_t i = 0; i < l.seg_head.size(); ++i) {
        auto a = l.seg_head[i], b = l.proj_head[i];
        if (i + 1 == l.seg_head.size()) a.out = b.out;
        EXPECT_EQ(serialize(a), serialize(b));
    }
}

TEST(Networks, OutputShapes) {
    SegArch arch;
    arch.width = 4;
    arch.head_width = 8;
    arch.embed_depth = 6;
    auto m = make_seg_module<double>("gs.", Domain::source, arch, 1);
    std::mt19937_64 rng(1);
    auto x = testutil::random_tensor<double>({2, 1, 16, 16}, rng);
    auto o = forward_module(m, x);
    EXPECT_EQ(o.translated.shape(), (Shape{2, 1, 16, 16}));
    EXPECT_EQ(o.logits.shape(), (Shape{2, 5, 16, 16}));
    EXPECT_EQ(o.embedding.shape(), (Shape{2, 6, 16, 16}));
    for (double v : o.translated.data()) EXPECT_LE(std::abs(v), 1.0);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t p = 0; p < 256; ++p) {
            double s = 0;
            for (std::size_t c = 0; c < 5; ++c) s += o.probs[(n * 5 + c) * 256 + p];
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    auto d = make_discriminator<double>("dis.", DiscInput::image, 1, 2, 4);
    EXPECT_EQ(discriminate(d, x).shape(), (Shape{2, 1, 2, 2}));
    EXPECT_THROW(discriminate(d, o.probs), ShapeError);
    EXPECT_THROW(forward_module(m, testutil::random_tensor<double>({1, 1, 6, 6}, rng)), ShapeError);
}

TEST(Networks, GradientsReachEveryBranch) {
    SegArch arch;
    arch.width = 2;
    arch.head_width = 4;
    arch.embed_depth = 3;
    auto m = make_seg_module<double>("gs.", Domain::source, arch, 1);
    std::mt19937_64 rng(2);
    auto o = forward_module(m, testutil::random_tensor<double>({1, 1, 8, 8}, rng));
    auto g = backward(add(add(sum(o.translated), sum(o.logits)), sum(o.embedding)));
    for (const auto& p : m.params) EXPECT_TRUE(g.count(p.name())) << p.name();
    auto g2 = backward(sum(o.logits));
    EXPECT_FALSE(g2.count("gs.proj.h1.weight"));
    EXPECT_FALSE(g2.count("gs.tr.tr3.weight"));
}
