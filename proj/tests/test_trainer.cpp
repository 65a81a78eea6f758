#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pseg/config.hpp"
#include "pseg/settings.hpp"
#include "pseg/trainer.hpp"
#include "test_util.hpp"

using namespace pseg;

namespace {

TrainConfig tiny_config() {
    TrainConfig c;
    c.arch.width = 4;
    c.arch.head_width = 8;
    c.arch.embed_depth = 4;
    c.disc_width = 4;
    c.batch_size = 2;
    c.epochs = 2;
    c.steps_per_epoch = 2;
    c.align.min_pixels = 1;
    c.align.confidence_threshold = 0.2;
    return c;
}

LoadedDataset tiny_data() {
    SynthConfig s;
    s.source_count = 4;
    s.target_count = 4;
    s.test_count = 3;
    const auto ds = generate_dataset(s);
    LoadedDataset d{32, 5, ds.source, ds.target, ds.target_test};
    for (auto& t : d.target) t.label.reset();
    return d;
}

struct Batch {
    Tensor<double> xs, xt;
    std::vector<std::uint8_t> ys;
};

Batch tiny_batch() {
    const auto d = tiny_data();
    std::vector<DomainSample> s(d.source.begin(), d.source.begin() + 2), t(d.target.begin(), d.target.begin() + 2);
    return {image_batch<double>(s), image_batch<double>(t), label_batch(s)};
}

bool same_params(const ParameterSet<double>& a, const ParameterSet<double>& b) {
    if (a.size() != b.size()) return false;
    for (const auto& p : a) {
        const auto& q = b.at(p.name());
        if (!std::equal(p.data().begin(), p.data().end(), q.data().begin())) return false;
    }
    return true;
}

}  // namespace

TEST(TrainStep, RepeatableFromSameState) {
    const auto b = tiny_batch();
    auto s1 = make_train_state<double>(tiny_config());
    auto s2 = make_train_state<double>(tiny_config());
    for (int i = 0; i < 2; ++i) {
        EXPECT_EQ(train_step(s1, b.xs, b.ys, b.xt), train_step(s2, b.xs, b.ys, b.xt));
    }
    EXPECT_TRUE(same_params(s1.generator_params(), s2.generator_params()));
    EXPECT_TRUE(same_params(s1.discriminator_params(), s2.discriminator_params()));
}

TEST(TrainStep, OnlySourcePrototypesEnterDictionaries) {
    const auto b = tiny_batch();
    auto st = make_train_state<double>(tiny_config());
    const auto r = train_step(st, b.xs, b.ys, b.xt);
    EXPECT_GT(r.protos_s, 0u);
    EXPECT_EQ(st.dict_s.total(), r.protos_s);
    EXPECT_EQ(st.dict_t.total(), r.protos_s2t);
    FeatureDictionary<double> d(5, 4, 10);
    const Prototype<double> p{1, Tensor<double>::constant({4}, {1, 2, 3, 4}), ProtoDomain::t, 1};
    EXPECT_THROW(push_source_prototypes(d, {p}, ProtoDomain::s), std::logic_error);
    EXPECT_THROW(push_source_prototypes(d, {p}, ProtoDomain::t), std::logic_error);
    EXPECT_EQ(d.total(), 0u);
}

TEST(TrainStep, WarmupContributesZeroGradient) {
    auto cfg = tiny_config();
    cfg.instrument = true;
    const auto b = tiny_batch();
    auto st = make_train_state<double>(cfg);
    const auto r0 = train_step(st, b.xs, b.ys, b.xt);
    EXPECT_TRUE(r0.warmup);
    EXPECT_EQ(r0.lambda1, 0.0);
    EXPECT_EQ(r0.proposed_grad_norm, 0.0);
    EXPECT_EQ(r0.all, r0.base);
    EXPECT_GT(r0.sim_grad_norm, 0.0);
    EXPECT_GT(st.dict_s.total(), 0u);
    const auto r1 = train_step(st, b.xs, b.ys, b.xt);
    EXPECT_EQ(r1.proposed_grad_norm, 0.0);
    EXPECT_GT(r1.cl_grad_norm, 0.0);
    st.epoch = 1;
    const auto r2 = train_step(st, b.xs, b.ys, b.xt);
    EXPECT_FALSE(r2.warmup);
    EXPECT_GT(r2.proposed_grad_norm, 0.0);
    EXPECT_NE(r2.all, r2.base);
}

TEST(TrainStep, InstrumentationDoesNotChangeTheUpdate) {
    auto cfg = tiny_config();
    auto plain = make_train_state<double>(cfg);
    cfg.instrument = true;
    auto inst = make_train_state<double>(cfg);
    const auto b = tiny_batch();
    for (std::size_t e = 0; e < 2; ++e) {
        plain.epoch = inst.epoch = e;
        train_step(plain, b.xs, b.ys, b.xt);
        train_step(inst, b.xs, b.ys, b.xt);
    }
    EXPECT_TRUE(same_params(plain.generator_params(), inst.generator_params()));
}

TEST(TrainStep, DiscriminatorsFrozenBeforeStartEpoch) {
    auto cfg = tiny_config();
    cfg.disc_start_epoch = 1;
    auto st = make_train_state<double>(cfg);
    const auto d0 = st.discriminator_params();
    const auto g0 = st.generator_params();
    const auto b = tiny_batch();
    train_step(st, b.xs, b.ys, b.xt);
    EXPECT_TRUE(same_params(st.discriminator_params(), d0));
    EXPECT_FALSE(same_params(st.generator_params(), g0));
    st.epoch = 1;
    train_step(st, b.xs, b.ys, b.xt);
    EXPECT_FALSE(same_params(st.discriminator_params(), d0));
}

TEST(TrainStep, ZeroLambdasMatchBaselineWithoutInstrumentation) {
    auto cfg = tiny_config();
    cfg.weights.lambda1 = cfg.weights.lambda2 = 0;
    auto st = make_train_state<double>(cfg);
    const auto b = tiny_batch();
    st.epoch = 1;
    const auto r = train_step(st, b.xs, b.ys, b.xt);
    EXPECT_EQ(r.sim, 0.0);
    EXPECT_EQ(r.cl, 0.0);
    EXPECT_EQ(r.all, r.base);
    EXPECT_TRUE(std::isnan(r.proposed_grad_norm));
}

TEST(TrainStep, RejectsInconsistentBatches) {
    auto st = make_train_state<double>(tiny_config());
    const auto b = tiny_batch();
    EXPECT_THROW(train_step(st, b.xs, b.ys, Tensor<double>::full({2, 1, 16, 16}, 0.0)), ShapeError);
}

TEST(Inference, AveragedMapsAreDistributions) {
    auto st = make_train_state<double>(tiny_config());
    const auto b = tiny_batch();
    const auto r = infer(st, b.xt);
    const std::size_t N = 2, C = 5, P = 32 * 32;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < P; ++p) {
            double s = 0;
            for (std::size_t c = 0; c < C; ++c) s += r.probs[(n * C + c) * P + p];
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    EXPECT_FALSE(r.probs.requires_grad());
    EXPECT_EQ(r.labels.size(), N * P);
}

TEST(Inference, AgreeingPathsReturnThatPath) {
    std::mt19937_64 rng(4);
    auto logits = testutil::random_tensor<double>({2, 5, 4, 4}, rng);
    auto p = softmax_channel(logits);
    auto avg = average_probabilities(p, p);
    for (std::size_t i = 0; i < p.numel(); ++i) EXPECT_EQ(avg[i], p[i]);
    auto q = softmax_channel(testutil::random_tensor<double>({2, 5, 4, 4}, rng));
    auto mix = average_probabilities(p, q);
    for (std::size_t i = 0; i < p.numel(); ++i) EXPECT_DOUBLE_EQ(mix[i], 0.5 * (p[i] + q[i]));
    EXPECT_THROW(average_probabilities(p, softmax_channel(testutil::random_tensor<double>({1, 5, 4, 4}, rng))),
                 ShapeError);
}

TEST(Train, EndToEndOutputsAreDeterministic) {
    const auto data = tiny_data();
    const auto d1 = testutil::temp_dir("train1"), d2 = testutil::temp_dir("train2");
    auto cfg = tiny_config();
    const auto r1 = train<float>(cfg, data, d1, "[train]\n");
    const auto r2 = train<float>(cfg, data, d2, "[train]\n");
    for (const char* f : {"metrics.csv", "losses.svg", "history.csv", "config.txt"}) {
        ASSERT_TRUE(std::filesystem::exists(d1 / f)) << f;
        EXPECT_EQ(read_text(d1 / f), read_text(d2 / f)) << f;
    }
    EXPECT_TRUE(std::filesystem::exists(d1 / "checkpoint" / "params" / "manifest.txt"));
    EXPECT_EQ(r1.state.history.size(), 4u);
    EXPECT_EQ(r1.rows, r2.rows);
    const auto rows = parse_metrics_csv(read_text(d1 / "metrics.csv"));
    EXPECT_EQ(rows, r1.rows);
    // epochs 1 and 2, four classes plus avg each
    EXPECT_EQ(rows.size(), 10u);

    auto loaded = load_generators<float>(d1 / "checkpoint", cfg);
    const auto ev = evaluate(loaded.gs, loaded.gt, data.target_test, 2, cfg);
    EXPECT_EQ(summarize(ev.samples), std::vector<MetricRow>(r1.rows.begin() + 5, r1.rows.end()));
    std::filesystem::remove_all(d1);
    std::filesystem::remove_all(d2);
}

TEST(Train, RejectsMismatchedData) {
    auto data = tiny_data();
    auto cfg = tiny_config();
    cfg.image_size = 64;
    EXPECT_THROW(train<float>(cfg, data), std::invalid_argument);
    cfg = tiny_config();
    cfg.warmup_epochs = 2;
    EXPECT_THROW(train<float>(cfg, data), std::invalid_argument);
}

TEST(Ablation, CellsAndRanking) {
    const auto base = tiny_config();
    const auto loss = ablation_cells(AblationGrid::loss, base, 0.05, 0.02, {});
    ASSERT_EQ(loss.size(), 3u);
    EXPECT_EQ(loss[0].config.weights.lambda1, 0.0);
    EXPECT_EQ(loss[1].config.weights.lambda2, 0.0);
    EXPECT_EQ(loss[2].config.weights.lambda2, 0.02);
    const auto agg = ablation_cells(AblationGrid::aggregation, base, 0.05, 0.02, {});
    ASSERT_EQ(agg.size(), 3u);
    std::vector<AblationRow> rows(3);
    rows[0].setting = "a";
    rows[0].mean_dice = 0.5;
    rows[1].setting = "b";
    rows[1].mean_dice = 0.7;
    rows[2].setting = "c";
    rank_rows(rows);
    EXPECT_EQ(rows[0].rank, 2u);
    EXPECT_EQ(rows[1].rank, 1u);
    EXPECT_EQ(rows[2].rank, 3u);
    EXPECT_THROW(parse_grid("nope"), std::invalid_argument);
}

// ---------------------------------------------------------------- config

TEST(ConfigFile, EchoRoundTrips) {
    Config c;
    c.apply_override("train.lambda1=0.125");
    c.apply_override("dict.aggregation=mean_all");
    const Config back = parse_config(c.echo());
    EXPECT_EQ(back, c);
    EXPECT_EQ(back.get_double("train.lambda1"), 0.125);
    EXPECT_EQ(back.echo(), c.echo());
}

TEST(ConfigFile, DefaultsProduceValidSettings) {
    const Config c;
    const auto t = train_config(c);
    EXPECT_EQ(t.weights.lambda1, 0.05);
    EXPECT_EQ(t.resolved_dict_size(), 100u);
    EXPECT_EQ(t.resolved_topk(), 5u);
    const auto s = synth_config(c);
    EXPECT_EQ(s.source_count, 200u);
    EXPECT_EQ(ablation_settings(c).seeds, (std::vector<std::uint64_t>{1, 2, 3}));
}

TEST(ConfigFile, RejectsUnknownAndMalformed) {
    Config c;
    EXPECT_THROW(c.merge_text("[train]\nlambda3 = 1\n"), ConfigError);
    EXPECT_THROW(c.merge_text("[nope]\nx = 1\n"), ConfigError);
    EXPECT_THROW(c.merge_text("lambda1 = 1\n"), ConfigError);
    EXPECT_THROW(c.apply_override("train.lambda1"), ConfigError);
    EXPECT_THROW(c.apply_override("lambda1=2"), ConfigError);
    c.apply_override("train.epochs=abc");
    EXPECT_THROW(train_config(c), ConfigError);
    Config d;
    d.apply_override("train.warmup_epochs=40");
    EXPECT_THROW(train_config(d), ConfigError);
    Config e;
    e.apply_override("model.precision=f16");
    EXPECT_THROW(train_config(e), ConfigError);
}

TEST(ConfigFile, MergeOverridesDefaults) {
    Config c;
    c.merge_text("# comment\n[train]\nepochs = 3\n\n[dict]\nsize = 7\n");
    EXPECT_EQ(c.get_size("train.epochs"), 3u);
    EXPECT_EQ(train_config(c).resolved_dict_size(), 7u);
    EXPECT_EQ(c.get_double("train.lambda2"), 0.02);
}
