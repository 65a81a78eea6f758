#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "oracles.hpp"
#include "pseg/data_synth.hpp"
#include "pseg/metrics.hpp"
#include "pseg/report.hpp"
#include "test_util.hpp"

using namespace pseg;

namespace {

SynthConfig small_config() {
    SynthConfig c;
    c.source_count = 6;
    c.target_count = 5;
    c.test_count = 3;
    return c;
}

double masked_mean(const DomainSample& s, bool foreground) {
    double acc = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < s.image.size(); ++i)
        if (((*s.label)[i] != 0) == foreground) {
            acc += s.image[i];
            ++n;
        }
    return acc / static_cast<double>(n);
}

}  // namespace

// ---------------------------------------------------------------- synthesis

TEST(Synth, DatasetIsDeterministic) {
    const auto a = generate_dataset(small_config());
    const auto b = generate_dataset(small_config());
    ASSERT_EQ(a.source.size(), 6u);
    ASSERT_EQ(a.target.size(), 5u);
    ASSERT_EQ(a.target_test.size(), 3u);
    for (std::size_t i = 0; i < a.source.size(); ++i) {
        EXPECT_EQ(a.source[i].image, b.source[i].image);
        EXPECT_EQ(a.source[i].label, b.source[i].label);
    }
    auto c = small_config();
    c.seed = 8;
    EXPECT_NE(generate_dataset(c).source[0].image, a.source[0].image);
}

TEST(Synth, TestSlicesContinueTargetSequence) {
    const auto ds = generate_dataset(small_config());
    const auto s = generate_sample(small_config(), Domain::target, 5);
    EXPECT_EQ(ds.target_test[0].image, s.image);
    EXPECT_EQ(ds.target_test[0].id, "tgt_0005");
}

TEST(Synth, ImagesInRangeAndAllClassesPresent) {
    const auto ds = generate_dataset(small_config());
    for (const auto* group : {&ds.source, &ds.target, &ds.target_test})
        for (const auto& s : *group) {
            EXPECT_EQ(s.image.size(), 32u * 32u);
            for (float v : s.image) {
                EXPECT_GE(v, -1.0f);
                EXPECT_LE(v, 1.0f);
            }
            std::set<int> classes((*s.label).begin(), (*s.label).end());
            EXPECT_EQ(classes, (std::set<int>{0, 1, 2, 3, 4}));
            EXPECT_EQ((*s.label)[0], 0);
        }
}

TEST(Synth, DomainShiftInvertsContrast) {
    const auto ds = generate_dataset(small_config());
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_GT(masked_mean(ds.source[i], true), masked_mean(ds.source[i], false));
        EXPECT_LT(masked_mean(ds.target[i], true), masked_mean(ds.target[i], false));
    }
}

TEST(Synth, RawIntensityFollowsProfile) {
    const auto c = small_config();
    std::mt19937_64 rng(3);
    auto g = sample_geometry(c, rng);
    auto labels = render_labels(g, 32);
    IntensityProfile p{{0.1, 0.3, 0.5, 0.7, 0.9}, 0.02, 0.0};
    auto raw = render_raw(labels, 32, p, rng);
    std::vector<double> sum(5), n(5);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        sum[labels[i]] += raw[i];
        n[labels[i]] += 1;
    }
    for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(sum[k] / n[k], p.mean[k], 0.02);
}

TEST(Synth, InvalidConfigRejected) {
    auto c = small_config();
    c.image_size = 2;
    EXPECT_THROW(validate(c), std::invalid_argument);
    c = small_config();
    c.lv_radius_min = 0.3;
    EXPECT_THROW(validate(c), std::invalid_argument);
    c = small_config();
    c.target.mean.pop_back();
    EXPECT_THROW(validate(c), std::invalid_argument);
}

TEST(Preprocess, TwoValuesMapToExtremes) {
    EXPECT_EQ(preprocess(std::vector<double>{0, 2}), (std::vector<double>{-1, 1}));
    EXPECT_EQ(preprocess(std::vector<double>{5, 5, 5}), (std::vector<double>{0, 0, 0}));
}

TEST(Preprocess, RangeAndOrderProperty) {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> n(3, 2);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> v(2 + static_cast<std::size_t>(trial));
        for (auto& x : v) x = n(rng);
        const auto p = preprocess(v);
        EXPECT_EQ(*std::min_element(p.begin(), p.end()), -1.0);
        EXPECT_EQ(*std::max_element(p.begin(), p.end()), 1.0);
        for (std::size_t i = 1; i < v.size(); ++i) EXPECT_EQ(v[i] < v[0], p[i] < p[0]);
    }
}

TEST(Augment, IdentityReproducesInput) {
    const auto s = generate_sample(small_config(), Domain::source, 0);
    const auto a = apply_affine(s, AffineParams{});
    EXPECT_EQ(a.image, s.image);
    EXPECT_EQ(a.label, s.label);
}

TEST(Augment, LabelsStaySubsetAndAligned) {
    const auto c = small_config();
    std::mt19937_64 rng(12);
    for (std::size_t i = 0; i < 20; ++i) {
        const auto s = generate_sample(c, Domain::source, i % 6);
        const auto a = augment(s, rng);
        std::set<int> before((*s.label).begin(), (*s.label).end()), after((*a.label).begin(), (*a.label).end());
        EXPECT_TRUE(std::includes(before.begin(), before.end(), after.begin(), after.end()));
        for (float v : a.image) {
            EXPECT_GE(v, -1.0f);
            EXPECT_LE(v, 1.0f);
        }
        // Bright source structures must land under their warped labels.
        EXPECT_GT(masked_mean(a, true), masked_mean(a, false) + 0.5);
    }
}

// ---------------------------------------------------------------- dataset I/O

TEST(DatasetIo, RoundTrip) {
    const auto dir = testutil::temp_dir("ds");
    const auto ds = generate_dataset(small_config());
    write_dataset(dir, ds, "[data]\nseed = 7");
    const auto back = load_dataset(dir);
    EXPECT_EQ(back.image_size, 32u);
    EXPECT_EQ(back.num_classes, 5u);
    ASSERT_EQ(back.source.size(), ds.source.size());
    ASSERT_EQ(back.target.size(), ds.target.size());
    ASSERT_EQ(back.target_test.size(), ds.target_test.size());
    EXPECT_EQ(back.source[2].image, ds.source[2].image);
    EXPECT_EQ(back.source[2].label, ds.source[2].label);
    EXPECT_FALSE(back.target[0].label.has_value());
    EXPECT_EQ(back.target_test[1].label, ds.target_test[1].label);
    EXPECT_EQ(back.target_test[1].image, ds.target_test[1].image);
    std::filesystem::remove_all(dir);
}

TEST(DatasetIo, CorruptionDetected) {
    const auto dir = testutil::temp_dir("dsbad");
    write_dataset(dir, generate_dataset(small_config()));
    {
        std::fstream f(dir / "source" / "img_0001.pseg", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("XXXX", 4);
    }
    EXPECT_THROW(load_dataset(dir), FormatError);
    std::filesystem::remove(dir / "manifest.txt");
    EXPECT_THROW(load_dataset(dir), FormatError);
    std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------- metrics

TEST(Dice, KnownValues) {
    BinaryMask a{1, 4, {1, 1, 0, 0}}, b{1, 4, {0, 1, 1, 0}}, e{1, 4, {0, 0, 0, 0}};
    EXPECT_DOUBLE_EQ(*dice(a, b), 0.5);
    EXPECT_DOUBLE_EQ(*dice(a, a), 1.0);
    EXPECT_DOUBLE_EQ(*dice(a, e), 0.0);
    EXPECT_FALSE(dice(e, e).has_value());
    BinaryMask c{2, 2, {1, 1, 1, 0}}, d{2, 2, {1, 0, 0, 0}};
    EXPECT_DOUBLE_EQ(*dice(c, d), 2.0 / 4.0);
    BinaryMask f{2, 3, {1, 1, 1, 0, 0, 0}}, g{2, 3, {0, 1, 1, 1, 0, 0}};
    EXPECT_DOUBLE_EQ(*dice(f, g), 4.0 / 6.0);
    EXPECT_THROW(dice(a, c), ShapeError);
}

TEST(Asd, KnownValues) {
    BinaryMask a{1, 5, {1, 0, 0, 0, 0}}, b{1, 5, {0, 0, 0, 1, 0}};
    EXPECT_DOUBLE_EQ(*asd(a, b), 3.0);
    EXPECT_DOUBLE_EQ(*asd(a, a), 0.0);
    BinaryMask e{1, 5, {0, 0, 0, 0, 0}};
    EXPECT_FALSE(asd(a, e).has_value());
}

TEST(Metrics, MatchBruteForceOracles) {
    std::mt19937_64 rng(77);
    std::uniform_int_distribution<std::size_t> side(1, 16);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t h = side(rng), w = side(rng);
        const auto a = oracle::random_mask(rng, h, w), b = oracle::random_mask(rng, h, w);
        EXPECT_EQ(dice(a, b), oracle::dice(a, b));
        const auto got = asd(a, b), want = oracle::asd(a, b);
        ASSERT_EQ(got.has_value(), want.has_value());
        if (got) {
            EXPECT_NEAR(*got, *want, 1e-9);
        }
        EXPECT_EQ(asd(a, b), asd(b, a));
        EXPECT_EQ(dice(a, b), dice(b, a));
    }
}

TEST(Metrics, EvaluateLabelsCoversForeground) {
    std::vector<std::uint8_t> gt{0, 1, 1, 2}, pred{0, 1, 2, 2};
    auto m = evaluate_labels(pred, gt, 2, 2, 4);
    ASSERT_EQ(m.size(), 3u);
    EXPECT_DOUBLE_EQ(*m[0].dice, 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(*m[1].dice, 2.0 / 3.0);
    EXPECT_FALSE(m[2].dice.has_value());
}

TEST(Projection, MatchesEigenOracleAndMaximisesVariance) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0, 1);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t D = 3 + static_cast<std::size_t>(trial % 4), N = 30;
        std::vector<std::vector<double>> v(N, std::vector<double>(D));
        for (auto& row : v)
            for (std::size_t d = 0; d < D; ++d) row[d] = n(rng) * static_cast<double>(d + 1);
        const auto p = project_features_2d(v);
        std::vector<double> mu(D);
        for (const auto& row : v)
            for (std::size_t d = 0; d < D; ++d) mu[d] += row[d] / N;
        for (std::size_t k = 0; k < 2; ++k) {
            double norm = 0, var = 0;
            for (std::size_t d = 0; d < D; ++d) norm += p.axes(d, k) * p.axes(d, k);
            EXPECT_NEAR(norm, 1.0, 1e-9);
            for (std::size_t i = 0; i < N; ++i) {
                double proj = 0;
                for (std::size_t d = 0; d < D; ++d) proj += (v[i][d] - mu[d]) * p.axes(d, k);
                EXPECT_NEAR(proj, p.points[i][k], 1e-9);
                var += proj * proj / N;
            }
            EXPECT_NEAR(var, p.eigenvalues[k], 1e-9);
        }
        EXPECT_GE(p.eigenvalues[0], p.eigenvalues[1]);
        for (int r = 0; r < 10; ++r) {
            std::vector<double> u(D);
            double un = 0;
            for (auto& x : u) {
                x = n(rng);
                un += x * x;
            }
            double var = 0;
            for (std::size_t i = 0; i < N; ++i) {
                double proj = 0;
                for (std::size_t d = 0; d < D; ++d) proj += (v[i][d] - mu[d]) * u[d] / std::sqrt(un);
                var += proj * proj / N;
            }
            EXPECT_LE(var, p.eigenvalues[0] + 1e-9);
        }
    }
    EXPECT_THROW(project_features_2d({{1.0}, {2.0}}), std::invalid_argument);
}

// ---------------------------------------------------------------- report

TEST(Report, SummaryAveragesDefinedCells) {
    std::vector<SampleMetrics> s{{1, "target_test", {{1, 0.5, 2.0}, {2, std::nullopt, std::nullopt}}},
                                 {1, "target_test", {{1, 1.0, 4.0}, {2, 0.25, 1.0}}}};
    const auto rows = summarize(s);
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0].cls, "1");
    EXPECT_DOUBLE_EQ(*rows[0].dice, 0.75);
    EXPECT_DOUBLE_EQ(*rows[1].dice, 0.25);
    EXPECT_EQ(rows[2].cls, "avg");
    EXPECT_DOUBLE_EQ(*rows[2].dice, 0.5);
    EXPECT_DOUBLE_EQ(*rows[2].asd, 2.0);
}

TEST(Report, CsvParsesBack) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<MetricRow> rows;
    for (std::size_t e = 1; e < 4; ++e) {
        rows.push_back({e, "target_test", "1", u(rng), u(rng) * 10});
        rows.push_back({e, "target_test", "2", std::nullopt, std::nullopt});
        rows.push_back({e, "target_test", "avg", 1.0 / 3.0, 0.1 + 0.2});
    }
    EXPECT_EQ(parse_metrics_csv(metrics_csv(rows)), rows);
    EXPECT_EQ(metrics_csv({}), std::string(kMetricsHeader) + "\n");
    EXPECT_TRUE(parse_metrics_csv(metrics_csv({})).empty());
    EXPECT_THROW(parse_metrics_csv("epoch,dice\n"), FormatError);
    EXPECT_THROW(parse_metrics_csv(std::string(kMetricsHeader) + "\n1,x,1,abc,\n"), FormatError);
}

TEST(Report, EmitWritesFiles) {
    const auto dir = testutil::temp_dir("report");
    std::vector<SampleMetrics> s{{1, "target_test", {{1, 0.5, 2.0}}}};
    FeatureSet f{{{1, 0}, {0, 1}, {1, 1}}, {1, 2, 1}, {"s", "t", "s"}};
    emit_report(s, {{"seg", {3, 2, 1}}}, f, dir);
    EXPECT_TRUE(std::filesystem::exists(dir / "metrics.csv"));
    EXPECT_TRUE(std::filesystem::exists(dir / "losses.svg"));
    EXPECT_TRUE(std::filesystem::exists(dir / "features.svg"));
    std::filesystem::remove_all(dir);
}
