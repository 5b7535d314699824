#include <gtest/gtest.h>

#include <cmath>

#include "canet/error.hpp"
#include "canet/evaluation.hpp"
#include "canet/synthetic.hpp"

using namespace canet;
using namespace canet::eval;
using imaging::ColorSpace;
using imaging::ImagePlane;

namespace {

ImagePlane random_rgb(int h, int w, Rng& rng) {
    ImagePlane img(h, w, ColorSpace::RGB);
    for (auto& v : img.data()) v = rng.uniform(0.05, 0.95);
    return img;
}

imaging::Mask random_mask(int h, int w, Rng& rng) {
    imaging::Mask m(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) m.set(y, x, rng.uniform() < 0.4);
    return m;
}

ImagePlane rgb_from_lab(double l, double a, double b) {
    const auto p = imaging::lab_to_rgb_pixel(l, a, b);
    return ImagePlane(1, 1, ColorSpace::RGB, {p[0], p[1], p[2]});
}

// Brute-force region RMSE straight from the definition.
double brute_rmse(const ImagePlane& a, const ImagePlane& b, const imaging::Mask& m, int region) {
    double sum = 0.0;
    long long n = 0;
    for (int y = 0; y < a.height(); ++y)
        for (int x = 0; x < a.width(); ++x) {
            if (region == 0 && !m.at(y, x)) continue;
            if (region == 1 && m.at(y, x)) continue;
            const auto p = imaging::rgb_to_lab_pixel(a.at(y, x, 0), a.at(y, x, 1), a.at(y, x, 2));
            const auto q = imaging::rgb_to_lab_pixel(b.at(y, x, 0), b.at(y, x, 1), b.at(y, x, 2));
            for (int c = 0; c < 3; ++c) sum += (p[c] - q[c]) * (p[c] - q[c]);
            ++n;
        }
    return std::sqrt(sum / (3.0 * n));
}

}  // namespace

TEST(RmseLab, SelfComparisonIsZero) {
    Rng rng(1);
    for (int t = 0; t < 20; ++t) {
        const ImagePlane img = random_rgb(9, 7, rng);
        const auto r = rmse_lab(img, img, random_mask(9, 7, rng));
        EXPECT_EQ(*r.all, 0.0);
        if (r.shadow) {
            EXPECT_EQ(*r.shadow, 0.0);
        }
        if (r.non_shadow) {
            EXPECT_EQ(*r.non_shadow, 0.0);
        }
    }
}

TEST(RmseLab, SinglePixelExample) {
    const ImagePlane pred = rgb_from_lab(50, 0, 0), gt = rgb_from_lab(53, 4, 0);
    const auto r = rmse_lab(pred, gt, imaging::Mask(1, 1, true));
    EXPECT_NEAR(*r.shadow, std::sqrt(25.0 / 3.0), 1e-6);
    EXPECT_FALSE(r.non_shadow.has_value());
    EXPECT_EQ(r.non_shadow_pixels, 0);
}

TEST(RmseLab, EmptyRegionIsAbsent) {
    Rng rng(2);
    const ImagePlane a = random_rgb(4, 4, rng), b = random_rgb(4, 4, rng);
    const auto r = rmse_lab(a, b, imaging::Mask(4, 4, false));
    EXPECT_FALSE(r.shadow.has_value());
    EXPECT_TRUE(r.non_shadow.has_value());
    EXPECT_EQ(*r.non_shadow, *r.all);
}

TEST(RmseLab, AllShadowMaskEqualsWholeImage) {
    Rng rng(3);
    const ImagePlane a = random_rgb(6, 5, rng), b = random_rgb(6, 5, rng);
    const auto r = rmse_lab(a, b, imaging::Mask(6, 5, true));
    EXPECT_EQ(*r.shadow, *r.all);
}

TEST(RmseLab, DecompositionIdentityAndSymmetry) {
    Rng rng(4);
    for (int t = 0; t < 100; ++t) {
        const int h = rng.uniform_int(2, 12), w = rng.uniform_int(2, 12);
        const ImagePlane a = random_rgb(h, w, rng), b = random_rgb(h, w, rng);
        imaging::Mask m = random_mask(h, w, rng);
        m.set(0, 0, true);
        m.set(h - 1, w - 1, false);
        const auto r = rmse_lab(a, b, m), s = rmse_lab(b, a, m);
        const double lhs = r.all_pixels * *r.all * *r.all;
        const double rhs = r.shadow_pixels * *r.shadow * *r.shadow + r.non_shadow_pixels * *r.non_shadow * *r.non_shadow;
        EXPECT_NEAR(lhs, rhs, 1e-6 * std::max(1.0, lhs));
        EXPECT_EQ(*r.all, *s.all);
        EXPECT_EQ(*r.shadow, *s.shadow);
    }
}

TEST(RmseLab, MatchesBruteForce) {
    Rng rng(5);
    const ImagePlane a = random_rgb(8, 8, rng), b = random_rgb(8, 8, rng);
    const auto m = random_mask(8, 8, rng);
    const auto r = rmse_lab(a, b, m);
    EXPECT_NEAR(*r.shadow, brute_rmse(a, b, m, 0), 1e-12);
    EXPECT_NEAR(*r.non_shadow, brute_rmse(a, b, m, 1), 1e-12);
    EXPECT_NEAR(*r.all, brute_rmse(a, b, m, 2), 1e-12);
}

TEST(RmseLab, MaeOption) {
    const ImagePlane pred = rgb_from_lab(50, 0, 0), gt = rgb_from_lab(53, 4, 0);
    EXPECT_NEAR(*rmse_lab(pred, gt, imaging::Mask(1, 1, true), Metric::Mae).all, 7.0 / 3.0, 1e-6);
    EXPECT_EQ(parse_metric("mae"), Metric::Mae);
    EXPECT_THROW(parse_metric("psnr"), ConfigError);
}

TEST(RmseLab, SizeMismatchThrows) {
    EXPECT_THROW(rmse_lab(ImagePlane(2, 2, ColorSpace::RGB), ImagePlane(2, 3, ColorSpace::RGB), imaging::Mask(2, 2)),
                 ShapeError);
    EXPECT_THROW(rmse_lab(ImagePlane(2, 2, ColorSpace::RGB), ImagePlane(2, 2, ColorSpace::RGB), imaging::Mask(3, 2)),
                 ShapeError);
}

TEST(ChannelGap, IdenticalPairIsZero) {
    auto s = synth::make_scene(synth::SceneKind::RealStyle, 32, 1);
    s.shadow = s.shadow_free;
    const auto stats = channel_gap_stats({s});
    for (double g : stats.gap) EXPECT_EQ(g, 0.0);
}

TEST(ChannelGap, LightnessOnlyShadow) {
    ImagePlane free_lab(8, 8, ColorSpace::LAB), shadow_lab(8, 8, ColorSpace::LAB);
    imaging::Mask mask(8, 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            const double l = 60 + y, a = 5 - x, b = 10 + x;
            free_lab.at(y, x, 0) = l;
            free_lab.at(y, x, 1) = a;
            free_lab.at(y, x, 2) = b;
            const bool in = x >= 2 && x < 6;
            mask.set(y, x, in);
            shadow_lab.at(y, x, 0) = in ? 0.5 * l : l;
            shadow_lab.at(y, x, 1) = a;
            shadow_lab.at(y, x, 2) = b;
        }
    data::LoadedSample s{"lonly", imaging::lab_to_rgb(shadow_lab), imaging::lab_to_rgb(free_lab), mask};
    const auto stats = channel_gap_stats({s});
    EXPECT_GT(stats.gap[0], 10.0);
    EXPECT_NEAR(stats.gap[1], 0.0, 1e-9);
    EXPECT_NEAR(stats.gap[2], 0.0, 1e-9);
}

TEST(ChannelGap, NoShadowPixelsIsAnError) {
    auto s = synth::make_scene(synth::SceneKind::RealStyle, 16, 2);
    s.mask = imaging::Mask(16, 16, false);
    EXPECT_THROW(channel_gap_stats({s}), ValidationError);
}

TEST(ChannelGap, RealStyleScenesOrderLAboveAB) {
    std::vector<data::LoadedSample> samples;
    for (int i = 0; i < 4; ++i) samples.push_back(synth::make_scene(synth::SceneKind::RealStyle, 64, 40 + i));
    const auto stats = channel_gap_stats(samples);
    EXPECT_GT(stats.gap[0], stats.gap[1]);
    EXPECT_GT(stats.gap[0], stats.gap[2]);
}

TEST(Evaluate, IdentityModelMatchesBruteForce) {
    std::vector<data::LoadedSample> samples;
    for (int i = 0; i < 3; ++i) {
        samples.push_back(synth::make_scene(synth::SceneKind::RealStyle, 24, 60 + i));
        samples.back().name = "img" + std::to_string(i);
    }
    const auto report = evaluate([](const data::LoadedSample& s) { return s.shadow; }, samples, "identity");
    ASSERT_EQ(report.images.size(), 3u);
    double s = 0, n = 0, a = 0;
    for (const auto& x : samples) {
        s += brute_rmse(x.shadow, x.shadow_free, x.mask, 0);
        n += brute_rmse(x.shadow, x.shadow_free, x.mask, 1);
        a += brute_rmse(x.shadow, x.shadow_free, x.mask, 2);
    }
    EXPECT_NEAR(*report.aggregate.shadow, s / 3, 1e-9);
    EXPECT_NEAR(*report.aggregate.non_shadow, n / 3, 1e-9);
    EXPECT_NEAR(*report.aggregate.all, a / 3, 1e-9);
}

TEST(Evaluate, PerPixelPoolsAllPixels) {
    Rng rng(7);
    std::vector<data::LoadedSample> samples;
    double sum = 0;
    long long count = 0;
    for (int i = 0; i < 3; ++i) {
        const int h = 4 + i, w = 5;
        data::LoadedSample s{"p" + std::to_string(i), random_rgb(h, w, rng), random_rgb(h, w, rng), random_mask(h, w, rng)};
        const double r = brute_rmse(s.shadow, s.shadow_free, s.mask, 2);
        sum += r * r * h * w;
        count += h * w;
        samples.push_back(s);
    }
    const auto report = evaluate([](const data::LoadedSample& s) { return s.shadow; }, samples, "identity", Metric::Rmse,
                                 Aggregation::PerPixel);
    EXPECT_NEAR(*report.aggregate.all, std::sqrt(sum / count), 1e-9);
}

TEST(Evaluate, JsonAndTable) {
    std::vector<data::LoadedSample> samples{synth::make_scene(synth::SceneKind::Separable, 16, 1)};
    samples[0].mask = imaging::Mask(16, 16, false);
    const auto report = evaluate([](const data::LoadedSample& s) { return s.shadow; }, samples, "identity");
    const auto j = to_json(report);
    EXPECT_EQ(j["schema_version"], kReportSchemaVersion);
    EXPECT_TRUE(j["aggregate"]["shadow"].is_null());
    EXPECT_EQ(j["images"].size(), 1u);
    const std::string table = text_table({report, report});
    EXPECT_NE(table.find("variant"), std::string::npos);
    EXPECT_LT(table.find(" S "), table.find(" N "));
    EXPECT_LT(table.find(" N "), table.find(" A"));
    EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 3);
}
