#include <gtest/gtest.h>

#include <cmath>

#include "canet/cft.hpp"
#include "canet/error.hpp"
#include "canet/rng.hpp"
#include "cft_oracle.hpp"
#include "gradcheck.hpp"

using namespace canet;
using namespace canet::cft;

namespace {

MatchSet one_query(int qr, int qc, std::vector<Match> matches) {
    MatchSet ms;
    ms.image_height = 64;
    ms.image_width = 64;
    ms.queries.push_back(QueryMatches{data::PatchRef{0, qr, qc}, std::move(matches)});
    return ms;
}

Match m(int r, int c, double s) { return Match{data::PatchRef{0, r, c}, s}; }

}  // namespace

TEST(GaussianWeights, SizeOneIsUnit) {
    for (double sigma : {0.1, 1.0, 50.0}) {
        const auto t = gaussian_weights(1, sigma);
        ASSERT_EQ(t.weights.size(), 1u);
        EXPECT_EQ(t.weights[0], 1.0);
    }
}

TEST(GaussianWeights, CenterOfThreeByThree) {
    const auto t = gaussian_weights(3, 1.0);
    // 1 / (1 + 4 e^-1/2 + 4 e^-1)
    EXPECT_NEAR(t.at(1, 1), 1.0 / (1 + 4 * std::exp(-0.5) + 4 * std::exp(-1.0)), 1e-15);
    EXPECT_NEAR(t.at(1, 1), 0.2042, 1e-4);
}

TEST(GaussianWeights, NormalizedAndSymmetric) {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 2 * rng.uniform_int(0, 5) + 1;
        const double sigma = rng.uniform(0.1, 10.0);
        const auto t = gaussian_weights(n, sigma);
        double s = 0.0;
        for (double w : t.weights) {
            EXPECT_GT(w, 0.0);
            s += w;
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
        for (int iy = 0; iy < n; ++iy)
            for (int ix = 0; ix < n; ++ix) {
                EXPECT_DOUBLE_EQ(t.at(iy, ix), t.at(ix, iy));
                EXPECT_DOUBLE_EQ(t.at(iy, ix), t.at(n - 1 - iy, ix));
            }
    }
}

TEST(GaussianWeights, WideSigmaIsUniform) {
    const auto t = gaussian_weights(5, 1e6);
    for (double w : t.weights) EXPECT_NEAR(w, 1.0 / 25, 1e-6);
}

TEST(GaussianWeights, EvenSizeRejected) {
    EXPECT_THROW(gaussian_weights(4, 1.0), ConfigError);
    EXPECT_THROW(gaussian_weights(3, 0.0), ConfigError);
}

TEST(GaussianWeights, AnchoredWindowSpansZeroToN) {
    const auto t = gaussian_weights(2, 1.0, WindowMode::Anchored);
    ASSERT_EQ(t.offsets, (std::vector<int>{0, 1, 2}));
    EXPECT_GT(t.at(0, 0), t.at(2, 2));
}

TEST(GaussianSample, ConstantMapIsInvariant) {
    Tensor map = Tensor::chw(4, 7, 6, 0.75);
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const auto v = gaussian_sample(map, rng.uniform_int(0, 6), rng.uniform_int(0, 5), 2 * rng.uniform_int(0, 3) + 1,
                                       rng.uniform(0.3, 4));
        for (double x : v) EXPECT_EQ(x, 0.75);
    }
}

TEST(GaussianSample, SizeOneCopiesCell) {
    Rng rng(3);
    Tensor map = Tensor::chw(3, 5, 5);
    for (auto& v : map.values()) v = rng.uniform();
    const auto v = gaussian_sample(map, 2, 4, 1, 1.0);
    for (int c = 0; c < 3; ++c) EXPECT_EQ(v[c], map.at(c, 2, 4));
}

TEST(GaussianSample, ImpulseAtCenter) {
    Tensor map = Tensor::chw(1, 5, 5);
    map.at(0, 2, 2) = 1.0;
    EXPECT_NEAR(gaussian_sample(map, 2, 2, 3, 1.0)[0], 0.2042, 1e-4);
}

TEST(GaussianSample, BorderRenormalizes) {
    Tensor map = Tensor::chw(1, 4, 4);
    map.at(0, 0, 0) = 1.0;
    // At the corner only the 2x2 in-map taps remain: e^0 / (1 + 2e^-1/2 + e^-1).
    const double expect = 1.0 / (1 + 2 * std::exp(-0.5) + std::exp(-1.0));
    EXPECT_NEAR(gaussian_sample(map, 0, 0, 3, 1.0)[0], expect, 1e-12);
}

TEST(GaussianSample, OutsideCenterIsIndexError) {
    Tensor map = Tensor::chw(1, 4, 4);
    EXPECT_THROW(gaussian_sample(map, 4, 0, 3, 1.0), IndexError);
    EXPECT_THROW(gaussian_sample(map, 0, -1, 3, 1.0), IndexError);
}

TEST(BlendTopk, Examples) {
    Tensor f({2}, std::vector<double>{1.5, -2.0});
    auto same = blend_topk({f, f, f}, {0.1, 5.0, 0.7});
    ASSERT_TRUE(same);
    EXPECT_NEAR((*same)[0], 1.5, 1e-15);
    EXPECT_NEAR((*same)[1], -2.0, 1e-15);

    auto mid = blend_topk({Tensor({1}, 0.0), Tensor({1}, 2.0)}, {1, 1});
    EXPECT_EQ((*mid)[0], 1.0);

    // Weights 0.9, 0.6, 0.3 normalize to 1/2, 1/3, 1/6.
    auto w = blend_topk({Tensor({1}, 1.0), Tensor({1}, 0.0), Tensor({1}, 0.0)}, {0.9, 0.6, 0.3});
    EXPECT_NEAR((*w)[0], 0.5, 1e-15);
    w = blend_topk({Tensor({1}, 0.0), Tensor({1}, 1.0), Tensor({1}, 0.0)}, {0.9, 0.6, 0.3});
    EXPECT_NEAR((*w)[0], 1.0 / 3, 1e-15);
    w = blend_topk({Tensor({1}, 0.0), Tensor({1}, 0.0), Tensor({1}, 1.0)}, {0.9, 0.6, 0.3});
    EXPECT_NEAR((*w)[0], 1.0 / 6, 1e-15);
}

TEST(BlendTopk, ZeroWeightsSignalNoMatch) {
    EXPECT_FALSE(blend_topk({Tensor({1}, 3.0)}, {0.0}).has_value());
    EXPECT_THROW(blend_topk({Tensor({1}, 3.0)}, {-1.0}), ValidationError);
    EXPECT_THROW(blend_topk({}, {}), ValidationError);
    EXPECT_THROW(blend_topk({Tensor({1}), Tensor({2})}, {1, 1}), ShapeError);
}

TEST(BlendTopk, StaysInsideEnvelope) {
    Rng rng(4);
    for (int trial = 0; trial < 1000; ++trial) {
        const int k = rng.uniform_int(1, 3);
        std::vector<Tensor> samples;
        std::vector<double> w;
        for (int i = 0; i < k; ++i) {
            Tensor t = Tensor::chw(3, 2, 2);
            for (auto& v : t.values()) v = rng.uniform(-5, 5);
            samples.push_back(t);
            w.push_back(rng.uniform(0.01, 1.0));
        }
        const auto out = blend_topk(samples, w);
        ASSERT_TRUE(out);
        for (std::size_t j = 0; j < out->size(); ++j) {
            double lo = samples[0][j], hi = samples[0][j];
            for (const auto& s : samples) {
                lo = std::min(lo, s[j]);
                hi = std::max(hi, s[j]);
            }
            ASSERT_GE((*out)[j], lo - 1e-12);
            ASSERT_LE((*out)[j], hi + 1e-12);
        }
    }
}

TEST(ApplyCft, EmptyMatchSetIsIdentity) {
    Rng rng(5);
    Tensor level = Tensor::chw(3, 8, 8);
    for (auto& v : level.values()) v = rng.uniform();
    EXPECT_EQ(apply_cft(level, 8, MatchSet{}, CftConfig{}), level);
}

TEST(ApplyCft, ConstantMapStaysConstant) {
    Tensor level = Tensor::chw(2, 8, 8, -0.3);
    const auto out = apply_cft(level, 8, one_query(0, 0, {m(32, 32, 0.7)}), CftConfig{});
    for (double v : out.values()) EXPECT_NEAR(v, -0.3, 1e-15);
}

TEST(ApplyCft, RectCoversCeilOfPatchOverStride) {
    for (int stride : {1, 2, 3, 4, 5, 8, 16, 32}) EXPECT_EQ(cells_per_patch(stride), (32 + stride - 1) / stride);
    // With stride 8 a query at pixel (8, 16) owns cells rows 1..4, cols 2..5.
    Tensor level = Tensor::chw(1, 8, 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) level.at(0, y, x) = y * 8 + x;
    CftConfig cfg{1, 1, 1.0};
    const auto out = apply_cft(level, 8, one_query(8, 16, {m(24, 32, 1.0)}), cfg);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            const bool inside = y >= 1 && y < 5 && x >= 2 && x < 6;
            EXPECT_EQ(out.at(0, y, x), inside ? level.at(0, y + 2, x + 2) : level.at(0, y, x)) << y << "," << x;
        }
}

TEST(ApplyCft, KnownTwoMatchToyMatchesOracle) {
    Tensor level = Tensor::chw(2, 8, 8);
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) level.at(c, y, x) = std::sin(1.3 * y + 0.7 * x + c);
    const auto ms = one_query(0, 0, {m(32, 0, 0.8), m(0, 32, 0.4)});
    CftConfig cfg{2, 3, 1.0};
    EXPECT_LT(max_abs_diff(apply_cft(level, 8, ms, cfg), oracle::naive_cft(level, 8, ms, cfg)), 1e-6);
}

TEST(ApplyCft, OverlappingQueriesAverage) {
    Tensor level = Tensor::chw(1, 4, 4);
    level.at(0, 3, 3) = 4.0;
    level.at(0, 3, 2) = 2.0;
    MatchSet ms;
    ms.image_height = ms.image_width = 64;
    // Both queries cover cell (1,1); their n=1 copies come from (3,3) and (3,2).
    ms.queries.push_back(QueryMatches{data::PatchRef{0, 0, 0}, {m(32, 32, 1.0)}});
    ms.queries.push_back(QueryMatches{data::PatchRef{0, 16, 16}, {m(48, 32, 1.0)}});
    CftConfig cfg{1, 1, 1.0};
    const auto out = apply_cft(level, 16, ms, cfg);
    EXPECT_DOUBLE_EQ(out.at(0, 1, 1), 0.5 * (level.at(0, 3, 3) + level.at(0, 3, 2)));
}

TEST(ApplyCft, ZeroScoreQueryLeavesCellsUntouched) {
    Tensor level = Tensor::chw(1, 4, 4);
    level.at(0, 2, 2) = 9.0;
    const auto out = apply_cft(level, 16, one_query(0, 0, {m(32, 32, 0.0)}), CftConfig{});
    EXPECT_EQ(out, level);
}

TEST(ApplyCft, InputLevelNotMutated) {
    Rng rng(6);
    auto inst = oracle::random_cft_instance(rng);
    const Tensor before = inst.level;
    apply_cft(inst.level, inst.stride, inst.matches, inst.cfg);
    EXPECT_EQ(inst.level, before);
}

TEST(ApplyCft, MatchesNaiveOracleOnRandomInstances) {
    Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        const auto inst = oracle::random_cft_instance(rng);
        const Tensor fast = apply_cft(inst.level, inst.stride, inst.matches, inst.cfg);
        const Tensor slow = oracle::naive_cft(inst.level, inst.stride, inst.matches, inst.cfg);
        ASSERT_LT(max_abs_diff(fast, slow), 1e-6) << "trial " << trial;
    }
}

TEST(ApplyCft, GraphVersionAgreesAndDifferentiates) {
    Rng rng(8);
    auto inst = oracle::random_cft_instance(rng);
    nn::Graph g;
    const Tensor direct = apply_cft(inst.level, inst.stride, inst.matches, inst.cfg);
    EXPECT_EQ(g.value(apply_cft(g, g.constant(inst.level), inst.stride, inst.matches, inst.cfg)), direct);
    auto fn = [&](nn::Graph& gg, const std::vector<nn::Var>& v) {
        nn::Var o = apply_cft(gg, v[0], inst.stride, inst.matches, inst.cfg);
        return nn::sum(gg, nn::mul(gg, o, o));
    };
    EXPECT_LT(oracle::max_relative_error(fn, {inst.level}, 10, 8), 1e-5);
}
