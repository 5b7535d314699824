#include <gtest/gtest.h>

#include <chrono>
#include <cmath>

#include "canet/cpm.hpp"
#include "canet/error.hpp"
#include "canet/nn/ops.hpp"
#include "canet/synthetic.hpp"
#include "gradcheck.hpp"

using namespace canet;
using namespace canet::cpm;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = rng.normal(0, scale);
    return t;
}

const CpmNet& shared_net() {
    static const CpmNet net(17);
    return net;
}

}  // namespace

TEST(CpmFeatures, IntermediateShapesFollowLayout) {
    Rng rng(1);
    nn::Graph g;
    std::vector<std::vector<int>> shapes;
    nn::Var f = shared_net().features(g, g.constant(random_tensor({6, 32, 32}, rng)), &shapes);
    const std::vector<std::vector<int>> expected{{64, 16, 16}, {64, 16, 16}, {96, 8, 8}, {96, 8, 8},
                                                 {96, 4, 4},   {96, 4, 4},   {64, 4, 4}, {256}};
    EXPECT_EQ(shapes, expected);
    EXPECT_EQ(g.value(f).shape(), (std::vector<int>{256}));
}

TEST(CpmFeatures, BatchOfPatches) {
    Rng rng(2);
    std::vector<Tensor> batch;
    for (int i = 0; i < 3; ++i) batch.push_back(random_tensor({6, 32, 32}, rng));
    const Tensor out = shared_net().extract_features(batch);
    EXPECT_EQ(out.shape(), (std::vector<int>{3, 256}));
    const Tensor single = shared_net().extract_features(batch[1]);
    for (int j = 0; j < 256; ++j) EXPECT_EQ(out[256 + j], single[j]);
}

TEST(CpmFeatures, WrongSizeIsShapeError) {
    EXPECT_THROW(shared_net().extract_features(Tensor::chw(6, 16, 16)), ShapeError);
    EXPECT_THROW(shared_net().extract_features(Tensor::chw(3, 32, 32)), ShapeError);
}

TEST(CpmFeatures, InputHasShadowAndUnawareChannels) {
    const auto s = synth::make_scene(synth::SceneKind::RealStyle, 48, 3);
    const auto unaware = imaging::shadow_unaware_image(s.shadow);
    const Tensor in = make_input(s.shadow, unaware, 5, 9);
    ASSERT_EQ(in.shape(), (std::vector<int>{6, 32, 32}));
    EXPECT_DOUBLE_EQ(in.at(1, 3, 4), s.shadow.at(8, 13, 1) - 0.5);
    EXPECT_DOUBLE_EQ(in.at(5, 3, 4), unaware.at(8, 13, 2) - 0.5);
    EXPECT_THROW(make_input(s.shadow, unaware, 17, 0), ShapeError);
}

TEST(CpmHeads, SoftmaxSumsToOneAndScoreInRange) {
    Rng rng(4);
    for (int trial = 0; trial < 1000; ++trial) {
        const CpmNet* net = &shared_net();
        const auto p = net->predict(random_tensor({256}, rng, 3.0), random_tensor({256}, rng, 3.0));
        double s = 0.0;
        for (double v : p.type_probs) {
            ASSERT_GE(v, 0.0);
            s += v;
        }
        ASSERT_NEAR(s, 1.0, 1e-6);
        ASSERT_GE(p.score, 0.0);
        ASSERT_LE(p.score, 1.0);
    }
}

TEST(CpmHeads, FreshWeightsPerSeedDiffer) {
    EXPECT_EQ(CpmNet(5).weights_hash(), CpmNet(5).weights_hash());
    EXPECT_NE(CpmNet(5).weights_hash(), CpmNet(6).weights_hash());
}

TEST(CpmLoss, PerfectPredictionIsZero) {
    CpmPrediction p;
    p.type_probs = {0.0, 0.0, 1.0};
    p.score = p.raw_score = 1.0;
    const auto l = cpm_loss(p, data::PairLabel{1, 1.0});
    EXPECT_EQ(l.total(), 0.0);
}

TEST(CpmLoss, UniformProbsGiveLogThree) {
    CpmPrediction p;
    p.type_probs = {1.0 / 3, 1.0 / 3, 1.0 / 3};
    p.score = p.raw_score = 0.0;
    const auto l = cpm_loss(p, data::PairLabel{-1, 0.0});
    EXPECT_NEAR(l.cls, 1.0986, 1e-4);
    EXPECT_EQ(l.reg, 0.0);
}

TEST(CpmLoss, ScalarResidualNorm) {
    CpmPrediction p;
    p.type_probs = {0.0, 1.0, 0.0};
    p.score = p.raw_score = 0.3;
    EXPECT_NEAR(cpm_loss(p, data::PairLabel{0, 1.0}).total(), 0.7, 1e-12);
    EXPECT_NEAR(cpm_loss(p, data::PairLabel{0, 1.0}, RegressionLoss::Squared).total(), 0.49, 1e-12);
}

TEST(CpmLoss, GraphMatchesValueForm) {
    Rng rng(6);
    nn::Graph g;
    const auto& net = shared_net();
    const auto h = net.heads(g, g.constant(random_tensor({256}, rng)), g.constant(random_tensor({256}, rng)));
    const data::PairLabel label{1, 0.0};
    const auto vars = cpm_loss(g, h, label);
    CpmPrediction p;
    for (int i = 0; i < 3; ++i) p.type_probs[i] = g.value(h.probs)[i];
    p.score = g.value(h.score)[0];
    p.raw_score = g.value(h.score_raw)[0];
    const auto value = cpm_loss(p, label);
    EXPECT_NEAR(g.value(vars.reg)[0], value.reg, 1e-12);
    EXPECT_NEAR(g.value(vars.cls)[0], value.cls, 1e-9);
    EXPECT_NEAR(g.value(vars.total)[0], value.total(), 1e-9);
}

TEST(CpmLoss, GradientWrtHeadOutputs) {
    Rng rng(7);
    for (int type : {-1, 0, 1})
        for (double corr : {0.0, 1.0}) {
            auto fn = [&](nn::Graph& g, const std::vector<nn::Var>& v) {
                CpmNet::Heads h{v[0], v[1], nn::softmax(g, v[0]), nn::clamp(g, v[1], 0.0, 1.0)};
                return cpm_loss(g, h, data::PairLabel{type, corr}).total;
            };
            EXPECT_LT(oracle::max_relative_error(fn, {random_tensor({3}, rng), random_tensor({1}, rng)}, 10, 7), 1e-4);
        }
}

TEST(CpmLoss, GradientWrtParameters) {
    Rng rng(8);
    CpmNet net(9, CpmConfig{0.25});
    const Tensor a = random_tensor({6, 32, 32}, rng, 0.3), b = random_tensor({6, 32, 32}, rng, 0.3);
    const data::PairLabel label{1, 1.0};
    auto loss = [&]() {
        nn::Graph g;
        auto h = net.heads(g, net.features(g, g.constant(a)), net.features(g, g.constant(b)));
        return g.value(cpm_loss(g, h, label).total)[0];
    };
    net.params().zero_grad();
    {
        nn::Graph g;
        auto h = net.heads(g, net.features(g, g.constant(a)), net.features(g, g.constant(b)));
        g.backward(cpm_loss(g, h, label).total);
    }
    double worst = 0.0;
    for (int i = 0; i < 10; ++i) {
        auto& p = net.params().all()[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(net.params().size()) - 1))];
        const std::size_t idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(p.value.size()) - 1));
        const double saved = p.value[idx], h = 1e-6;
        p.value[idx] = saved + h;
        const double up = loss();
        p.value[idx] = saved - h;
        const double down = loss();
        p.value[idx] = saved;
        const double numeric = (up - down) / (2 * h);
        worst = std::max(worst, std::abs(numeric - p.grad[idx]) / std::max({std::abs(numeric), std::abs(p.grad[idx]), 1e-6}));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(MatchImage, NoShadowGivesEmptyMatchSet) {
    imaging::ImagePlane img(64, 64, imaging::ColorSpace::RGB, 0.6);
    const auto ms = match_image(shared_net(), img);
    EXPECT_TRUE(ms.empty());
    EXPECT_EQ(ms.image_height, 64);
}

TEST(MatchImage, CheckerboardQueriesInsideDarkRegion) {
    const auto scene = synth::make_checkerboard(128, 8, 32, 32, 48, 48);
    MatchOptions opt;
    opt.type_gate = false;
    const auto ms = match_image(shared_net(), scene.shadow, opt);
    std::size_t shadow_patches = 0;
    for (const auto& p : grid_patches(128, 128, 16)) shadow_patches += data::patch_is_shadow(p, scene.mask) ? 1 : 0;
    ASSERT_EQ(ms.queries.size(), shadow_patches);
    for (const auto& q : ms.queries) {
        EXPECT_TRUE(data::patch_is_shadow(q.query, scene.mask)) << q.query.row << "," << q.query.col;
        ASSERT_FALSE(q.matches.empty());
        for (const auto& m : q.matches) {
            EXPECT_FALSE(data::patch_is_shadow(m.source, scene.mask)) << m.source.row << "," << m.source.col;
        }
        for (std::size_t i = 1; i < q.matches.size(); ++i) EXPECT_GE(q.matches[i - 1].score, q.matches[i].score);
    }
}

TEST(MatchImage, AnchorVoteSelectionRuns) {
    const auto scene = synth::make_checkerboard(64, 8, 0, 0, 32, 64);
    MatchOptions opt;
    opt.selection = QuerySelection::AnchorVote;
    opt.type_gate = false;
    const auto ms = match_image(shared_net(), scene.shadow, opt);
    for (const auto& q : ms.queries) EXPECT_LE(q.matches.size(), 8u);
}

TEST(MatchImage, TwoPhaseFeatureCount) {
    const auto scene = synth::make_checkerboard(128, 8, 32, 32, 64, 64);
    MatchStats stats;
    MatchOptions opt;
    opt.type_gate = false;
    match_image(shared_net(), scene.shadow, opt, &stats);
    EXPECT_EQ(stats.grid_patches, 49);
    EXPECT_EQ(stats.feature_extractions, 49);
    EXPECT_GT(stats.pair_evaluations, 0);
}

TEST(MatchImage, DeterministicAndTruncated) {
    const auto scene = synth::make_scene(synth::SceneKind::RealStyle, 80, 4);
    MatchOptions opt;
    opt.type_gate = false;
    opt.k_candidates = 2;
    const auto a = match_image(shared_net(), scene.shadow, opt);
    const auto b = match_image(shared_net(), scene.shadow, opt);
    EXPECT_EQ(a, b);
    for (const auto& q : a.queries) EXPECT_LE(q.matches.size(), 2u);
}

TEST(MatchImage, ScoreFloorFilters) {
    const auto scene = synth::make_checkerboard(64, 8, 0, 0, 32, 64);
    MatchOptions opt;
    opt.type_gate = false;
    opt.score_floor = 1.1;
    const auto ms = match_image(shared_net(), scene.shadow, opt);
    EXPECT_EQ(ms.match_count(), 0u);
}

TEST(MatchSetJson, RoundTrip) {
    MatchSet ms;
    ms.image_height = 64;
    ms.image_width = 80;
    QueryMatches q{data::PatchRef{0, 16, 32}, {Match{data::PatchRef{0, 0, 0}, 0.75}, Match{data::PatchRef{0, 32, 48}, 0.5}}};
    ms.queries.push_back(q);
    EXPECT_EQ(matchset_from_json(to_json(ms)), ms);
    EXPECT_THROW(matchset_from_json(nlohmann::json::object()), DecodeError);
}

TEST(RankMatches, TiesBrokenByPosition) {
    QueryMatches q;
    q.matches = {Match{data::PatchRef{0, 16, 0}, 0.5}, Match{data::PatchRef{0, 0, 16}, 0.5}, Match{data::PatchRef{0, 0, 0}, 0.9}};
    rank_matches(q, 2);
    ASSERT_EQ(q.matches.size(), 2u);
    EXPECT_EQ(q.matches[0].source.row, 0);
    EXPECT_EQ(q.matches[0].source.col, 0);
    EXPECT_EQ(q.matches[1].source.col, 16);
}
