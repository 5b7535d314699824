#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>

#include "canet/archive.hpp"
#include "canet/canet.hpp"
#include "canet/color_ops.hpp"
#include "canet/error.hpp"
#include "canet/nn/ops.hpp"
#include "canet/synthetic.hpp"
#include "gradcheck.hpp"

using namespace canet;
using namespace canet::net;
using nn::Var;

namespace {

Tensor random_image(int h, int w, Rng& rng, double lo = 0.1, double hi = 0.9) {
    Tensor t = Tensor::chw(3, h, w);
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

std::shared_ptr<const cpm::CpmNet> small_cpm() {
    static auto net = std::make_shared<const cpm::CpmNet>(5, cpm::CpmConfig{0.25});
    return net;
}

// A hand-built MatchSet for a 64x64 image: two queries, two sources each.
MatchSet sample_matches() {
    MatchSet m;
    m.image_height = 64;
    m.image_width = 64;
    m.queries.push_back(QueryMatches{{0, 0, 0}, {Match{{0, 32, 32}, 0.9}, Match{{0, 0, 32}, 0.4}}});
    m.queries.push_back(QueryMatches{{0, 16, 16}, {Match{{0, 32, 0}, 0.7}, Match{{0, 16, 32}, 0.2}}});
    return m;
}

Tensor forward_value(const Pipeline& p, const Tensor& rgb, const MatchSet& m) {
    nn::Graph g;
    return g.value(p.forward(g, g.constant(rgb), m).out);
}

}  // namespace

TEST(Variants, NamesRoundTrip) {
    EXPECT_EQ(all_variants().size(), 6u);
    for (Variant v : all_variants()) EXPECT_EQ(parse_variant(to_string(v)), v);
    EXPECT_THROW(parse_variant("bogus"), ConfigError);
    EXPECT_FALSE(uses_stage_one(Variant::DenseUnetOnly));
    EXPECT_TRUE(needs_cpm(Variant::Full));
    EXPECT_FALSE(needs_cpm(Variant::TmMatch));
}

TEST(Backbone, LevelShapesFor64) {
    CaNet net({}, true, 1);
    Rng rng(1);
    nn::Graph g;
    const auto levels = net.backbone(g, g.constant(random_image(64, 64, rng)));
    ASSERT_EQ(levels.size(), 3u);
    const std::vector<std::vector<int>> expected{{16, 32, 32}, {24, 16, 16}, {32, 8, 8}};
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(g.value(levels[i].map).shape(), expected[i]);
        EXPECT_EQ(levels[i].stride, 2 << i);
    }
}

TEST(Backbone, StrideArithmeticFor400) {
    NetworkConfig cfg;
    cfg.backbone.widths = {4, 4, 4};
    CaNet net(cfg, true, 2);
    nn::Graph g;
    const auto levels = net.backbone(g, g.constant(Tensor::chw(3, 400, 400)));
    EXPECT_EQ(g.value(levels[0].map).height(), 200);
    EXPECT_EQ(g.value(levels[1].map).height(), 100);
    EXPECT_EQ(g.value(levels[2].map).width(), 50);
}

TEST(Backbone, RejectsSizeOffStride) {
    CaNet net({}, true, 1);
    nn::Graph g;
    EXPECT_THROW(net.backbone(g, g.constant(Tensor::chw(3, 60, 64))), ShapeError);
}

TEST(Backbone, ZeroWeightsGiveConstantFeatures) {
    CaNet net({}, true, 3);
    for (auto& p : net.params().all()) p.value.fill(0.0);
    Rng rng(3);
    nn::Graph g;
    for (const auto& level : net.backbone(g, g.constant(random_image(32, 32, rng)))) {
        const Tensor& t = g.value(level.map);
        for (double v : t.values()) EXPECT_EQ(v, t[0]);
    }
}

TEST(Backbone, BadConfigIsRejected) {
    NetworkConfig cfg;
    cfg.cft_levels = {3};
    EXPECT_THROW(CaNet(cfg, true, 1), ConfigError);
    cfg = {};
    cfg.backbone.strides = {2, 4, 16};
    EXPECT_THROW(CaNet(cfg, true, 1), ConfigError);
}

TEST(StageOne, OutputShapesAndRanges) {
    CaNet net({}, true, 4);
    Rng rng(4);
    nn::Graph g;
    const auto s1 = net.stage_one(g, g.constant(random_image(64, 64, rng)), sample_matches(), {});
    EXPECT_EQ(g.value(s1.l_hat).shape(), (std::vector<int>{1, 64, 64}));
    EXPECT_EQ(g.value(s1.ab_hat).shape(), (std::vector<int>{2, 64, 64}));
    EXPECT_EQ(g.value(s1.lab).shape(), (std::vector<int>{3, 64, 64}));
    for (double v : g.value(s1.l_hat).values()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    for (double v : g.value(s1.ab_hat).values()) EXPECT_LE(std::abs(v), 1.0);
}

TEST(StageTwo, InitDoesNotDependOnStageOne) {
    const CaNet with({}, true, 11), without({}, false, 11);
    int compared = 0;
    for (const auto& p : without.params().all()) {
        const auto* q = with.params().find(p.name);
        ASSERT_NE(q, nullptr) << p.name;
        const auto a = q->value.values(), b = p.value.values();
        EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end())) << p.name;
        ++compared;
    }
    EXPECT_GT(compared, 10);
}

TEST(StageTwo, TakesSixChannelsAndReturnsRgb) {
    CaNet net({}, false, 5);
    EXPECT_EQ(net.params().at("stage2.down0.conv.w").value.shape()[1], 6);
    Rng rng(5);
    nn::Graph g;
    Var rgb = g.constant(random_image(16, 16, rng));
    Tensor l = Tensor::chw(1, 16, 16), ab = Tensor::chw(2, 16, 16);
    Var out = net.stage_two(g, g.constant(l), g.constant(ab), rgb, rgb);
    EXPECT_EQ(g.value(out).shape(), (std::vector<int>{3, 16, 16}));
    for (double v : g.value(out).values()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
}

TEST(StageTwo, ZeroResidualReturnsBase) {
    CaNet net({}, false, 6);
    for (auto& p : net.params().all()) p.value.fill(0.0);
    Rng rng(6);
    nn::Graph g;
    const Tensor base = random_image(16, 16, rng);
    Var out = net.stage_two(g, g.constant(Tensor::chw(1, 16, 16)), g.constant(Tensor::chw(2, 16, 16)),
                            g.constant(random_image(16, 16, rng)), g.constant(base));
    EXPECT_LT(max_abs_diff(g.value(out), base), 1e-12);
}

TEST(StageTwo, RefineBaseSelectsTheStartingImage) {
    Rng rng(8);
    const Tensor rgb = random_image(64, 64, rng);
    for (const RefineBase base : {RefineBase::Input, RefineBase::StageOne}) {
        NetworkConfig cfg;
        cfg.refine_base = base;
        VariantOptions opt;
        opt.cpm = small_cpm();
        Pipeline p = make_variant(Variant::Full, cfg, 8, opt);
        for (auto& param : p.net().params().all())
            if (param.name.rfind("stage2.", 0) == 0) param.value.fill(0.0);
        nn::Graph g;
        const auto r = p.forward(g, g.constant(rgb), sample_matches());
        const Tensor expected =
            base == RefineBase::Input ? rgb : g.value(nn::clamp(g, imaging::lab_to_rgb(g, r.stage_one->lab), 0.0, 1.0));
        // The stage-two input is clamped to [1e-3, 1 - 1e-3] before the logit.
        EXPECT_LE(max_abs_diff(g.value(r.out), expected), 1e-3 + 1e-12);
    }
}

TEST(VariantEquivalence, EmptyMatchSetEqualsNoCft) {
    VariantOptions opt;
    opt.cpm = small_cpm();
    const Pipeline full = make_variant(Variant::Full, {}, 7, opt);
    const Pipeline none = make_variant(Variant::NoCft, {}, 7, opt);
    Rng rng(7);
    const Tensor rgb = random_image(64, 64, rng);
    MatchSet empty;
    empty.image_height = empty.image_width = 64;
    EXPECT_EQ(max_abs_diff(forward_value(full, rgb, empty), forward_value(none, rgb, sample_matches())), 0.0);
}

TEST(VariantEquivalence, MatchesChangeTheFullVariant) {
    VariantOptions opt;
    opt.cpm = small_cpm();
    const Pipeline full = make_variant(Variant::Full, {}, 8, opt);
    Rng rng(8);
    const Tensor rgb = random_image(64, 64, rng);
    MatchSet empty;
    EXPECT_GT(max_abs_diff(forward_value(full, rgb, empty), forward_value(full, rgb, sample_matches())), 1e-9);
}

TEST(VariantEquivalence, DirectReplaceIsSingleNeighbourTopOne) {
    VariantOptions opt;
    opt.cpm = small_cpm();
    const Pipeline direct = make_variant(Variant::DirectReplaceCft, {}, 9, opt);
    opt.cft.k = 1;
    opt.cft.n = 1;
    const Pipeline full = make_variant(Variant::Full, {}, 9, opt);
    Rng rng(9);
    const Tensor rgb = random_image(64, 64, rng);
    EXPECT_EQ(max_abs_diff(forward_value(direct, rgb, sample_matches()), forward_value(full, rgb, sample_matches())),
              0.0);
}

TEST(VariantEquivalence, NoCftIgnoresMatches) {
    const Pipeline none = make_variant(Variant::NoCft, {}, 10);
    Rng rng(10);
    const Tensor rgb = random_image(64, 64, rng);
    EXPECT_EQ(max_abs_diff(forward_value(none, rgb, {}), forward_value(none, rgb, sample_matches())), 0.0);
}

TEST(VariantEquivalence, AllVariantsProduceValidRgb) {
    const auto scene = synth::make_scene(synth::SceneKind::RealStyle, 48, 11);
    VariantOptions opt;
    opt.cpm = small_cpm();
    for (Variant v : all_variants()) {
        const Pipeline p = make_variant(v, {}, 11, opt);
        const auto out = p.remove(scene.shadow);
        EXPECT_EQ(out.height(), 48) << to_string(v);
        EXPECT_EQ(out.width(), 48) << to_string(v);
        for (double x : out.data()) {
            ASSERT_TRUE(std::isfinite(x)) << to_string(v);
            ASSERT_GE(x, 0.0);
            ASSERT_LE(x, 1.0);
        }
    }
}

TEST(VariantEquivalence, OddSizesArePaddedAndCropped) {
    const Pipeline p = make_variant(Variant::TmMatch, {}, 12);
    const auto scene = synth::make_scene(synth::SceneKind::Separable, 37, 12);
    const auto out = p.remove(scene.shadow);
    EXPECT_EQ(out.height(), 37);
    EXPECT_EQ(out.width(), 37);
}

TEST(VariantEquivalence, CpmVariantsNeedACpm) {
    EXPECT_THROW(make_variant(Variant::Full, {}, 1), ConfigError);
    EXPECT_THROW(make_variant(Variant::DirectReplaceCft, {}, 1), ConfigError);
    EXPECT_NO_THROW(make_variant(Variant::MnetMatchStub, {}, 1));
}

TEST(VariantEquivalence, DenseOnlyHasNoStageOneParameters) {
    const Pipeline p = make_variant(Variant::DenseUnetOnly, {}, 13);
    for (const auto& param : p.net().params().all()) EXPECT_EQ(param.name.rfind("stage2.", 0), 0u) << param.name;
    EXPECT_EQ(p.net().max_stride(), 4);
}

TEST(Matchers, TemplateMatcherFindsLitSources) {
    const auto board = synth::make_checkerboard(128, 8, 32, 32, 48, 48);
    cpm::MatchOptions opt;
    const MatchSet m = TemplateMatcher(opt).match(board.shadow);
    ASSERT_FALSE(m.queries.empty());
    for (const auto& q : m.queries) {
        EXPECT_LE(q.matches.size(), 8u);
        for (std::size_t i = 0; i < q.matches.size(); ++i) {
            EXPECT_GE(q.matches[i].score, 0.0);
            EXPECT_LE(q.matches[i].score, 1.0 + 1e-12);
            if (i) {
                EXPECT_GE(q.matches[i - 1].score, q.matches[i].score);
            }
        }
    }
}

TEST(Matchers, ExternalProviderIsUsed) {
    ExternalMatcher none;
    const auto img = synth::make_scene(synth::SceneKind::Separable, 64, 1).shadow;
    EXPECT_TRUE(none.match(img).empty());
    ExternalMatcher hooked([](const imaging::ImagePlane&) { return sample_matches(); });
    EXPECT_EQ(hooked.match(img).match_count(), 4u);
}

TEST(Loss, ZeroAtOptimum) {
    Rng rng(14);
    const Tensor gt = random_image(16, 16, rng);
    RandomConvExtractor ex;
    nn::Graph g;
    StageOneOutput s1;
    s1.lab = g.constant(imaging::lab_normalized_chw(imaging::rgb_to_lab(imaging::from_chw(gt, imaging::ColorSpace::RGB))));
    const auto v = loss_values(g, canet_loss(g, &s1, g.constant(gt), gt, ex, {}));
    EXPECT_EQ(v.rem, 0.0);
    EXPECT_EQ(v.per, 0.0);
    EXPECT_EQ(v.grad, 0.0);
    EXPECT_EQ(v.total, 0.0);
}

TEST(Loss, SinglePixelResidualUnderL2Norm) {
    Tensor gt = Tensor::chw(3, 1, 1);
    gt.fill(0.25);
    Tensor out = gt;
    out[1] += 0.5;
    RandomConvExtractor ex;
    nn::Graph g;
    StageOneOutput s1;
    s1.lab = g.constant(imaging::lab_normalized_chw(imaging::rgb_to_lab(imaging::from_chw(gt, imaging::ColorSpace::RGB))));
    LossOptions opt;
    opt.weights = {1.0, 0.0, 0.0};
    opt.norm = RemNorm::L2Norm;
    const auto v = loss_values(g, canet_loss(g, &s1, g.constant(out), gt, ex, opt));
    EXPECT_NEAR(v.rem, 0.5, 1e-12);
    EXPECT_NEAR(v.total, 0.5, 1e-12);
    opt.norm = RemNorm::MeanSquared;
    nn::Graph g2;
    StageOneOutput s2{{}, {}, g2.constant(g.value(s1.lab))};
    EXPECT_NEAR(loss_values(g2, canet_loss(g2, &s2, g2.constant(out), gt, ex, opt)).rem, 0.25 / 3.0, 1e-12);
}

TEST(Loss, TotalIsWeightedSumOfNonNegativeTerms) {
    Rng rng(15);
    const Tensor gt = random_image(16, 16, rng), out = random_image(16, 16, rng);
    RandomConvExtractor ex;
    nn::Graph g;
    LossOptions opt;
    opt.weights = {1.5, 7.0, 3.0};
    const auto v = loss_values(g, canet_loss(g, nullptr, g.constant(out), gt, ex, opt));
    EXPECT_GT(v.rem, 0.0);
    EXPECT_GT(v.per, 0.0);
    EXPECT_GT(v.grad, 0.0);
    EXPECT_NEAR(v.total, 1.5 * v.rem + 7.0 * v.per + 3.0 * v.grad, 1e-12);
}

TEST(Loss, ShapeMismatchThrows) {
    RandomConvExtractor ex;
    nn::Graph g;
    EXPECT_THROW(canet_loss(g, nullptr, g.constant(Tensor::chw(3, 8, 8)), Tensor::chw(3, 8, 4), ex, {}), ShapeError);
}

TEST(Loss, GradientWrtOutput) {
    Rng rng(16);
    const Tensor gt = random_image(8, 8, rng);
    RandomConvExtractor ex;
    for (RemNorm norm : {RemNorm::MeanSquared, RemNorm::L2Norm}) {
        LossOptions opt;
        opt.norm = norm;
        auto fn = [&](nn::Graph& g, const std::vector<Var>& in) { return canet_loss(g, nullptr, in[0], gt, ex, opt).total; };
        EXPECT_LT(oracle::max_relative_error(fn, {random_image(8, 8, rng)}, 10, 17), 1e-4);
    }
}

TEST(Loss, GradientWrtNetworkParameters) {
    Rng rng(18);
    const Tensor rgb = random_image(8, 8, rng), gt = random_image(8, 8, rng);
    RandomConvExtractor ex;
    VariantOptions vopt;
    vopt.cpm = small_cpm();
    Pipeline p = make_variant(Variant::Full, {}, 19, vopt);
    MatchSet m;
    m.image_height = m.image_width = 8;
    auto loss = [&](bool backward) {
        nn::Graph g;
        auto r = p.forward(g, g.constant(rgb), m);
        Var total = canet_loss(g, &*r.stage_one, r.out, gt, ex, {}).total;
        if (backward) g.backward(total);
        return g.value(total)[0];
    };
    p.net().params().zero_grad();
    loss(true);
    auto& params = p.net().params().all();
    double worst = 0.0;
    for (int i = 0; i < 10; ++i) {
        auto& prm = params[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(params.size()) - 1))];
        const std::size_t idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(prm.value.size()) - 1));
        const double saved = prm.value[idx], h = 1e-6;
        prm.value[idx] = saved + h;
        const double up = loss(false);
        prm.value[idx] = saved - h;
        const double down = loss(false);
        prm.value[idx] = saved;
        const double numeric = (up - down) / (2 * h);
        worst = std::max(worst, std::abs(numeric - prm.grad[idx]) /
                                    std::max({std::abs(numeric), std::abs(prm.grad[idx]), 1e-6}));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(ColorOps, LabToRgbMatchesPixelFunction) {
    Rng rng(20);
    Tensor lab = Tensor::chw(3, 4, 5);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 5; ++x) {
            lab.at(0, y, x) = rng.uniform(0.05, 0.95);
            lab.at(1, y, x) = rng.uniform(-0.3, 0.3);
            lab.at(2, y, x) = rng.uniform(-0.3, 0.3);
        }
    nn::Graph g;
    const Tensor& rgb = g.value(imaging::lab_to_rgb(g, g.constant(lab)));
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 5; ++x) {
            const auto p = imaging::lab_to_rgb_pixel(lab.at(0, y, x) * 100, lab.at(1, y, x) * 128, lab.at(2, y, x) * 128);
            // The pixel function clips to the gamut; the graph op does not.
            for (int c = 0; c < 3; ++c)
                EXPECT_NEAR(std::clamp(rgb.at(c, y, x), 0.0, 1.0), p[static_cast<std::size_t>(c)], 1e-12);
        }
}

TEST(ColorOps, LabToRgbGradient) {
    Rng rng(21);
    Tensor lab = Tensor::chw(3, 3, 3);
    for (int i = 0; i < 9; ++i) {
        lab[static_cast<std::size_t>(i)] = rng.uniform(0.1, 0.9);
        lab[static_cast<std::size_t>(9 + i)] = rng.uniform(-0.2, 0.2);
        lab[static_cast<std::size_t>(18 + i)] = rng.uniform(-0.2, 0.2);
    }
    Tensor w = Tensor::chw(3, 3, 3);
    for (auto& v : w.values()) v = rng.normal(0, 1);
    auto fn = [&](nn::Graph& g, const std::vector<Var>& in) {
        return nn::sum(g, nn::mul(g, imaging::lab_to_rgb(g, in[0]), g.constant(w)));
    };
    EXPECT_LT(oracle::max_relative_error(fn, {lab}, 20, 22), 1e-5);
}

TEST(GraphOps, LogitAndCropGradients) {
    Rng rng(23);
    Tensor x = Tensor::chw(2, 5, 6);
    for (auto& v : x.values()) v = rng.uniform(0.05, 0.95);
    auto fn = [](nn::Graph& g, const std::vector<Var>& in) {
        Var c = nn::crop(g, nn::logit(g, in[0]), 1, 2, 3, 3);
        return nn::sum(g, nn::mul(g, c, c));
    };
    EXPECT_LT(oracle::max_relative_error(fn, {x}, 15, 24), 1e-5);
    nn::Graph g;
    EXPECT_EQ(g.value(nn::crop(g, g.constant(x), 1, 2, 3, 3)).at(1, 0, 0), x.at(1, 1, 2));
    EXPECT_THROW(nn::crop(g, g.constant(x), 3, 0, 3, 3), ShapeError);
    EXPECT_THROW(nn::logit(g, g.constant(Tensor::chw(1, 1, 1))), ValidationError);
}

TEST(Pretrained, BackboneIsLoadedAndFrozen) {
    CaNet source({}, true, 25);
    Archive ar;
    store_parameters(source.params(), ar, "backbone.");
    const auto path = std::filesystem::temp_directory_path() / "canet_backbone_test.cnt";
    save_archive(ar, path);
    NetworkConfig cfg;
    cfg.backbone.kind = BackboneKind::PretrainedDense;
    cfg.backbone.weights_path = path.string();
    CaNet net(cfg, true, 26);
    EXPECT_EQ(net.params().hash("backbone."), source.params().hash("backbone."));
    EXPECT_NE(net.params().hash("stage1."), source.params().hash("stage1."));
    for (const auto& p : net.params().all()) EXPECT_EQ(p.frozen, p.name.rfind("backbone.", 0) == 0) << p.name;
    std::filesystem::remove(path);
    cfg.backbone.weights_path.clear();
    EXPECT_THROW(CaNet(cfg, true, 1), ConfigError);
}

TEST(Timing, TrainingStepOn64) {
    VariantOptions opt;
    opt.cpm = small_cpm();
    Pipeline p = make_variant(Variant::Full, {}, 27, opt);
    Rng rng(27);
    const Tensor rgb = random_image(64, 64, rng), gt = random_image(64, 64, rng);
    RandomConvExtractor ex;
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < 3; ++i) {
        nn::Graph g;
        auto r = p.forward(g, g.constant(rgb), sample_matches());
        g.backward(canet_loss(g, &*r.stage_one, r.out, gt, ex, {}).total);
    }
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() / 3;
    RecordProperty("ms_per_step", std::to_string(ms));
    std::printf("forward+backward on 64x64: %.1f ms\n", ms);
    EXPECT_LT(ms, 2000.0);
}
