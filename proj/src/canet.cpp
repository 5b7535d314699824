#include "canet/canet.hpp"

#include <algorithm>
#include <cmath>

#include "canet/archive.hpp"
#include "canet/color_ops.hpp"
#include "canet/error.hpp"
#include "canet/nn/ops.hpp"

namespace canet::net {

using nn::Graph;
using nn::Var;

namespace {

const std::vector<std::pair<Variant, std::string>>& variant_names() {
    static const std::vector<std::pair<Variant, std::string>> names{
        {Variant::Full, "full"},
        {Variant::TmMatch, "tm_match"},
        {Variant::MnetMatchStub, "mnet_match_stub"},
        {Variant::NoCft, "no_cft"},
        {Variant::DirectReplaceCft, "direct_replace_cft"},
        {Variant::DenseUnetOnly, "dense_unet_only"},
    };
    return names;
}

void scale_parameter(nn::ParamSet& params, const std::string& name, double s) {
    for (auto& v : params.at(name).value.values()) v *= s;
}

// Normalized LAB of an RGB CHW tensor, as a constant.
Tensor normalized_lab(const Tensor& rgb) {
    return imaging::lab_normalized_chw(imaging::rgb_to_lab(imaging::from_chw(rgb, imaging::ColorSpace::RGB)));
}

Tensor pad_replicate(const Tensor& t, int h, int w) {
    Tensor out = Tensor::chw(t.channels(), h, w);
    for (int c = 0; c < t.channels(); ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at(c, y, x) = t.at(c, std::min(y, t.height() - 1), std::min(x, t.width() - 1));
    return out;
}

double ncc(const imaging::LightnessPlane& lum, const data::PatchRef& a, const data::PatchRef& b) {
    const int n = data::kPatchSize * data::kPatchSize;
    double ma = 0.0, mb = 0.0;
    for (int y = 0; y < data::kPatchSize; ++y)
        for (int x = 0; x < data::kPatchSize; ++x) {
            ma += lum.at(a.row + y, a.col + x);
            mb += lum.at(b.row + y, b.col + x);
        }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (int y = 0; y < data::kPatchSize; ++y)
        for (int x = 0; x < data::kPatchSize; ++x) {
            const double da = lum.at(a.row + y, a.col + x) - ma, db = lum.at(b.row + y, b.col + x) - mb;
            sab += da * db;
            saa += da * da;
            sbb += db * db;
        }
    if (saa <= 0.0 || sbb <= 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

}  // namespace

Variant parse_variant(const std::string& name) {
    for (const auto& [v, n] : variant_names())
        if (n == name) return v;
    throw ConfigError("unknown variant: " + name);
}

std::string to_string(Variant v) {
    for (const auto& [value, n] : variant_names())
        if (value == v) return n;
    return "unknown";
}

const std::vector<Variant>& all_variants() {
    static const std::vector<Variant> all = [] {
        std::vector<Variant> out;
        for (const auto& [v, n] : variant_names()) out.push_back(v);
        return out;
    }();
    return all;
}

bool uses_stage_one(Variant v) { return v != Variant::DenseUnetOnly; }
bool needs_cpm(Variant v) { return v == Variant::Full || v == Variant::DirectReplaceCft; }

CaNet::CaNet(const NetworkConfig& config, bool with_stage_one, std::uint64_t seed)
    : config_(config), with_stage_one_(with_stage_one) {
    Rng rng(seed);
    const auto& bb = config.backbone;
    if (with_stage_one) {
        if (bb.widths.size() < 2 || bb.widths.size() != bb.strides.size()) {
            throw ConfigError("backbone needs at least two levels with one width per stride");
        }
        for (std::size_t i = 0; i < bb.strides.size(); ++i) {
            if (bb.strides[i] != (2 << i)) throw ConfigError("backbone strides must be 2, 4, 8, ...");
        }
        for (int level : config.cft_levels) {
            if (level < 0 || level >= static_cast<int>(bb.strides.size())) {
                throw ConfigError("cft level " + std::to_string(level) + " outside the pyramid");
            }
        }
        const int levels = static_cast<int>(bb.widths.size());
        int in = 3;
        for (int i = 0; i < levels; ++i) {
            const std::string name = "backbone.stage" + std::to_string(i);
            Stage s;
            s.down = nn::Conv2d(params_, name + ".down", in, bb.widths[i], 3, 2, rng);
            s.dense = nn::DenseBlock(params_, name + ".dense", bb.widths[i], 2, std::max(1, bb.widths[i] / 2), rng);
            s.transition = nn::Conv2d(params_, name + ".transition", s.dense.out_channels(), bb.widths[i], 1, 1, rng);
            encoder_.push_back(std::move(s));
            in = bb.widths[i];
        }
        const int dw = config.decoder_width;
        top_ = nn::Conv2d(params_, "stage1.top", bb.widths.back(), dw, 3, 1, rng);
        for (int i = levels - 2; i >= 0; --i) {
            const std::string name = "stage1.up" + std::to_string(i);
            decoder_merge_.emplace_back(params_, name + ".merge", dw + bb.widths[i], dw, 3, 1, rng);
            decoder_res_.emplace_back(params_, name + ".res", dw, rng);
        }
        full_res_ = nn::Conv2d(params_, "stage1.full", dw + 3, dw, 3, 1, rng);
        l_head_ = nn::Conv2d(params_, "stage1.l_head", dw, 1, 3, 1, rng);
        ab_head_ = nn::Conv2d(params_, "stage1.ab_head", dw, 2, 3, 1, rng);
        // Small head weights: the first stage starts close to its input.
        scale_parameter(params_, "stage1.l_head.w", 0.1);
        scale_parameter(params_, "stage1.ab_head.w", 0.1);

        if (bb.kind == BackboneKind::PretrainedDense) {
            if (bb.weights_path.empty()) throw ConfigError("pretrained_dense backbone needs a weights file");
            load_parameters(params_, load_archive(bb.weights_path), "backbone.");
            params_.set_frozen("backbone.", true);
        }
    }

    // Own stream for the refinement net so variants with and without stage
    // one start it from the same weights under one seed.
    rng.reseed(~seed);
    const int u = config.unet_width, gr = config.unet_growth;
    const int widths[3] = {u, 2 * u, 2 * u};
    int in = 6;
    for (int i = 0; i < 3; ++i) {
        const std::string name = "stage2.down" + std::to_string(i);
        Stage s;
        s.down = nn::Conv2d(params_, name + ".conv", in, widths[i], 3, i == 0 ? 1 : 2, rng);
        s.dense = nn::DenseBlock(params_, name + ".dense", widths[i], 2, gr, rng);
        s.transition = nn::Conv2d(params_, name + ".transition", s.dense.out_channels(), widths[i], 1, 1, rng);
        unet_down_.push_back(std::move(s));
        in = widths[i];
    }
    unet_up_.emplace_back(params_, "stage2.up1", widths[2] + widths[1], widths[1], 3, 1, rng);
    unet_up_.emplace_back(params_, "stage2.up0", widths[1] + widths[0], widths[0], 3, 1, rng);
    unet_out_ = nn::Conv2d(params_, "stage2.out", widths[0], 3, 3, 1, rng);
    scale_parameter(params_, "stage2.out.w", 0.1);
}

int CaNet::max_stride() const {
    return with_stage_one_ ? std::max(4, config_.backbone.strides.back()) : 4;
}

std::vector<FeatureLevel> CaNet::backbone(Graph& g, Var rgb) const {
    if (!with_stage_one_) throw ConfigError("this network has no backbone");
    const Tensor& in = g.value(rgb);
    if (in.height() % max_stride() != 0 || in.width() % max_stride() != 0) {
        throw ShapeError("input " + shape_string(in.shape()) + " is not a multiple of stride " +
                         std::to_string(max_stride()));
    }
    std::vector<FeatureLevel> levels;
    Var x = nn::add_scalar(g, rgb, -0.5);
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
        x = nn::relu(g, encoder_[i].down(g, x));
        x = nn::relu(g, encoder_[i].transition(g, encoder_[i].dense(g, x)));
        levels.push_back(FeatureLevel{x, config_.backbone.strides[i]});
    }
    return levels;
}

StageOneOutput CaNet::stage_one(Graph& g, Var rgb, const MatchSet& matches, const cft::CftConfig& cfg) const {
    auto levels = backbone(g, rgb);
    for (int i : config_.cft_levels) {
        levels[i].map = cft::apply_cft(g, levels[i].map, levels[i].stride, matches, cfg);
    }
    Var d = nn::relu(g, top_(g, levels.back().map));
    const int n = static_cast<int>(levels.size());
    for (int i = n - 2, k = 0; i >= 0; --i, ++k) {
        d = nn::upsample_nearest(g, d, 2);
        d = nn::relu(g, decoder_merge_[k](g, nn::concat(g, {d, levels[i].map})));
        d = decoder_res_[k](g, d);
    }
    d = nn::upsample_nearest(g, d, config_.backbone.strides.front());
    Var in_lab = g.constant(normalized_lab(g.value(rgb)));
    d = nn::relu(g, full_res_(g, nn::concat(g, {d, in_lab})));

    StageOneOutput out;
    out.l_hat = nn::clamp(g, nn::add(g, nn::slice(g, in_lab, 0, 1), l_head_(g, d)), 0.0, 1.0);
    out.ab_hat = nn::clamp(g, nn::add(g, nn::slice(g, in_lab, 1, 2), ab_head_(g, d)), -1.0, 1.0);
    out.lab = nn::concat(g, {out.l_hat, out.ab_hat});
    return out;
}

Var CaNet::stage_two(Graph& g, Var l_hat, Var ab_hat, Var rgb, Var base) const {
    Var x = nn::concat(g, {l_hat, ab_hat, nn::add_scalar(g, rgb, -0.5)});
    std::vector<Var> skips;
    for (const auto& s : unet_down_) {
        x = nn::relu(g, s.down(g, x));
        x = nn::relu(g, s.transition(g, s.dense(g, x)));
        skips.push_back(x);
    }
    Var u = skips[2];
    u = nn::relu(g, unet_up_[0](g, nn::concat(g, {nn::upsample_nearest(g, u, 2), skips[1]})));
    u = nn::relu(g, unet_up_[1](g, nn::concat(g, {nn::upsample_nearest(g, u, 2), skips[0]})));
    Var residual = unet_out_(g, u);
    Var start = nn::logit(g, nn::clamp(g, base, 1e-3, 1.0 - 1e-3));
    return nn::sigmoid(g, nn::add(g, start, residual));
}

RandomConvExtractor::RandomConvExtractor(std::uint64_t seed) {
    Rng rng(seed);
    const int widths[5] = {3, 8, 8, 16, 16};
    for (int i = 0; i < 4; ++i) {
        layers_.emplace_back(params_, "perceptual.conv" + std::to_string(i), widths[i], widths[i + 1], 3, i % 2 ? 2 : 1,
                             rng);
    }
    params_.set_frozen("", true);
}

std::vector<Var> RandomConvExtractor::features(Graph& g, Var rgb) const {
    std::vector<Var> out;
    Var x = nn::add_scalar(g, rgb, -0.5);
    for (const auto& layer : layers_) {
        x = nn::relu(g, layer(g, x));
        out.push_back(x);
    }
    return out;
}

LossTerms canet_loss(Graph& g, const StageOneOutput* stage_one, Var out, const Tensor& gt_rgb,
                     const PerceptualExtractor& extractor, const LossOptions& options) {
    const Tensor& o = g.value(out);
    if (!o.same_shape(gt_rgb)) {
        throw ShapeError("loss shapes differ: " + shape_string(o.shape()) + " vs " + shape_string(gt_rgb.shape()));
    }
    auto distance = [&](Var a, Var b) {
        return options.norm == RemNorm::MeanSquared ? nn::mean_squared_error(g, a, b) : nn::l2_distance(g, a, b);
    };
    Var gt = g.constant(gt_rgb);
    LossTerms t;
    t.rem = distance(out, gt);
    if (stage_one && options.include_stage_one) {
        t.rem = nn::add(g, t.rem, distance(stage_one->lab, g.constant(normalized_lab(gt_rgb))));
    }
    const auto fo = extractor.features(g, out);
    const auto fg = extractor.features(g, gt);
    t.per = nn::mean_abs_error(g, fo[0], fg[0]);
    for (std::size_t i = 1; i < fo.size(); ++i) t.per = nn::add(g, t.per, nn::mean_abs_error(g, fo[i], fg[i]));
    t.per = nn::scale(g, t.per, 1.0 / static_cast<double>(fo.size()));
    t.grad = nn::mean_abs_error(g, nn::image_gradient(g, out), nn::image_gradient(g, gt));
    const auto& w = options.weights;
    t.total = nn::add(g, nn::add(g, nn::scale(g, t.rem, w.rem), nn::scale(g, t.per, w.per)), nn::scale(g, t.grad, w.grad));
    return t;
}

LossValues loss_values(const Graph& g, const LossTerms& terms) {
    return LossValues{g.value(terms.rem)[0], g.value(terms.per)[0], g.value(terms.grad)[0], g.value(terms.total)[0]};
}

MatchSet CpmMatcher::match(const imaging::ImagePlane& shadow) const { return cpm::match_image(*net_, shadow, options_); }

MatchSet TemplateMatcher::match(const imaging::ImagePlane& shadow) const {
    MatchSet result;
    result.image_height = shadow.height();
    result.image_width = shadow.width();
    if (shadow.height() < data::kPatchSize || shadow.width() < data::kPatchSize) return result;
    const auto grid = cpm::grid_patches(shadow.height(), shadow.width(), options_.grid_stride);
    const auto is_shadow = cpm::lightness_queries(shadow, grid, options_.lightness_ratio);
    const auto lum = imaging::shadow_unaware(imaging::lightness(shadow));
    for (std::size_t q = 0; q < grid.size(); ++q) {
        if (!is_shadow[q]) continue;
        QueryMatches qm;
        qm.query = grid[q];
        for (std::size_t s = 0; s < grid.size(); ++s) {
            if (is_shadow[s]) continue;
            const double score = std::max(0.0, ncc(lum, grid[q], grid[s]));
            if (score < options_.score_floor) continue;
            qm.matches.push_back(Match{grid[s], score});
        }
        rank_matches(qm, static_cast<std::size_t>(std::max(0, options_.k_candidates)));
        result.queries.push_back(std::move(qm));
    }
    return result;
}

MatchSet ExternalMatcher::match(const imaging::ImagePlane& shadow) const {
    if (provider_) return provider_(shadow);
    MatchSet empty;
    empty.image_height = shadow.height();
    empty.image_width = shadow.width();
    return empty;
}

MatchSet NullMatcher::match(const imaging::ImagePlane& shadow) const {
    MatchSet empty;
    empty.image_height = shadow.height();
    empty.image_width = shadow.width();
    return empty;
}

Pipeline::Pipeline(Variant variant, std::unique_ptr<CaNet> net, std::shared_ptr<const Matcher> matcher,
                   cft::CftConfig cft)
    : variant_(variant), net_(std::move(net)), matcher_(std::move(matcher)), cft_(cft) {
    cft_.validate();
    if (uses_stage_one(variant) != net_->has_stage_one()) throw ConfigError("network does not fit the variant");
}

ForwardResult Pipeline::forward(Graph& g, Var rgb, const MatchSet& matches) const {
    ForwardResult r;
    if (variant_ == Variant::DenseUnetOnly) {
        Var lab = g.constant(normalized_lab(g.value(rgb)));
        r.out = net_->stage_two(g, nn::slice(g, lab, 0, 1), nn::slice(g, lab, 1, 2), rgb, rgb);
        return r;
    }
    cft::CftConfig cfg = cft_;
    if (variant_ == Variant::DirectReplaceCft) {
        cfg.k = 1;
        cfg.n = 1;
    }
    const MatchSet none;
    const StageOneOutput s1 = net_->stage_one(g, rgb, variant_ == Variant::NoCft ? none : matches, cfg);
    Var base = net_->config().refine_base == RefineBase::Input
                   ? rgb
                   : nn::clamp(g, imaging::lab_to_rgb(g, s1.lab), 0.0, 1.0);
    r.out = net_->stage_two(g, s1.l_hat, s1.ab_hat, rgb, base);
    r.stage_one = s1;
    return r;
}

imaging::ImagePlane Pipeline::remove(const imaging::ImagePlane& shadow, const MatchSet& matches) const {
    imaging::validate(shadow);
    const int m = net_->max_stride();
    const int h = (shadow.height() + m - 1) / m * m, w = (shadow.width() + m - 1) / m * m;
    Graph g;
    Var rgb = g.constant(pad_replicate(imaging::to_chw(shadow), h, w));
    Var out = forward(g, rgb, matches).out;
    out = nn::crop(g, out, 0, 0, shadow.height(), shadow.width());
    auto img = imaging::from_chw(g.value(out), imaging::ColorSpace::RGB);
    for (auto& v : img.data()) v = std::clamp(v, 0.0, 1.0);
    return img;
}

Pipeline make_variant(Variant variant, const NetworkConfig& config, std::uint64_t seed, const VariantOptions& options) {
    std::shared_ptr<const Matcher> matcher;
    switch (variant) {
        case Variant::Full:
        case Variant::DirectReplaceCft:
            if (!options.cpm) throw ConfigError("variant " + to_string(variant) + " needs a trained CPM");
            matcher = std::make_shared<CpmMatcher>(options.cpm, options.match);
            break;
        case Variant::TmMatch:
            matcher = std::make_shared<TemplateMatcher>(options.match);
            break;
        case Variant::MnetMatchStub:
            matcher = std::make_shared<ExternalMatcher>(options.external);
            break;
        case Variant::NoCft:
        case Variant::DenseUnetOnly:
            matcher = std::make_shared<NullMatcher>();
            break;
    }
    return Pipeline(variant, std::make_unique<CaNet>(config, uses_stage_one(variant), seed), std::move(matcher),
                    options.cft);
}

}  // namespace canet::net
