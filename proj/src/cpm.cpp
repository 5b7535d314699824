#include "canet/cpm.hpp"

#include <algorithm>
#include <cmath>

#include "canet/error.hpp"
#include "canet/nn/ops.hpp"

namespace canet::cpm {

using nn::Graph;
using nn::Var;

Tensor make_input(const imaging::ImagePlane& shadow, const imaging::ImagePlane& unaware, int row, int col) {
    const int s = data::kPatchSize;
    if (shadow.height() != unaware.height() || shadow.width() != unaware.width()) {
        throw ShapeError("shadow and shadow-unaware images differ in size");
    }
    if (!data::patch_inside(data::PatchRef{0, row, col}, shadow.height(), shadow.width())) {
        throw ShapeError("patch at (" + std::to_string(row) + ", " + std::to_string(col) + ") leaves the image");
    }
    Tensor t = Tensor::chw(kInputChannels, s, s);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x)
            for (int c = 0; c < 3; ++c) {
                t.at(c, y, x) = shadow.at(row + y, col + x, c) - 0.5;
                t.at(c + 3, y, x) = unaware.at(row + y, col + x, c) - 0.5;
            }
    return t;
}

int CpmPrediction::type() const {
    const auto it = std::max_element(type_probs.begin(), type_probs.end());
    return class_to_type(static_cast<int>(it - type_probs.begin()));
}

CpmNet::CpmNet(std::uint64_t seed, CpmConfig config) : config_(config) {
    if (!(config.width_scale > 0.0)) throw ConfigError("cpm width_scale must be positive");
    Rng rng(seed);
    const int c64 = std::max(1, static_cast<int>(std::lround(64 * config.width_scale)));
    const int c96 = std::max(1, static_cast<int>(std::lround(96 * config.width_scale)));
    conv1_ = nn::Conv2d(params_, "cpm.conv1", kInputChannels, c64, 3, 2, rng);
    res1_ = nn::ResidualBlock(params_, "cpm.res1", c64, rng);
    conv2_ = nn::Conv2d(params_, "cpm.conv2", c64, c96, 3, 2, rng);
    res2_ = nn::ResidualBlock(params_, "cpm.res2", c96, rng);
    conv3_ = nn::Conv2d(params_, "cpm.conv3", c96, c96, 3, 2, rng);
    res3_ = nn::ResidualBlock(params_, "cpm.res3", c96, rng);
    conv4_ = nn::Conv2d(params_, "cpm.conv4", c96, c64, 3, 1, rng);
    bottleneck_ = nn::Linear(params_, "cpm.bottleneck", c64 * 16, kFeatureDim, rng);
    cls1_ = nn::Linear(params_, "cpm.cls1", 2 * kFeatureDim, 256, rng);
    cls2_ = nn::Linear(params_, "cpm.cls2", 256, 128, rng);
    cls3_ = nn::Linear(params_, "cpm.cls3", 128, 3, rng);
    reg1_ = nn::Linear(params_, "cpm.reg1", 2 * kFeatureDim, 256, rng);
    reg2_ = nn::Linear(params_, "cpm.reg2", 256, 128, rng);
    reg3_ = nn::Linear(params_, "cpm.reg3", 128, 1, rng);
}

Var CpmNet::features(Graph& g, Var input, std::vector<std::vector<int>>* shapes) const {
    const auto& in = g.value(input);
    if (in.shape() != std::vector<int>{kInputChannels, data::kPatchSize, data::kPatchSize}) {
        throw ShapeError("cpm input must be [6, 32, 32], got " + shape_string(in.shape()));
    }
    auto trace = [&](Var v) {
        if (shapes) shapes->push_back(g.value(v).shape());
        return v;
    };
    Var x = trace(nn::relu(g, conv1_(g, input)));
    x = trace(res1_(g, x));
    x = trace(nn::relu(g, conv2_(g, x)));
    x = trace(res2_(g, x));
    x = trace(nn::relu(g, conv3_(g, x)));
    x = trace(res3_(g, x));
    x = trace(nn::relu(g, conv4_(g, x)));
    const int flat = static_cast<int>(g.value(x).size());
    x = nn::reshape(g, x, {flat});
    return trace(bottleneck_(g, x));
}

CpmNet::Heads CpmNet::heads(Graph& g, Var f1, Var f2) const {
    Var pair = nn::concat(g, {f1, f2});
    Heads h;
    h.logits = cls3_(g, nn::relu(g, cls2_(g, nn::relu(g, cls1_(g, pair)))));
    h.score_raw = reg3_(g, nn::relu(g, reg2_(g, nn::relu(g, reg1_(g, pair)))));
    h.probs = nn::softmax(g, h.logits);
    h.score = nn::clamp(g, h.score_raw, 0.0, 1.0);
    return h;
}

Tensor CpmNet::extract_features(const Tensor& input) const {
    Graph g;
    return g.value(features(g, g.constant(input)));
}

Tensor CpmNet::extract_features(const std::vector<Tensor>& batch) const {
    Tensor out({static_cast<int>(batch.size()), kFeatureDim});
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const Tensor f = extract_features(batch[b]);
        std::copy(f.values().begin(), f.values().end(), out.data() + b * kFeatureDim);
    }
    return out;
}

CpmPrediction CpmNet::predict(const Tensor& f1, const Tensor& f2) const {
    Graph g;
    const Heads h = heads(g, g.constant(f1), g.constant(f2));
    CpmPrediction p;
    for (int i = 0; i < 3; ++i) p.type_probs[i] = g.value(h.probs)[i];
    p.score = g.value(h.score)[0];
    p.raw_score = g.value(h.score_raw)[0];
    return p;
}

CpmLoss cpm_loss(const CpmPrediction& pred, const data::PairLabel& label, RegressionLoss mode) {
    CpmLoss l;
    const double r = pred.raw_score - label.correlation;
    l.reg = mode == RegressionLoss::Absolute ? std::abs(r) : r * r;
    l.cls = -std::log(pred.type_probs[type_to_class(label.type)]);
    return l;
}

CpmLossVars cpm_loss(Graph& g, const CpmNet::Heads& heads, const data::PairLabel& label, RegressionLoss mode) {
    Var target = g.constant(Tensor({1}, label.correlation));
    CpmLossVars v;
    v.reg = mode == RegressionLoss::Absolute ? nn::mean_abs_error(g, heads.score_raw, target)
                                             : nn::mean_squared_error(g, heads.score_raw, target);
    v.cls = nn::cross_entropy(g, heads.logits, type_to_class(label.type));
    v.total = nn::add(g, v.reg, v.cls);
    return v;
}

std::vector<data::PatchRef> grid_patches(int height, int width, int stride) {
    if (stride < 1) throw ConfigError("grid stride must be >= 1");
    std::vector<data::PatchRef> out;
    for (int r = 0; r + data::kPatchSize <= height; r += stride)
        for (int c = 0; c + data::kPatchSize <= width; c += stride) out.push_back(data::PatchRef{0, r, c});
    return out;
}

namespace {

double patch_mean(const imaging::LightnessPlane& lum, const data::PatchRef& p) {
    double s = 0.0;
    for (int y = 0; y < data::kPatchSize; ++y)
        for (int x = 0; x < data::kPatchSize; ++x) s += lum.at(p.row + y, p.col + x);
    return s / (data::kPatchSize * data::kPatchSize);
}

}  // namespace

std::vector<bool> lightness_queries(const imaging::ImagePlane& shadow, const std::vector<data::PatchRef>& grid,
                                    double ratio) {
    std::vector<bool> out(grid.size(), false);
    if (grid.empty()) return out;
    const auto lum = imaging::lightness(shadow);
    std::vector<double> means;
    for (const auto& p : grid) means.push_back(patch_mean(lum, p));
    std::vector<double> sorted = means;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    for (std::size_t i = 0; i < grid.size(); ++i) out[i] = means[i] < ratio * median;
    return out;
}

MatchSet match_image(const CpmNet& net, const imaging::ImagePlane& shadow, const imaging::ImagePlane& unaware,
                     const MatchOptions& options, MatchStats* stats) {
    if (shadow.height() < data::kPatchSize || shadow.width() < data::kPatchSize) {
        throw ShapeError("matching needs an image of at least 32x32");
    }
    MatchStats local;
    MatchStats& st = stats ? *stats : local;
    st = MatchStats{};

    const auto grid = grid_patches(shadow.height(), shadow.width(), options.grid_stride);
    st.grid_patches = static_cast<int>(grid.size());

    // Phase 1: one feature extraction per grid patch.
    std::vector<Tensor> feats;
    feats.reserve(grid.size());
    for (const auto& p : grid) {
        feats.push_back(net.extract_features(make_input(shadow, unaware, p.row, p.col)));
        ++st.feature_extractions;
    }

    std::vector<bool> is_shadow(grid.size(), false);
    if (options.selection == QuerySelection::Lightness) {
        is_shadow = lightness_queries(shadow, grid, options.lightness_ratio);
    } else {
        const auto lum = imaging::lightness(shadow);
        std::size_t anchor = 0;
        double brightest = -1.0;
        for (std::size_t i = 0; i < grid.size(); ++i) {
            const double m = patch_mean(lum, grid[i]);
            if (m > brightest) {
                brightest = m;
                anchor = i;
            }
        }
        for (std::size_t i = 0; i < grid.size(); ++i) {
            if (i == anchor) continue;
            const auto p = net.predict(feats[i], feats[anchor]);
            is_shadow[i] = p.type_probs[type_to_class(1)] > p.type_probs[type_to_class(0)];
        }
    }

    // Phase 2: score candidate pairs from the cached features.
    MatchSet result;
    result.image_height = shadow.height();
    result.image_width = shadow.width();
    for (std::size_t q = 0; q < grid.size(); ++q) {
        if (!is_shadow[q]) continue;
        QueryMatches qm;
        qm.query = grid[q];
        for (std::size_t s = 0; s < grid.size(); ++s) {
            if (is_shadow[s]) continue;
            const auto p = net.predict(feats[q], feats[s]);
            ++st.pair_evaluations;
            if (options.type_gate && !(p.type_probs[type_to_class(1)] > 0.5)) continue;
            if (p.score < options.score_floor) continue;
            qm.matches.push_back(Match{grid[s], p.score});
        }
        rank_matches(qm, static_cast<std::size_t>(std::max(0, options.k_candidates)));
        result.queries.push_back(std::move(qm));
        ++st.queries;
    }
    return result;
}

MatchSet match_image(const CpmNet& net, const imaging::ImagePlane& shadow, const MatchOptions& options,
                     MatchStats* stats) {
    return match_image(net, shadow, imaging::shadow_unaware_image(shadow), options, stats);
}

}  // namespace canet::cpm
