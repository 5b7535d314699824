#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "canet/cft.hpp"
#include "canet/cpm.hpp"
#include "canet/imaging.hpp"
#include "canet/matchset.hpp"
#include "canet/nn/layers.hpp"

namespace canet::net {

enum class Variant { Full, TmMatch, MnetMatchStub, NoCft, DirectReplaceCft, DenseUnetOnly };

Variant parse_variant(const std::string& name);
std::string to_string(Variant v);
const std::vector<Variant>& all_variants();
bool uses_stage_one(Variant v);
bool needs_cpm(Variant v);

enum class BackboneKind { ToyDense, PretrainedDense };

struct BackboneConfig {
    BackboneKind kind = BackboneKind::ToyDense;
    std::vector<int> widths{16, 24, 32};
    std::vector<int> strides{2, 4, 8};
    // PretrainedDense: checkpoint holding "backbone.*" tensors; they are
    // loaded and frozen.
    std::string weights_path;
};

// What the second stage refines. Input keeps the shadow image as the base,
// so stage one only steers the refinement through its LAB guidance.
enum class RefineBase { Input, StageOne };

struct NetworkConfig {
    BackboneConfig backbone;
    RefineBase refine_base = RefineBase::Input;
    // Pyramid levels (indices into backbone.strides) that receive CFT.
    std::vector<int> cft_levels{1, 2};
    int decoder_width = 16;
    int unet_width = 12;
    int unet_growth = 6;
};

struct FeatureLevel {
    nn::Var map;
    int stride = 1;
};

// Normalized LAB (L/100, A/128, B/128) predictions of the first stage.
struct StageOneOutput {
    nn::Var l_hat;   // [1, H, W]
    nn::Var ab_hat;  // [2, H, W]
    nn::Var lab;     // [3, H, W], concat(l_hat, ab_hat)
};

class CaNet {
public:
    CaNet(const NetworkConfig& config, bool with_stage_one, std::uint64_t seed);

    // rgb: [3, H, W] in [0,1]; H and W must be multiples of the deepest stride.
    std::vector<FeatureLevel> backbone(nn::Graph& g, nn::Var rgb) const;
    StageOneOutput stage_one(nn::Graph& g, nn::Var rgb, const MatchSet& matches, const cft::CftConfig& cfg) const;
    // Encoder-decoder over concat(l_hat, ab_hat, rgb) (6 channels). The
    // output is sigmoid(logit(base) + residual), base being the image the
    // refinement starts from.
    nn::Var stage_two(nn::Graph& g, nn::Var l_hat, nn::Var ab_hat, nn::Var rgb, nn::Var base) const;

    bool has_stage_one() const { return with_stage_one_; }
    int max_stride() const;
    const NetworkConfig& config() const { return config_; }
    nn::ParamSet& params() { return params_; }
    const nn::ParamSet& params() const { return params_; }

private:
    struct Stage {
        nn::Conv2d down;
        nn::DenseBlock dense;
        nn::Conv2d transition;
    };

    NetworkConfig config_;
    bool with_stage_one_;
    nn::ParamSet params_;
    std::vector<Stage> encoder_;
    std::vector<nn::Conv2d> decoder_merge_;
    std::vector<nn::ResidualBlock> decoder_res_;
    nn::Conv2d top_, full_res_, l_head_, ab_head_;
    std::vector<Stage> unet_down_;
    std::vector<nn::Conv2d> unet_up_;
    nn::Conv2d unet_out_;
};

// Feature extractor for the perceptual term.
class PerceptualExtractor {
public:
    virtual ~PerceptualExtractor() = default;
    virtual std::vector<nn::Var> features(nn::Graph& g, nn::Var rgb) const = 0;
};

// Four frozen random 3x3 convolutions with ReLU (strides 1, 2, 1, 2).
class RandomConvExtractor : public PerceptualExtractor {
public:
    explicit RandomConvExtractor(std::uint64_t seed = 1234);
    std::vector<nn::Var> features(nn::Graph& g, nn::Var rgb) const override;

private:
    nn::ParamSet params_;
    std::vector<nn::Conv2d> layers_;
};

struct LossWeights {
    double rem = 1.0;
    double per = 25.0;
    double grad = 5.0;
};

// MeanSquared: mean of squared residuals. L2Norm: sqrt of their sum.
enum class RemNorm { MeanSquared, L2Norm };

struct LossOptions {
    LossWeights weights;
    RemNorm norm = RemNorm::MeanSquared;
    bool include_stage_one = true;
};

struct LossTerms {
    nn::Var rem, per, grad, total;
};

struct LossValues {
    double rem = 0, per = 0, grad = 0, total = 0;
};

// gt_rgb: [3, H, W] in [0,1]; the stage-one term compares against the
// normalized LAB of gt_rgb.
LossTerms canet_loss(nn::Graph& g, const StageOneOutput* stage_one, nn::Var out, const Tensor& gt_rgb,
                     const PerceptualExtractor& extractor, const LossOptions& options);
LossValues loss_values(const nn::Graph& g, const LossTerms& terms);

// Produces the MatchSet a variant feeds into CFT.
class Matcher {
public:
    virtual ~Matcher() = default;
    virtual MatchSet match(const imaging::ImagePlane& shadow) const = 0;
    virtual std::string name() const = 0;
};

class CpmMatcher : public Matcher {
public:
    CpmMatcher(std::shared_ptr<const cpm::CpmNet> net, cpm::MatchOptions options)
        : net_(std::move(net)), options_(options) {}
    MatchSet match(const imaging::ImagePlane& shadow) const override;
    std::string name() const override { return "cpm"; }
    const cpm::CpmNet& net() const { return *net_; }
    const cpm::MatchOptions& options() const { return options_; }

private:
    std::shared_ptr<const cpm::CpmNet> net_;
    cpm::MatchOptions options_;
};

// Classical matching: normalized cross-correlation of shadow-unaware
// lightness patches on the same grid and query rule as the learned matcher.
class TemplateMatcher : public Matcher {
public:
    explicit TemplateMatcher(cpm::MatchOptions options = {}) : options_(options) {}
    MatchSet match(const imaging::ImagePlane& shadow) const override;
    std::string name() const override { return "tm"; }

private:
    cpm::MatchOptions options_;
};

// Hook for an outside matcher; without a provider it returns no matches.
class ExternalMatcher : public Matcher {
public:
    using Provider = std::function<MatchSet(const imaging::ImagePlane&)>;
    explicit ExternalMatcher(Provider provider = {}) : provider_(std::move(provider)) {}
    MatchSet match(const imaging::ImagePlane& shadow) const override;
    std::string name() const override { return "external"; }

private:
    Provider provider_;
};

class NullMatcher : public Matcher {
public:
    MatchSet match(const imaging::ImagePlane& shadow) const override;
    std::string name() const override { return "none"; }
};

struct ForwardResult {
    std::optional<StageOneOutput> stage_one;
    nn::Var out;
};

// A network plus the matcher and transfer settings of one variant.
class Pipeline {
public:
    Pipeline(Variant variant, std::unique_ptr<CaNet> net, std::shared_ptr<const Matcher> matcher,
             cft::CftConfig cft);

    Variant variant() const { return variant_; }
    CaNet& net() { return *net_; }
    const CaNet& net() const { return *net_; }
    const Matcher& matcher() const { return *matcher_; }
    const cft::CftConfig& cft() const { return cft_; }

    MatchSet match(const imaging::ImagePlane& shadow) const { return matcher_->match(shadow); }

    // rgb is [3, H, W] with H, W multiples of the deepest stride.
    ForwardResult forward(nn::Graph& g, nn::Var rgb, const MatchSet& matches) const;

    // Inference on an arbitrary-size image (replicate-padded, then cropped).
    imaging::ImagePlane remove(const imaging::ImagePlane& shadow, const MatchSet& matches) const;
    imaging::ImagePlane remove(const imaging::ImagePlane& shadow) const { return remove(shadow, match(shadow)); }

private:
    Variant variant_;
    std::unique_ptr<CaNet> net_;
    std::shared_ptr<const Matcher> matcher_;
    cft::CftConfig cft_;
};

struct VariantOptions {
    cft::CftConfig cft;
    cpm::MatchOptions match;
    std::shared_ptr<const cpm::CpmNet> cpm;
    ExternalMatcher::Provider external;
};

// Throws ConfigError when the variant needs a CPM and none is supplied.
Pipeline make_variant(Variant variant, const NetworkConfig& config, std::uint64_t seed,
                      const VariantOptions& options = {});

}  // namespace canet::net
