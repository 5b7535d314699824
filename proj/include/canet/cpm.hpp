#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "canet/datasets.hpp"
#include "canet/imaging.hpp"
#include "canet/matchset.hpp"
#include "canet/nn/graph.hpp"
#include "canet/nn/layers.hpp"

namespace canet::cpm {

// Pair types -1, 0, +1 map to class indices 0, 1, 2.
constexpr int type_to_class(int type) { return type + 1; }
constexpr int class_to_type(int cls) { return cls - 1; }

constexpr int kInputChannels = 6;
constexpr int kFeatureDim = 256;

enum class RegressionLoss { Absolute, Squared };

struct CpmConfig {
    // Scales the 64/96 convolution widths; 1.0 is the reference layout.
    double width_scale = 1.0;
    RegressionLoss regression = RegressionLoss::Absolute;
};

// [6, 32, 32] network input for the patch at (row, col): shadow RGB followed
// by the shadow-unaware RGB, both shifted to be zero-centred.
Tensor make_input(const imaging::ImagePlane& shadow, const imaging::ImagePlane& unaware, int row, int col);

struct CpmPrediction {
    std::array<double, 3> type_probs{};
    double score = 0.0;      // raw_score clamped to [0, 1]
    double raw_score = 0.0;  // unbounded regressor output, what the loss sees
    int type() const;
};

class CpmNet {
public:
    explicit CpmNet(std::uint64_t seed, CpmConfig config = {});

    // Layer layout (width_scale 1):
    //   conv3x3 s2 6->64 (16x16), res64, conv3x3 s2 64->96 (8x8), res96,
    //   conv3x3 s2 96->96 (4x4), res96, conv3x3 s1 96->64 (4x4), fc 1024->256.
    // Heads see the 512-d concatenation of both features:
    //   classifier 512->256->128->3 (softmax), regressor 512->256->128->1 (linear,
    //   trained on the raw output and clamped to [0, 1] when read as a score).
    struct Heads {
        nn::Var logits;
        nn::Var score_raw;
        nn::Var probs;
        nn::Var score;
    };

    // `shapes`, when given, receives the output shape of every stage.
    nn::Var features(nn::Graph& g, nn::Var input, std::vector<std::vector<int>>* shapes = nullptr) const;
    Heads heads(nn::Graph& g, nn::Var f1, nn::Var f2) const;

    Tensor extract_features(const Tensor& input) const;
    // [B, 256] for B inputs.
    Tensor extract_features(const std::vector<Tensor>& batch) const;
    CpmPrediction predict(const Tensor& f1, const Tensor& f2) const;

    nn::ParamSet& params() { return params_; }
    const nn::ParamSet& params() const { return params_; }
    const CpmConfig& config() const { return config_; }
    std::uint64_t weights_hash() const { return params_.hash(); }

private:
    CpmConfig config_;
    nn::ParamSet params_;
    nn::Conv2d conv1_, conv2_, conv3_, conv4_;
    nn::ResidualBlock res1_, res2_, res3_;
    nn::Linear bottleneck_;
    nn::Linear cls1_, cls2_, cls3_;
    nn::Linear reg1_, reg2_, reg3_;
};

struct CpmLoss {
    double reg = 0.0;
    double cls = 0.0;
    double total() const { return reg + cls; }
};

// L_reg = |s - s_gt| (or squared) and L_cls = -log p[type].
CpmLoss cpm_loss(const CpmPrediction& pred, const data::PairLabel& label,
                 RegressionLoss mode = RegressionLoss::Absolute);

struct CpmLossVars {
    nn::Var reg;
    nn::Var cls;
    nn::Var total;
};
CpmLossVars cpm_loss(nn::Graph& g, const CpmNet::Heads& heads, const data::PairLabel& label,
                     RegressionLoss mode = RegressionLoss::Absolute);

// How query (shadow) patches are picked when no mask is available.
//   Lightness: mean patch L below ratio * median of all patch means.
//   AnchorVote: classify each patch against the brightest grid patch and
//   call it shadow when the classifier prefers type +1 over type 0.
enum class QuerySelection { Lightness, AnchorVote };

struct MatchOptions {
    int grid_stride = 16;
    int k_candidates = 8;
    double score_floor = 0.0;
    QuerySelection selection = QuerySelection::Lightness;
    double lightness_ratio = 0.8;
    // Keep only pairs the classifier labels +1 with probability > 0.5.
    bool type_gate = true;
};

struct MatchStats {
    int grid_patches = 0;
    int feature_extractions = 0;
    int pair_evaluations = 0;
    int queries = 0;
};

std::vector<data::PatchRef> grid_patches(int height, int width, int stride);

// Lightness rule: patch mean L below ratio * median of all patch means.
std::vector<bool> lightness_queries(const imaging::ImagePlane& shadow, const std::vector<data::PatchRef>& grid,
                                    double ratio);

// Two phases: features for every grid patch once, then scoring of
// (shadow, non-shadow) candidate pairs from the cached features.
MatchSet match_image(const CpmNet& net, const imaging::ImagePlane& shadow, const imaging::ImagePlane& unaware,
                     const MatchOptions& options = {}, MatchStats* stats = nullptr);
MatchSet match_image(const CpmNet& net, const imaging::ImagePlane& shadow, const MatchOptions& options = {},
                     MatchStats* stats = nullptr);

}  // namespace canet::cpm
