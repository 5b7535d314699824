#include "canet/nn/layers.hpp"

#include <cmath>

#include "canet/nn/ops.hpp"

namespace canet::nn {

namespace {

void he_init(Parameter& p, int fan_in, Rng& rng) {
    const double stddev = std::sqrt(2.0 / fan_in);
    for (auto& v : p.value.storage()) v = rng.normal(0.0, stddev);
}

}  // namespace

Conv2d::Conv2d(ParamSet& params, const std::string& name, int in_channels, int out_channels, int kernel, int stride,
               Rng& rng)
    : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride) {
    weight_ = &params.create(name + ".w", {out_channels, in_channels, kernel, kernel});
    bias_ = &params.create(name + ".b", {out_channels});
    he_init(*weight_, in_channels * kernel * kernel, rng);
}

Var Conv2d::operator()(Graph& g, Var x) const {
    return conv2d(g, x, g.param(*weight_), g.param(*bias_), stride_, kernel_ / 2);
}

Linear::Linear(ParamSet& params, const std::string& name, int in_features, int out_features, Rng& rng)
    : in_(in_features), out_(out_features) {
    weight_ = &params.create(name + ".w", {out_features, in_features});
    bias_ = &params.create(name + ".b", {out_features});
    he_init(*weight_, in_features, rng);
}

Var Linear::operator()(Graph& g, Var x) const { return linear(g, x, g.param(*weight_), g.param(*bias_)); }

ResidualBlock::ResidualBlock(ParamSet& params, const std::string& name, int channels, Rng& rng)
    : first_(params, name + ".conv1", channels, channels, 3, 1, rng),
      second_(params, name + ".conv2", channels, channels, 3, 1, rng) {}

Var ResidualBlock::operator()(Graph& g, Var x) const {
    Var h = relu(g, first_(g, x));
    return relu(g, add(g, x, second_(g, h)));
}

DenseBlock::DenseBlock(ParamSet& params, const std::string& name, int in_channels, int layers, int growth, Rng& rng)
    : out_(in_channels) {
    for (int i = 0; i < layers; ++i) {
        layers_.emplace_back(params, name + ".layer" + std::to_string(i), out_, growth, 3, 1, rng);
        out_ += growth;
    }
}

Var DenseBlock::operator()(Graph& g, Var x) const {
    Var features = x;
    for (const auto& layer : layers_) {
        Var h = relu(g, layer(g, features));
        features = concat(g, {features, h});
    }
    return features;
}

}  // namespace canet::nn
