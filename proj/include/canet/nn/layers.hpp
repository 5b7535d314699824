#pragma once

#include <string>
#include <vector>

#include "canet/nn/graph.hpp"
#include "canet/rng.hpp"

namespace canet::nn {

// He-normal weights, zero bias.
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(ParamSet& params, const std::string& name, int in_channels, int out_channels, int kernel, int stride,
           Rng& rng);

    Var operator()(Graph& g, Var x) const;

    int in_channels() const { return in_; }
    int out_channels() const { return out_; }
    int stride() const { return stride_; }

private:
    Parameter* weight_ = nullptr;
    Parameter* bias_ = nullptr;
    int in_ = 0, out_ = 0, kernel_ = 1, stride_ = 1;
};

class Linear {
public:
    Linear() = default;
    Linear(ParamSet& params, const std::string& name, int in_features, int out_features, Rng& rng);

    Var operator()(Graph& g, Var x) const;

    int out_features() const { return out_; }

private:
    Parameter* weight_ = nullptr;
    Parameter* bias_ = nullptr;
    int in_ = 0, out_ = 0;
};

// relu(x + conv(relu(conv(x)))) with 3x3 convolutions at constant width.
class ResidualBlock {
public:
    ResidualBlock() = default;
    ResidualBlock(ParamSet& params, const std::string& name, int channels, Rng& rng);

    Var operator()(Graph& g, Var x) const;

private:
    Conv2d first_, second_;
};

// DenseNet-style block: every layer sees the concatenation of the block
// input and all previous layer outputs; output width is in + layers*growth.
class DenseBlock {
public:
    DenseBlock() = default;
    DenseBlock(ParamSet& params, const std::string& name, int in_channels, int layers, int growth, Rng& rng);

    Var operator()(Graph& g, Var x) const;
    int out_channels() const { return out_; }

private:
    std::vector<Conv2d> layers_;
    int out_ = 0;
};

}  // namespace canet::nn
