#pragma once

#include "canet/nn/graph.hpp"

namespace canet::imaging {

// Differentiable normalized-LAB (L/100, A/128, B/128) -> sRGB on CHW
// tensors. Output is not clamped; out-of-gamut values fall outside [0,1].
nn::Var lab_to_rgb(nn::Graph& g, nn::Var lab_normalized);

}  // namespace canet::imaging
