#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "canet/nn/graph.hpp"
#include "canet/rng.hpp"

namespace canet::oracle {

// Builds a scalar loss from leaf variables holding `inputs`.
using LossFn = std::function<nn::Var(nn::Graph&, const std::vector<nn::Var>&)>;

inline double eval_loss(const LossFn& fn, const std::vector<Tensor>& inputs) {
    nn::Graph g;
    std::vector<nn::Var> leaves;
    for (const auto& t : inputs) leaves.push_back(g.constant(t));
    return g.value(fn(g, leaves))[0];
}

// Largest relative error between the analytic gradient and central
// differences over `points` randomly chosen input coordinates.
inline double max_relative_error(const LossFn& fn, std::vector<Tensor> inputs, int points, std::uint64_t seed,
                                 double h = 1e-6) {
    nn::Graph g;
    std::vector<nn::Var> leaves;
    for (const auto& t : inputs) leaves.push_back(g.variable(t));
    g.backward(fn(g, leaves));
    std::vector<Tensor> grads;
    for (auto v : leaves) grads.push_back(g.grad(v));

    Rng rng(seed);
    double worst = 0.0;
    for (int p = 0; p < points; ++p) {
        const std::size_t which = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(inputs.size()) - 1));
        const std::size_t idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(inputs[which].size()) - 1));
        const double saved = inputs[which][idx];
        inputs[which][idx] = saved + h;
        const double up = eval_loss(fn, inputs);
        inputs[which][idx] = saved - h;
        const double down = eval_loss(fn, inputs);
        inputs[which][idx] = saved;
        const double numeric = (up - down) / (2 * h);
        const double analytic = grads[which][idx];
        const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
        worst = std::max(worst, std::abs(numeric - analytic) / denom);
    }
    return worst;
}

}  // namespace canet::oracle
