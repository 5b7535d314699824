#include "canet/nn/adam.hpp"

#include <cmath>

namespace canet::nn {

void Adam::step(ParamSet& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
    for (auto& p : params.all()) {
        if (p.frozen) continue;
        auto [mit, mnew] = m_.try_emplace(p.name, p.value.shape());
        auto [vit, vnew] = v_.try_emplace(p.name, p.value.shape());
        Tensor& m = mit->second;
        Tensor& v = vit->second;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double grad = p.grad[i] + options_.weight_decay * p.value[i];
            m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * grad;
            v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * grad * grad;
            p.value[i] -= options_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + options_.eps);
        }
    }
}

}  // namespace canet::nn
