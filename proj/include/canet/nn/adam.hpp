#pragma once

#include <map>
#include <string>

#include "canet/nn/graph.hpp"

namespace canet::nn {

struct AdamOptions {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    // Coupled L2 penalty added to the gradient before the moment updates.
    double weight_decay = 5e-4;
};

// Adam with per-parameter first/second moments keyed by parameter name.
class Adam {
public:
    explicit Adam(AdamOptions options = {}) : options_(options) {}

    // Applies one update to every non-frozen parameter from its .grad.
    void step(ParamSet& params);

    const AdamOptions& options() const { return options_; }
    long long steps() const { return t_; }

    // Moment buffers, exposed for checkpointing.
    std::map<std::string, Tensor>& first_moments() { return m_; }
    std::map<std::string, Tensor>& second_moments() { return v_; }
    const std::map<std::string, Tensor>& first_moments() const { return m_; }
    const std::map<std::string, Tensor>& second_moments() const { return v_; }
    void set_steps(long long t) { t_ = t; }

private:
    AdamOptions options_;
    long long t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

}  // namespace canet::nn
