#include "canet/nn/graph.hpp"

#include <cstring>

#include "canet/error.hpp"

namespace canet::nn {

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

void fnv_mix(std::uint64_t& h, const void* bytes, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
}

}  // namespace

Parameter& ParamSet::create(const std::string& name, std::vector<int> shape) {
    if (find(name)) throw ConfigError("duplicate parameter name: " + name);
    Parameter p;
    p.name = name;
    p.value = Tensor(shape);
    p.grad = Tensor(std::move(shape));
    params_.push_back(std::move(p));
    return params_.back();
}

Parameter* ParamSet::find(const std::string& name) {
    for (auto& p : params_) {
        if (p.name == name) return &p;
    }
    return nullptr;
}

const Parameter* ParamSet::find(const std::string& name) const {
    for (const auto& p : params_) {
        if (p.name == name) return &p;
    }
    return nullptr;
}

Parameter& ParamSet::at(const std::string& name) {
    Parameter* p = find(name);
    if (!p) throw ConfigError("unknown parameter: " + name);
    return *p;
}

std::size_t ParamSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

void ParamSet::zero_grad() {
    for (auto& p : params_) p.grad.fill(0.0);
}

void ParamSet::set_frozen(const std::string& prefix, bool frozen) {
    for (auto& p : params_) {
        if (p.name.rfind(prefix, 0) == 0) p.frozen = frozen;
    }
}

std::uint64_t ParamSet::hash() const { return hash(""); }

std::uint64_t ParamSet::hash(const std::string& prefix) const {
    std::uint64_t h = kFnvOffset;
    for (const auto& p : params_) {
        if (p.name.rfind(prefix, 0) != 0) continue;
        fnv_mix(h, p.name.data(), p.name.size());
        for (int d : p.value.shape()) fnv_mix(h, &d, sizeof d);
        fnv_mix(h, p.value.data(), p.value.size() * sizeof(double));
    }
    return h;
}

Var Graph::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, false, {}, nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::variable(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, true, {}, nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::param(Parameter& p) {
    nodes_.push_back(Node{p.value, {}, !p.frozen, {}, &p});
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    for (Var v : inputs) needs = needs || requires_grad(v);
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : Backward{}, nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::record(Tensor value, const std::vector<Var>& inputs, Backward backward) {
    bool needs = false;
    for (Var v : inputs) needs = needs || requires_grad(v);
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : Backward{}, nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Tensor& Graph::grad(Var v) {
    Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
}

void Graph::backward(Var root) {
    if (value(root).size() != 1) {
        throw ShapeError("backward root must be a scalar, got " + shape_string(value(root).shape()));
    }
    if (!requires_grad(root)) return;
    grad(root)[0] = 1.0;
    for (int id = root.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad || n.grad.empty()) continue;
        if (n.backward) {
            n.backward(*this, Var{id});
        } else if (n.param && !n.param->frozen) {
            auto& pg = n.param->grad.storage();
            const auto& g = nodes_[static_cast<std::size_t>(id)].grad.storage();
            for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
        }
    }
}

}  // namespace canet::nn
