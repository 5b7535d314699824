#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "canet/tensor.hpp"

namespace canet::nn {

// A trainable tensor with its accumulated gradient.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool frozen = false;
};

// Ordered registry of parameters with stable addresses. Iteration order is
// creation order, which is also the on-disk order of a checkpoint.
class ParamSet {
public:
    Parameter& create(const std::string& name, std::vector<int> shape);
    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;
    Parameter& at(const std::string& name);

    std::deque<Parameter>& all() { return params_; }
    const std::deque<Parameter>& all() const { return params_; }
    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const;

    void zero_grad();
    void set_frozen(const std::string& prefix, bool frozen);

    // FNV-1a over names, shapes and raw parameter bytes.
    std::uint64_t hash() const;
    std::uint64_t hash(const std::string& prefix) const;

private:
    std::deque<Parameter> params_;
};

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so replaying
// them backwards visits every node after all of its consumers.
class Graph {
public:
    // Receives the graph and the id of the node being differentiated.
    using Backward = std::function<void(Graph&, Var self)>;

    Var constant(Tensor value);
    Var variable(Tensor value);
    Var param(Parameter& p);

    // Appends an op result. `backward` is dropped when no input needs a
    // gradient, so inference graphs keep no closures.
    Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward);
    Var record(Tensor value, const std::vector<Var>& inputs, Backward backward);

    const Tensor& value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }
    bool requires_grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).requires_grad; }
    // Zero-initialized on first access.
    Tensor& grad(Var v);
    bool has_grad(Var v) const { return !nodes_.at(static_cast<std::size_t>(v.id)).grad.empty(); }

    // Seeds d(root)/d(root) = 1 for a single-element root and propagates.
    // Parameter gradients are added into Parameter::grad unless frozen.
    void backward(Var root);

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        Backward backward;
        Parameter* param = nullptr;
    };
    std::vector<Node> nodes_;
};

}  // namespace canet::nn
