#pragma once

// Tape-based reverse-mode differentiation. Nodes are appended in evaluation order, so the node
// vector is always a valid topological order and backward() simply walks it in reverse.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "petsynth/ndtensor/tensor.hpp"

namespace petsynth::nd {

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
};

// Owns named parameters with stable addresses, in insertion order.
class ParameterStore {
public:
    Parameter &add(const std::string &name, Tensor init);
    Parameter &at(const std::string &name);
    const Parameter &at(const std::string &name) const;
    bool contains(const std::string &name) const;

    void zero_grad();
    std::vector<Parameter *> all();
    std::vector<const Parameter *> all() const;
    size_t size() const { return params_.size(); }

    // Order-sensitive FNV-1a digest over names and value bits.
    std::uint64_t checksum() const;

private:
    std::vector<std::unique_ptr<Parameter>> params_;
};

struct Var {
    std::int32_t id = -1;
    bool valid() const { return id >= 0; }
};

class Graph {
public:
    // Receives the graph and the node's own id; accumulates into parent gradients.
    using BackwardFn = std::function<void(Graph &, std::int32_t)>;

    Var constant(Tensor value, std::string name = "input");
    Var parameter(Parameter &p);
    Var record(std::string op, Tensor value, std::vector<Var> parents, BackwardFn backward);

    const Tensor &value(Var v) const;
    const Tensor &grad(Var v) const;
    const std::string &op_name(Var v) const;
    bool requires_grad(Var v) const;

    // Gradient buffer of a parent, allocated on first use; null when the node needs no gradient.
    float *grad_ptr(Var v);
    Var parent(std::int32_t node, size_t i) const;

    // Seeds d(loss)/d(loss) = 1 and propagates to every contributing node exactly once.
    // Parameter gradients are accumulated into Parameter::grad.
    void backward(Var loss);

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        std::string op;
        Tensor value;
        Tensor grad;
        std::vector<std::int32_t> parents;
        BackwardFn backward;
        bool requires_grad = false;
        Parameter *param = nullptr;
    };

    Node &node(Var v);
    const Node &node(Var v) const;

    std::vector<Node> nodes_;
};

} // namespace petsynth::nd
