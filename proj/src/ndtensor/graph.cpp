#include "petsynth/ndtensor/graph.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

#include "petsynth/common/error.hpp"

namespace petsynth::nd {

Parameter &ParameterStore::add(const std::string &name, Tensor init) {
    if (contains(name)) throw DomainError("duplicate parameter name '" + name + "'");
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->grad = Tensor(init.shape(), 0.0f);
    p->value = std::move(init);
    params_.push_back(std::move(p));
    return *params_.back();
}

Parameter &ParameterStore::at(const std::string &name) {
    for (auto &p : params_)
        if (p->name == name) return *p;
    throw DomainError("unknown parameter '" + name + "'");
}

const Parameter &ParameterStore::at(const std::string &name) const {
    for (const auto &p : params_)
        if (p->name == name) return *p;
    throw DomainError("unknown parameter '" + name + "'");
}

bool ParameterStore::contains(const std::string &name) const {
    return std::any_of(params_.begin(), params_.end(), [&](const auto &p) { return p->name == name; });
}

void ParameterStore::zero_grad() {
    for (auto &p : params_) p->grad.fill(0.0f);
}

std::vector<Parameter *> ParameterStore::all() {
    std::vector<Parameter *> out;
    for (auto &p : params_) out.push_back(p.get());
    return out;
}

std::vector<const Parameter *> ParameterStore::all() const {
    std::vector<const Parameter *> out;
    for (const auto &p : params_) out.push_back(p.get());
    return out;
}

std::uint64_t ParameterStore::checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](const void *data, size_t n) {
        const auto *b = static_cast<const unsigned char *>(data);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto &p : params_) {
        mix(p->name.data(), p->name.size());
        mix(p->value.data(), static_cast<size_t>(p->value.numel()) * sizeof(float));
    }
    return h;
}

Graph::Node &Graph::node(Var v) {
    if (v.id < 0 || static_cast<size_t>(v.id) >= nodes_.size()) throw DomainError("invalid graph variable");
    return nodes_[static_cast<size_t>(v.id)];
}

const Graph::Node &Graph::node(Var v) const {
    if (v.id < 0 || static_cast<size_t>(v.id) >= nodes_.size()) throw DomainError("invalid graph variable");
    return nodes_[static_cast<size_t>(v.id)];
}

Var Graph::constant(Tensor value, std::string name) {
    Node n;
    n.op = std::move(name);
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Graph::parameter(Parameter &p) {
    Node n;
    n.op = "param:" + p.name;
    n.value = p.value;
    n.requires_grad = true;
    n.param = &p;
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Graph::record(std::string op, Tensor value, std::vector<Var> parents, BackwardFn backward) {
    Node n;
    n.op = std::move(op);
    n.value = std::move(value);
    n.backward = std::move(backward);
    for (auto p : parents) {
        n.parents.push_back(p.id);
        n.requires_grad = n.requires_grad || node(p).requires_grad;
    }
    if (!n.requires_grad) n.backward = nullptr;
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

const Tensor &Graph::value(Var v) const { return node(v).value; }

const Tensor &Graph::grad(Var v) const { return node(v).grad; }

const std::string &Graph::op_name(Var v) const { return node(v).op; }

bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }

float *Graph::grad_ptr(Var v) {
    auto &n = node(v);
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0f);
    return n.grad.data();
}

Var Graph::parent(std::int32_t id, size_t i) const {
    return Var{nodes_.at(static_cast<size_t>(id)).parents.at(i)};
}

void Graph::backward(Var loss) {
    auto &l = node(loss);
    if (l.value.numel() != 1) {
        throw DomainError("backward requires a scalar loss, node '" + l.op + "' has shape " + shape_str(l.value.shape()));
    }
    if (!l.requires_grad) return;
    for (auto &n : nodes_) n.grad = Tensor();
    l.grad = Tensor(l.value.shape(), 1.0f);

    std::vector<char> live(nodes_.size(), 0);
    live[static_cast<size_t>(loss.id)] = 1;
    for (std::int32_t i = loss.id; i >= 0; --i) {
        auto &n = nodes_[static_cast<size_t>(i)];
        if (!live[static_cast<size_t>(i)] || !n.requires_grad || n.grad.empty()) continue;
        if (n.param) {
            auto dst = n.param->grad.values();
            auto src = n.grad.values();
            for (size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
            continue;
        }
        for (auto p : n.parents) live[static_cast<size_t>(p)] = 1;
        if (n.backward) n.backward(*this, i);
    }
}

} // namespace petsynth::nd
