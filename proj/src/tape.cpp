#include "crft/tape.hpp"

#include <string>

namespace crft {

Tape::Node& Tape::node(Var v) {
    if (v.id >= nodes_.size()) throw TapeError("variable does not belong to this tape");
    return nodes_[v.id];
}

const Tape::Node& Tape::node(Var v) const {
    if (v.id >= nodes_.size()) throw TapeError("variable does not belong to this tape");
    return nodes_[v.id];
}

Var Tape::constant(const Tensor& value) { return param(value, false); }

Var Tape::param(const Tensor& value, bool requires_grad) {
    Node n;
    n.borrowed = &value;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward) {
    bool needs = false;
    for (Var p : parents) needs = needs || node(p).requires_grad;
    Node n;
    n.owned = std::move(value);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, const std::vector<Var>& parents, BackwardFn backward) {
    bool needs = false;
    for (Var p : parents) needs = needs || node(p).requires_grad;
    Node n;
    n.owned = std::move(value);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Tape::value(Var v) const { return node(v).value(); }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

void Tape::retain_grad(Var v) { node(v).requires_grad = true; }

const Tensor* Tape::grad(Var v) const {
    const Node& n = node(v);
    if (!backward_done_ || !n.requires_grad) return nullptr;
    return n.has_grad ? &n.grad : nullptr;
}

Tensor& Tape::grad_slot(Var v) {
    Node& n = node(v);
    if (!n.has_grad) {
        n.grad = Tensor(n.value().shape(), 0.0);
        n.has_grad = true;
    }
    return n.grad;
}

void Tape::backward(Var loss) {
    if (backward_done_) throw TapeError("backward called twice on one tape");
    const Node& target = node(loss);
    if (target.value().size() != 1) {
        throw TapeError("backward target must be a scalar, got shape " +
                        shape_string(target.value().shape()));
    }
    backward_done_ = true;
    if (!target.requires_grad) return;
    grad_slot(loss).fill(1.0);
    for (std::int64_t i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.has_grad || !n.backward) continue;
        n.backward(*this, Var{static_cast<std::uint32_t>(i)});
    }
}

}  // namespace crft
