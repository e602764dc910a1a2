#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "crft/tensor.hpp"

namespace crft {

/// Handle to a value recorded on a Tape.
struct Var {
    static constexpr std::uint32_t npos = std::numeric_limits<std::uint32_t>::max();
    std::uint32_t id = npos;

    bool valid() const noexcept { return id != npos; }
    friend bool operator==(Var a, Var b) noexcept { return a.id == b.id; }
};

class TapeError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Reverse-mode tape. Operations are appended in execution order, so the
/// recording order is already a topological order of the graph.
///
/// A tape is single-use: build it for one forward pass, call backward once.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, Var self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    /// Non-owning leaf; `value` must outlive the tape.
    Var constant(const Tensor& value);
    /// Non-owning leaf whose gradient is collected when requires_grad is set.
    Var param(const Tensor& value, bool requires_grad);
    /// Owning leaf.
    Var leaf(Tensor value, bool requires_grad = false);

    /// Records an operation result. `backward` is dropped when no parent
    /// requires a gradient.
    Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward);
    Var record(Tensor value, const std::vector<Var>& parents, BackwardFn backward);

    const Tensor& value(Var v) const;
    bool requires_grad(Var v) const;

    /// Turns an already-recorded value into a gradient sink: operations
    /// recorded after this call propagate gradients into it.
    void retain_grad(Var v);

    /// Gradient of the last backward() target with respect to `v`, or
    /// nullptr when `v` is not connected / does not require a gradient.
    const Tensor* grad(Var v) const;

    /// Mutable gradient accumulator for use inside backward functions.
    /// Allocates a zero tensor on first use.
    Tensor& grad_slot(Var v);

    void backward(Var loss);
    bool backward_done() const noexcept { return backward_done_; }

    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        std::optional<Tensor> owned;
        const Tensor* borrowed = nullptr;
        Tensor grad;
        bool has_grad = false;
        bool requires_grad = false;
        BackwardFn backward;

        const Tensor& value() const { return owned ? *owned : *borrowed; }
    };

    Node& node(Var v);
    const Node& node(Var v) const;

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

}  // namespace crft
