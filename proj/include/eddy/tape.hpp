#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "eddy/tensor.hpp"

namespace eddy {

/// Reverse-mode differentiation tape.
///
/// Every value produced during a forward pass is appended as a node; nodes only
/// reference earlier nodes, so the record order is already topological. A tape
/// supports exactly one backward pass. Build a fresh tape per step.
template <typename T>
class Tape {
public:
    using Id = std::size_t;

    /// Accumulates (+=) the contribution of `grad_out` into each non-null entry of
    /// `input_grads` (one slot per recorded input, null when that input needs no grad).
    using BackwardFn =
        std::function<void(const Tape& tape, const Tensor4<T>& grad_out, std::span<Tensor4<T>* const> input_grads)>;

    Id leaf(Tensor4<T> value, bool requires_grad = false);

    /// Appends an op output. Throws NonFiniteError if `value` holds NaN/Inf.
    Id record(std::string_view op, Tensor4<T> value, std::vector<Id> inputs, BackwardFn backward);

    const Tensor4<T>& value(Id id) const { return node(id).value; }
    bool requires_grad(Id id) const { return node(id).requires_grad; }
    bool has_grad(Id id) const { return !node(id).grad.empty(); }
    const Tensor4<T>& grad(Id id) const;
    const std::string& op(Id id) const { return node(id).op; }

    /// Seeds d(root)/d(root) = 1 and propagates in reverse record order.
    /// Root must be a (1,1,1,1) scalar; a second call throws.
    void backward(Id root);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        std::string op;
        Tensor4<T> value;
        std::vector<Id> inputs;
        BackwardFn backward;
        bool requires_grad = false;
        Tensor4<T> grad;
    };

    const Node& node(Id id) const;

    std::vector<Node> nodes_;
    bool consumed_ = false;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace eddy
