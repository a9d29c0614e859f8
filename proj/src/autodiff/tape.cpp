#include "eddy/tape.hpp"

#include <stdexcept>

namespace eddy {

std::string Shape::str() const {
    return "(" + std::to_string(n) + ", " + std::to_string(c) + ", " + std::to_string(h) + ", " +
           std::to_string(w) + ")";
}

template <typename T>
typename Tape<T>::Id Tape<T>::leaf(Tensor4<T> value, bool requires_grad) {
    if (!value.all_finite()) throw NonFiniteError("leaf tensor holds non-finite values");
    Node node;
    node.op = "leaf";
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    return nodes_.size() - 1;
}

template <typename T>
typename Tape<T>::Id Tape<T>::record(std::string_view op, Tensor4<T> value, std::vector<Id> inputs,
                                     BackwardFn backward) {
    if (consumed_) throw std::logic_error("Tape: cannot record after backward()");
    if (!value.all_finite()) {
        throw NonFiniteError("op '" + std::string(op) + "' produced non-finite output " + value.shape().str());
    }
    bool needs_grad = false;
    for (Id in : inputs) {
        if (in >= nodes_.size()) throw std::out_of_range("Tape: input id refers to a future node");
        needs_grad = needs_grad || nodes_[in].requires_grad;
    }
    Node node;
    node.op = std::string(op);
    node.value = std::move(value);
    node.inputs = std::move(inputs);
    node.requires_grad = needs_grad;
    if (needs_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return nodes_.size() - 1;
}

template <typename T>
const typename Tape<T>::Node& Tape<T>::node(Id id) const {
    if (id >= nodes_.size()) throw std::out_of_range("Tape: unknown node id " + std::to_string(id));
    return nodes_[id];
}

template <typename T>
const Tensor4<T>& Tape<T>::grad(Id id) const {
    const Node& n = node(id);
    if (n.grad.empty()) throw std::logic_error("Tape: node " + std::to_string(id) + " has no gradient");
    return n.grad;
}

template <typename T>
void Tape<T>::backward(Id root) {
    if (consumed_) throw std::logic_error("Tape: backward() already ran on this tape");
    const Node& r = node(root);
    if (r.value.shape() != Shape{1, 1, 1, 1}) {
        throw std::invalid_argument("Tape: backward root must be a scalar, got " + r.value.shape().str());
    }
    consumed_ = true;
    if (!r.requires_grad) return;

    nodes_[root].grad = Tensor4<T>(r.value.shape(), T{1});
    std::vector<Tensor4<T>*> slots;
    for (Id i = root + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.grad.empty() || !n.backward) continue;
        slots.assign(n.inputs.size(), nullptr);
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            Node& in = nodes_[n.inputs[k]];
            if (!in.requires_grad) continue;
            if (in.grad.empty()) in.grad = Tensor4<T>(in.value.shape());
            slots[k] = &in.grad;
        }
        n.backward(*this, n.grad, slots);
    }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace eddy
