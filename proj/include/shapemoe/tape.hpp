// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "shapemoe/tensor.hpp"

namespace shapemoe {

template <typename S>
class TapeT;

// Handle to a tape node. Ops pass these by value; the tape owns all storage.
template <typename S>
struct VarT {
    TapeT<S>* tape = nullptr;
    size_t id = 0;

    const TensorT<S>& value() const;
    const TensorT<S>& grad() const;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so walking the
// node list backwards is a valid topological order for the backward pass.
// Backward closures capture node ids, never references into the node vector,
// because the vector reallocates as the graph grows.
template <typename S>
class TapeT {
public:
    struct Node {
        TensorT<S> value;
        TensorT<S> grad;
        std::function<void()> backward;
    };

    // record=false skips gradient buffers and backward closures entirely,
    // turning the tape into a plain forward evaluator for inference.
    explicit TapeT(bool record = true) : record_(record) {}

    VarT<S> alloc(TensorT<S> value) {
        Node n;
        if (record_) n.grad = TensorT<S>(value.shape);
        n.value = std::move(value);
        nodes_.push_back(std::move(n));
        return VarT<S>{this, nodes_.size() - 1};
    }

    bool recording() const { return record_; }

    const TensorT<S>& value(size_t id) const { return nodes_[id].value; }
    TensorT<S>& value_mut(size_t id) { return nodes_[id].value; }
    const TensorT<S>& grad(size_t id) const { return nodes_[id].grad; }
    TensorT<S>& grad_mut(size_t id) { return nodes_[id].grad; }

    void set_backward(size_t id, std::function<void()> fn) {
        if (record_) nodes_[id].backward = std::move(fn);
    }

    // Accumulates into the node's gradient buffer.
    void add_grad(size_t id, const TensorT<S>& g) {
        TensorT<S>& dst = nodes_[id].grad;
        if (!dst.same_shape(g))
            throw DimensionError("gradient shape mismatch at node " + std::to_string(id));
        for (size_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
    }

    // Seeds the root with ones and propagates to all ancestors.
    void backward(VarT<S> root) {
        for (S& v : nodes_[root.id].grad.data) v = S(1);
        run_backward();
    }

    // Seeds several outputs with explicit cotangents before propagating. Used
    // when a scalar objective is differentiated outside the tape and its
    // per-output gradients are injected back in.
    void backward_seeded(const std::vector<std::pair<VarT<S>, TensorT<S>>>& seeds) {
        for (const auto& [var, seed] : seeds) add_grad(var.id, seed);
        run_backward();
    }

    size_t size() const { return nodes_.size(); }

    // Drops all nodes but keeps the vector's capacity for the next sample.
    void reset() { nodes_.clear(); }

private:
    void run_backward() {
        for (size_t i = nodes_.size(); i-- > 0;) {
            if (nodes_[i].backward) nodes_[i].backward();
        }
    }

    bool record_ = true;
    std::vector<Node> nodes_;
};

template <typename S>
const TensorT<S>& VarT<S>::value() const {
    return tape->value(id);
}

template <typename S>
const TensorT<S>& VarT<S>::grad() const {
    return tape->grad(id);
}

using Tape = TapeT<float>;
using Var = VarT<float>;

}  // namespace shapemoe
