#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "asdm/tensor.hpp"

namespace asdm {

// One node of the computation graph. Leaves hold parameters/inputs; interior
// nodes record the operator that produced them plus a closure that pushes the
// output adjoint back to the inputs.
struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily, same shape as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;  // reads this->grad, accumulates into inputs
    const char* op = "leaf";

    bool has_grad = false;

    Tensor& ensure_grad() {
        if (!has_grad) {
            grad = Tensor::zeros(value.shape);
            has_grad = true;
        }
        return grad;
    }
};

using Var = std::shared_ptr<Node>;

inline Var make_var(Tensor t, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = requires_grad;
    return n;
}

inline Var make_op(Tensor value, const char* op, std::vector<Var> inputs, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = op;
    bool need = false;
    for (auto& in : inputs) need = need || in->requires_grad;
    n->requires_grad = need;
    if (need) {
        n->inputs = std::move(inputs);
        n->backward_fn = std::move(bw);
    }
    return n;
}

inline Tensor grad_or_zero(const Var& v) {
    if (v->has_grad) return v->grad;
    return Tensor::zeros(v->value.shape);
}

// Reverse-mode sweep from a scalar root. Gradients accumulate into each
// reachable node's grad; leaves not connected to the root keep zero gradient.
inline void backward(const Var& root) {
    if (root->value.numel() != 1)
        throw ContractError(msg("backward root must be scalar, got shape ", shape_str(root->value.shape)));

    // iterative post-order topological sort
    std::vector<Node*> topo;
    std::unordered_set<Node*> visited;
    struct Frame {
        Node* node;
        std::size_t next_child;
    };
    std::vector<Frame> stack;
    if (root->requires_grad) stack.push_back({root.get(), 0});
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_child == 0) {
            if (visited.count(f.node)) {
                stack.pop_back();
                continue;
            }
            visited.insert(f.node);
        }
        if (f.next_child < f.node->inputs.size()) {
            Node* child = f.node->inputs[f.next_child++].get();
            if (!visited.count(child) && child->requires_grad) stack.push_back({child, 0});
        } else {
            topo.push_back(f.node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad.data[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->has_grad) n->backward_fn(*n);
    }
}

}  // namespace asdm
