#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "dpflow/nn/tensor.hpp"

namespace dpflow::nn {

/// A value in the computation graph. Non-leaf nodes keep their parents and a closure that
/// pushes this node's gradient into them.
template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_fn;

    /// Allocates a zero gradient on first use.
    Tensor<T>& ensure_grad() {
        if (grad.numel() != value.numel()) grad = Tensor<T>(value.shape());
        return grad;
    }
    bool has_grad() const { return !grad.empty(); }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

/// Graph recording is on by default; NoGradGuard disables it for the current thread.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <class T>
Var<T> constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return n;
}

template <class T>
Var<T> parameter(Tensor<T> value) {
    auto n = constant(std::move(value));
    n->requires_grad = true;
    return n;
}

template <class T>
Var<T> detach(const Var<T>& v) {
    return constant(v->value);
}

/// Builds a result node. The closure is attached only when recording is enabled and at least
/// one parent needs a gradient.
template <class T, class F>
Var<T> record(Tensor<T> value, std::vector<Var<T>> parents, F&& fn) {
    auto out = std::make_shared<Node<T>>();
    out->value = std::move(value);
    if (!grad_enabled()) return out;
    bool needs = false;
    for (const auto& p : parents) needs = needs || (p && p->requires_grad);
    if (!needs) return out;
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward_fn = std::forward<F>(fn);
    return out;
}

/// Reverse-mode sweep from a scalar root. Leaf gradients accumulate across calls;
/// interior nodes are released afterwards.
template <class T>
void backward(const Var<T>& root);

extern template void backward<float>(const Var<float>&);
extern template void backward<double>(const Var<double>&);

}  // namespace dpflow::nn
