#include "dpflow/nn/autograd.hpp"

#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace dpflow::nn {

namespace {
thread_local bool t_grad_enabled = true;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

template <class T>
void backward(const Var<T>& root) {
    if (!root) throw std::invalid_argument("backward on a null node");
    if (root->value.numel() != 1) throw std::invalid_argument("backward root must be a scalar");
    if (!root->requires_grad) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p && p->requires_grad && !p->parents.empty() && seen.insert(p).second) stack.emplace_back(p, 0);
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }

    root->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backward_fn && node->has_grad()) node->backward_fn(*node);
    }
    for (Node<T>* node : order) {
        if (!node->backward_fn) continue;
        node->backward_fn = nullptr;
        node->parents.clear();
        node->grad = Tensor<T>();
    }
}

template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);

}  // namespace dpflow::nn
