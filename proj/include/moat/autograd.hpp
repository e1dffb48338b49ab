#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "moat/tensor.hpp"

namespace moat {

// Dynamically built reverse-mode tape. Each op produces a fresh node holding
// the result value; backward closures pull the node's grad and accumulate
// into the inputs' grads. The graph is acyclic by construction (every op
// output is a brand-new node).
template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated lazily, always value-shaped once present
    std::vector<std::shared_ptr<Node<T>>> inputs;
    std::function<void(Node<T>&)> backward;
    const char* op = "leaf";
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.numel() == 0) grad = Tensor<T>::zeros(value.shape());
    }
};

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
inline std::string& backward_fault_op() {
    static std::string s;
    return s;
}
}  // namespace detail

inline bool grad_mode() { return detail::grad_mode_flag(); }

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Test hook: corrupt the backward of every op with the given tag. The scale
// is confined to the tagged op so a gradient check fails pointing at it.
inline void set_backward_fault(const std::string& op) { detail::backward_fault_op() = op; }
inline void clear_backward_fault() { detail::backward_fault_op().clear(); }

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad && grad_mode();
    }

    bool defined() const { return node_ != nullptr; }
    const Tensor<T>& val() const { return node_->value; }
    Tensor<T>& val() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const Shape& shape() const { return node_->value.shape(); }
    std::shared_ptr<Node<T>> node() const { return node_; }

    void zero_grad() { node_->grad = Tensor<T>::zeros(node_->value.shape()); }

private:
    std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> constant(Tensor<T> v) {
    return Var<T>(std::move(v), false);
}

template <typename T>
Var<T> make_node(const char* op, Tensor<T> value, std::vector<Var<T>> inputs,
                 std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->op = op;
    bool track = grad_mode();
    if (track) {
        bool any = false;
        for (const auto& in : inputs) any = any || in.requires_grad();
        track = any;
    }
    if (track) {
        n->requires_grad = true;
        n->inputs.reserve(inputs.size());
        for (auto& in : inputs) n->inputs.push_back(in.node());
        if (detail::backward_fault_op() == op) {
            auto inner = std::move(backward);
            n->backward = [inner](Node<T>& self) {
                for (int64_t i = 0; i < self.grad.numel(); ++i) self.grad[i] *= T(1.01);
                inner(self);
                for (int64_t i = 0; i < self.grad.numel(); ++i) self.grad[i] /= T(1.01);
            };
        } else {
            n->backward = std::move(backward);
        }
    }
    return Var<T>(std::move(n));
}

// Reverse topological sweep from a scalar loss. Each reachable node is
// visited exactly once; parameter grads accumulate across calls until
// explicitly zeroed.
template <typename T>
void backward(const Var<T>& loss) {
    if (loss.val().numel() != 1)
        throw DimError("backward requires a scalar loss, got shape " + shape_str(loss.val().shape()));
    if (!loss.requires_grad()) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->inputs.size()) {
            Node<T>* child = node->inputs[idx++].get();
            if (child->requires_grad && !seen.count(child)) {
                seen.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    Node<T>* root = loss.node().get();
    root->ensure_grad();
    for (int64_t i = 0; i < root->grad.numel(); ++i) root->grad[i] += T(1);

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward && n->grad.numel() != 0) n->backward(*n);
    }
}

// Named trainable tensor. `decay` marks it for decoupled weight decay
// (conv/dense/attention weights yes; norm gains, biases, bias tables no).
template <typename T>
struct Param {
    std::string name;
    Var<T> var;
    bool trainable = true;
    bool decay = true;

    Tensor<T>& value() { return var.val(); }
    const Tensor<T>& value() const { return var.val(); }
    const Tensor<T>& grad() const { return var.grad(); }
};

template <typename T>
class ParamStore {
public:
    Param<T>& add(const std::string& name, Tensor<T> init, bool trainable = true, bool decay = true) {
        if (index_.count(name))
            throw std::runtime_error("duplicate parameter name: " + name);
        auto p = std::make_shared<Param<T>>();
        p->name = name;
        p->var = Var<T>(std::move(init), trainable);
        p->trainable = trainable;
        p->decay = decay;
        index_[name] = params_.size();
        params_.push_back(std::move(p));
        return *params_.back();
    }

    Param<T>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : params_[it->second].get();
    }

    const Param<T>* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : params_[it->second].get();
    }

    const std::vector<std::shared_ptr<Param<T>>>& all() const { return params_; }

    int64_t total_size() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p->value().numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p->var.zero_grad();
    }

private:
    std::vector<std::shared_ptr<Param<T>>> params_;
    std::unordered_map<std::string, size_t> index_;
};

}  // namespace moat
