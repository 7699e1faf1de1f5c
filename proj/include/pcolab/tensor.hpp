// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pcolab/error.hpp"

namespace pcolab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        os << (i ? "x" : "") << s[i];
    }
    os << ']';
    return os.str();
}

// Gradient recording is a per-thread switch: independent graphs may be built on
// separate threads, but one graph never crosses threads.
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

class NoGradGuard {
public:
    NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into parents' grads.
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }

    std::vector<T>& ensure_grad() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), T{0});
        }
        return grad;
    }
};

/// Dense row-major tensor handle. Copies share the underlying node; use
/// clone() for a deep copy.
template <typename T>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<Node<T>>;

    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size()) {
            throw Error(ErrorKind::shape, "Tensor::from_data: shape " + shape_str(shape) + " needs " +
                                              std::to_string(shape_numel(shape)) + " values, got " +
                                              std::to_string(data.size()));
        }
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        std::vector<T> d(shape_numel(shape), value);
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), T{0}, requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from_data({}, {value}, requires_grad);
    }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->data.size(); }
    const char* op() const { return node_->op; }

    std::span<const T> data() const { return node_->data; }
    std::span<T> mutable_data() { return node_->data; }
    std::vector<T> to_vector() const { return node_->data; }

    T item() const {
        if (numel() != 1) {
            throw Error(ErrorKind::shape, "Tensor::item on tensor of shape " + shape_str(shape()));
        }
        return node_->data[0];
    }

    T operator[](std::size_t i) const { return node_->data.at(i); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->ensure_grad(); }

    void zero_grad() {
        if (!node_->grad.empty()) {
            std::fill(node_->grad.begin(), node_->grad.end(), T{0});
        }
    }

    /// Leaf deep copy that does not participate in this tensor's graph.
    Tensor clone(bool requires_grad) const { return from_data(shape(), node_->data, requires_grad); }

    Node<T>& node() const { return *node_; }
    const NodePtr& node_ptr() const { return node_; }

    /// Reverse pass from a scalar. Intermediate gradients are reset on every
    /// call, leaf gradients accumulate.
    void backward() const;

private:
    NodePtr node_;
};

namespace detail {

template <typename T>
std::vector<Node<T>*> topo_order(Node<T>* root) {
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;  // parents before children
}

}  // namespace detail

template <typename T>
void Tensor<T>::backward() const {
    if (numel() != 1) {
        throw Error(ErrorKind::shape, "backward: output must be scalar, got shape " + shape_str(shape()));
    }
    if (!node_->requires_grad) {
        return;
    }
    auto order = detail::topo_order(node_.get());
    for (Node<T>* n : order) {
        if (!n->is_leaf()) {
            n->grad.assign(n->data.size(), T{0});
        }
    }
    node_->ensure_grad()[0] += T{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if (!(*it)->is_leaf()) {
            (*it)->backward_fn(**it);
        }
    }
}

/// Builds an op result, checking finiteness and wiring the tape when any
/// parent records gradients.
template <typename T>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> parents,
                  std::function<void(Node<T>&)> backward_fn) {
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (!std::isfinite(data[i])) {
            throw Error(ErrorKind::numeric, std::string("op '") + op + "' produced a non-finite value at flat index " +
                                                std::to_string(i) + " of output " + shape_str(shape));
        }
    }
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = op;
    bool any = false;
    if (grad_enabled()) {
        for (const auto& p : parents) {
            any = any || p.requires_grad();
        }
    }
    if (any) {
        n->requires_grad = true;
        for (const auto& p : parents) {
            n->parents.push_back(p.node_ptr());
        }
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor<T>(std::move(n));
}

}  // namespace pcolab
