#pragma once

// Dense row-major tensors that record a reverse-mode gradient graph.
//
// A Tensor is a cheap handle to an immutable node. Operations in ops.hpp
// build new nodes; when any operand requires a gradient the new node keeps
// references to its parents plus a closure that pushes the node's gradient
// back into them. backward() walks that graph once in reverse topological
// order.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <vector>

namespace pseg {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

class GraphError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

enum class Precision : std::uint8_t { f32, f64 };

template <class T>
constexpr Precision precision_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                  "tensors hold float or double");
    return std::is_same_v<T, float> ? Precision::f32 : Precision::f64;
}

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {
inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}
}  // namespace detail

template <class T>
struct Node {
    std::uint64_t id = detail::next_node_id();
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::string op = "leaf";
    std::string name;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    // Zero-initialised on first touch.
    std::vector<T>& grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad;
    }
};

template <class T>
class Tensor {
public:
    using value_type = T;
    using node_type = Node<T>;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<node_type> node) : node_(std::move(node)) {}

    static Tensor constant(Shape shape, std::vector<T> values) {
        return leaf(std::move(shape), std::move(values), false, {});
    }

    static Tensor parameter(std::string name, Shape shape, std::vector<T> values) {
        return leaf(std::move(shape), std::move(values), true, std::move(name));
    }

    // Named leaf without a gradient, e.g. a frozen parameter.
    static Tensor named_constant(std::string name, Shape shape, std::vector<T> values) {
        return leaf(std::move(shape), std::move(values), false, std::move(name));
    }

    static Tensor full(Shape shape, T v) {
        const std::size_t n = pseg::numel(shape);
        return constant(std::move(shape), std::vector<T>(n, v));
    }

    static Tensor scalar(T v) { return constant(Shape{}, std::vector<T>{v}); }

    // Leaf that requires a gradient but is not a named parameter.
    static Tensor variable(Shape shape, std::vector<T> values) {
        return leaf(std::move(shape), std::move(values), true, {});
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->value.size(); }
    std::span<const T> data() const { return node_->value; }
    T operator[](std::size_t i) const { return node_->value[i]; }

    T item() const {
        if (node_->value.size() != 1) {
            throw ShapeError("item() on tensor of shape " + shape_str(node_->shape));
        }
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    const std::string& name() const { return node_->name; }
    const std::string& op() const { return node_->op; }
    std::uint64_t id() const { return node_->id; }

    // Copy of the values with no graph history.
    Tensor detach() const { return constant(node_->shape, node_->value); }

    const std::shared_ptr<node_type>& node() const { return node_; }

private:
    static Tensor leaf(Shape shape, std::vector<T> values, bool grad, std::string name) {
        if (pseg::numel(shape) != values.size()) {
            throw ShapeError("tensor shape " + shape_str(shape) + " holds " +
                             std::to_string(pseg::numel(shape)) + " values, got " +
                             std::to_string(values.size()));
        }
        if (values.empty()) throw ShapeError("zero-extent tensor " + shape_str(shape));
        auto n = std::make_shared<node_type>();
        n->shape = std::move(shape);
        n->value = std::move(values);
        n->requires_grad = grad;
        n->name = std::move(name);
        return Tensor(std::move(n));
    }

    std::shared_ptr<node_type> node_;
};

// Builds an op result. The graph edge and backward closure are kept only when
// some operand requires a gradient.
template <class T>
Tensor<T> make_result(std::string op, Shape shape, std::vector<T> value,
                      const std::vector<Tensor<T>>& parents,
                      std::function<void(Node<T>&)> backward_fn) {
    if (numel(shape) != value.size()) {
        throw ShapeError(op + ": result shape " + shape_str(shape) + " does not match " +
                         std::to_string(value.size()) + " values");
    }
    if (value.empty()) throw ShapeError(op + ": zero-extent result");
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = std::move(op);
    for (const auto& p : parents) n->requires_grad = n->requires_grad || p.requires_grad();
    if (n->requires_grad) {
        n->parents.reserve(parents.size());
        for (const auto& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor<T>(std::move(n));
}

template <class T>
Tensor<T> make_result(std::string op, Shape shape, std::vector<T> value,
                      std::initializer_list<Tensor<T>> parents,
                      std::function<void(Node<T>&)> backward_fn) {
    std::vector<Tensor<T>> ps(parents);
    return make_result(std::move(op), std::move(shape), std::move(value), ps,
                       std::move(backward_fn));
}

// parameter id -> gradient values
template <class T>
using GradientMap = std::map<std::string, std::vector<T>>;

namespace detail {

// Reverse topological order of the requires-grad subgraph under root.
// Throws GraphError if a cycle is found.
template <class T>
std::vector<Node<T>*> reverse_topological(Node<T>* root) {
    enum : std::uint8_t { kNew = 0, kActive = 1, kDone = 2 };
    std::unordered_map<Node<T>*, std::uint8_t> state;
    std::vector<Node<T>*> post;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    state[root] = kActive;
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (!p->requires_grad) continue;
            auto& s = state[p];
            if (s == kActive) throw GraphError("cycle detected at node '" + p->op + "'");
            if (s == kNew) {
                s = kActive;
                stack.emplace_back(p, 0);
            }
        } else {
            state[node] = kDone;
            post.push_back(node);
            stack.pop_back();
        }
    }
    return {post.rbegin(), post.rend()};
}

}  // namespace detail

// Fills grad on every requires-grad tensor reachable from `loss` with
// d(loss)/d(tensor) and returns the gradients of all leaves keyed by name
// (unnamed leaves get "#<node id>"). Gradients from repeated uses add up.
// Previous gradients on the visited nodes are discarded first.
template <class T>
GradientMap<T> backward(const Tensor<T>& loss) {
    if (!loss.defined()) throw GraphError("backward on undefined tensor");
    if (loss.numel() != 1) {
        throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    GradientMap<T> out;
    if (!loss.requires_grad()) return out;

    const auto order = detail::reverse_topological(loss.node().get());
    for (Node<T>* n : order) n->grad.clear();
    loss.node()->grad.assign(1, T(1));
    for (Node<T>* n : order) {
        if (n->grad.empty()) continue;
        if (n->backward_fn) n->backward_fn(*n);
    }
    for (Node<T>* n : order) {
        if (!n->parents.empty() || n->grad.empty()) continue;
        out.emplace(n->name.empty() ? "#" + std::to_string(n->id) : n->name, n->grad);
    }
    return out;
}

}  // namespace pseg
