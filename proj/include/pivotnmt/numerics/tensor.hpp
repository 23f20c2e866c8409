#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "pivotnmt/errors.hpp"

namespace pivotnmt::nn {

using Shape = std::vector<std::size_t>;

// Tensor storage starts on a 64-byte boundary. Eigen's vectorized reductions
// peel up to the first aligned element, so with malloc's 16-byte guarantee the
// summation grouping (and the rounding) would depend on heap placement.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};
    AlignedAllocator() noexcept = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }
    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

// Activation buffers of a few MB are allocated and freed for every op. Under
// glibc's default they are served by fresh mmap calls, so each one is
// page-faulted and zeroed by the kernel; keeping them on the heap avoids that.
// Call once at program start.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
}

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

// One vertex of the dynamic tape. Node ids grow monotonically, so creation
// order is a valid topological order of any graph built on one thread.
struct Node {
    Shape shape;
    Buffer value;
    Buffer grad;
    bool requires_grad = false;
    bool is_leaf = true;
    std::uint64_t id = detail::next_node_id();
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

// Disables tape recording on the current thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

// Shared handle to a tape node. Copies alias the same storage.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor from(Shape shape, const std::vector<double>& values, bool requires_grad = false) {
        return from(std::move(shape), Buffer(values.begin(), values.end()), requires_grad);
    }
    static Tensor from(Shape shape, std::initializer_list<double> values, bool requires_grad = false) {
        return from(std::move(shape), Buffer(values), requires_grad);
    }
    static Tensor from(Shape shape, Buffer values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size()) {
            throw DimensionError("tensor: shape " + shape_str(shape) + " holds " +
                                 std::to_string(shape_numel(shape)) + " values, got " +
                                 std::to_string(values.size()));
        }
        auto node = std::make_shared<Node>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        node->requires_grad = requires_grad;
        if (requires_grad) node->ensure_grad();
        return Tensor(std::move(node));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        return from(std::move(shape), Buffer(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double v) {
        const std::size_t n = shape_numel(shape);
        return from(std::move(shape), Buffer(n, v));
    }

    static Tensor scalar(double v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

    // Trainable leaf.
    static Tensor parameter(Shape shape, const std::vector<double>& values) {
        return from(std::move(shape), Buffer(values.begin(), values.end()), true);
    }
    static Tensor parameter(Shape shape, std::initializer_list<double> values) {
        return from(std::move(shape), Buffer(values), true);
    }
    static Tensor parameter(Shape shape, Buffer values) { return from(std::move(shape), std::move(values), true); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->value.size(); }
    // Leading extent of a rank-2 view (all but last axis flattened).
    std::size_t rows() const { return size() / cols(); }
    std::size_t cols() const { return node_->shape.empty() ? 1 : node_->shape.back(); }

    std::span<double> values() { return node_->value; }
    std::span<const double> values() const { return node_->value; }
    const Buffer& data() const { return node_->value; }
    double item() const {
        if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }
    double operator[](std::size_t i) const { return node_->value[i]; }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->grad.empty(); }
    std::span<double> grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    std::span<const double> grad() const { return node_->grad; }
    void zero_grad() {
        if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    std::uint64_t node_id() const { return node_->id; }
    const std::shared_ptr<Node>& node() const { return node_; }

    // Copy of the values with no tape history.
    Tensor detach() const { return from(shape(), node_->value); }

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

// Creates an op output. If recording is on and any input is tracked, the node
// joins the tape with the given backward closure.
inline Tensor make_result(Shape shape, Buffer values, std::initializer_list<Tensor> inputs,
                          std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->is_leaf = false;
    if (grad_enabled()) {
        bool tracked = false;
        for (const Tensor& t : inputs) tracked = tracked || t.requires_grad();
        if (tracked) {
            node->requires_grad = true;
            for (const Tensor& t : inputs) node->parents.push_back(t.node());
            node->backward_fn = std::move(backward_fn);
        }
    }
    return Tensor(std::move(node));
}

inline Tensor make_result(Shape shape, Buffer values, const std::vector<Tensor>& inputs,
                          std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->is_leaf = false;
    if (grad_enabled()) {
        bool tracked = false;
        for (const Tensor& t : inputs) tracked = tracked || t.requires_grad();
        if (tracked) {
            node->requires_grad = true;
            for (const Tensor& t : inputs) node->parents.push_back(t.node());
            node->backward_fn = std::move(backward_fn);
        }
    }
    return Tensor(std::move(node));
}

}  // namespace detail

// Reverse sweep from a scalar loss. Leaf grads accumulate; callers zero them
// between steps. Intermediate grads are released once propagated.
inline void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward: loss must be a scalar, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) throw ContractError("backward: loss is not on the tape");

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{loss.node().get()};
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        if (n->is_leaf) continue;
        order.push_back(n);
        for (const auto& p : n->parents) {
            if (p->requires_grad) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->id > b->id; });

    Node* root = loss.node().get();
    root->ensure_grad();
    root->grad[0] += 1.0;
    for (Node* n : order) {
        if (n->backward_fn && !n->grad.empty()) {
            for (const auto& p : n->parents) {
                if (p->requires_grad) p->ensure_grad();
            }
            n->backward_fn(*n);
        }
        Buffer().swap(n->grad);
    }
}

}  // namespace pivotnmt::nn
