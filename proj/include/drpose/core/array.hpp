#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "drpose/core/common.hpp"

namespace drpose {

template <typename T> class Tape;

/// Runtime toggle for the finite-value check that runs after every forward
/// primitive. Off by default in optimized builds; tests flip it on.
inline std::atomic<bool>& finite_checks_enabled() {
#ifdef NDEBUG
    static std::atomic<bool> flag{false};
#else
    static std::atomic<bool> flag{true};
#endif
    return flag;
}

/// Dense n-dimensional array. Value semantics with shared storage; treated as
/// immutable once it participates in a recorded graph. When `node >= 0` the
/// array is connected to `tape` and gradients will flow to/through it.
template <typename T>
struct Array {
    Shape shape;
    std::shared_ptr<std::vector<T>> data;
    Tape<T>* tape = nullptr;
    int node = -1;

    Array() = default;
    Array(Shape s, std::shared_ptr<std::vector<T>> d) : shape(std::move(s)), data(std::move(d)) {}

    static Array zeros(Shape s) {
        size_t n = shape_numel(s);
        return Array(std::move(s), std::make_shared<std::vector<T>>(n, T(0)));
    }
    static Array full(Shape s, T v) {
        size_t n = shape_numel(s);
        return Array(std::move(s), std::make_shared<std::vector<T>>(n, v));
    }
    static Array from(Shape s, std::vector<T> values) {
        if (shape_numel(s) != values.size())
            throw ShapeError("Array::from: " + shape_str(s) + " does not hold " +
                             std::to_string(values.size()) + " values");
        return Array(std::move(s), std::make_shared<std::vector<T>>(std::move(values)));
    }
    static Array scalar_of(T v) { return full({1}, v); }

    size_t size() const { return data ? data->size() : 0; }
    bool defined() const { return bool(data); }
    bool requires_grad() const { return node >= 0; }

    T* ptr() { return data->data(); }
    const T* ptr() const { return data->data(); }
    T& operator[](size_t i) { return (*data)[i]; }
    const T& operator[](size_t i) const { return (*data)[i]; }

    T scalar() const {
        if (size() != 1) throw ShapeError("Array::scalar: shape " + shape_str(shape) + " is not scalar");
        return (*data)[0];
    }

    /// Deep copy of the values; the copy is detached from any tape.
    Array clone_detached() const {
        return Array(shape, std::make_shared<std::vector<T>>(*data));
    }
};

/// Mapping from parameter name to gradient array (shapes match the parameters).
template <typename T>
using GradientMap = std::map<std::string, Array<T>>;

/// Reverse-mode gradient tape. Operations append nodes in evaluation order,
/// so node index order is already topological; backward() is a single reverse
/// sweep that visits each node at most once. Single-threaded per tape.
template <typename T>
class Tape {
public:
    /// Passed to backward functions: the node's incoming gradient plus
    /// accumulation buffers for its parents (nullptr for constant operands).
    struct BackCtx {
        const T* out_grad;
        size_t out_size;
        Tape* tape;
        const std::vector<int>* parents;

        /// Gradient buffer of parent slot i, allocated on first use.
        /// Returns nullptr when that operand is a constant.
        T* parent_grad(size_t i) {
            int p = (*parents)[i];
            if (p < 0) return nullptr;
            return tape->grad_buffer(p);
        }
    };
    using BackFn = std::function<void(BackCtx&)>;

    /// Register a leaf (trainable input). Idempotent per array instance.
    int watch(Array<T>& a) {
        if (a.tape == this && a.node >= 0) return a.node;
        if (a.tape && a.tape != this) throw ValueError("Tape::watch: array already on another tape");
        nodes_.push_back(NodeRec{{}, a.size(), nullptr});
        a.tape = this;
        a.node = int(nodes_.size()) - 1;
        return a.node;
    }

    /// Record an operation producing `value` from `parents`. Parent entries
    /// may be detached arrays (recorded as constant slots).
    Array<T> record(std::initializer_list<const Array<T>*> parents, Array<T> value, BackFn back) {
        std::vector<int> pids;
        pids.reserve(parents.size());
        for (const Array<T>* p : parents) pids.push_back(p ? p->node : -1);
        return record_ids(std::move(pids), std::move(value), std::move(back));
    }

    Array<T> record_many(const std::vector<const Array<T>*>& parents, Array<T> value, BackFn back) {
        std::vector<int> pids;
        pids.reserve(parents.size());
        for (const Array<T>* p : parents) pids.push_back(p ? p->node : -1);
        return record_ids(std::move(pids), std::move(value), std::move(back));
    }

    /// Reverse sweep from a scalar loss. Deterministic: fixed node order,
    /// sequential accumulation.
    void backward(const Array<T>& loss) {
        if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape));
        if (loss.tape != this || loss.node < 0)
            throw ValueError("backward: loss is not recorded on this tape");
        grads_.assign(nodes_.size(), {});
        grads_[loss.node].assign(1, T(1));
        for (int i = loss.node; i >= 0; --i) {
            if (grads_[i].empty() || !nodes_[i].back) continue;
            BackCtx ctx{grads_[i].data(), grads_[i].size(), this, &nodes_[i].parents};
            nodes_[i].back(ctx);
        }
        ran_backward_ = true;
    }

    bool has_grad(int node) const {
        return ran_backward_ && node >= 0 && size_t(node) < grads_.size() && !grads_[node].empty();
    }

    /// Gradient of a watched/recorded array; zeros if the node was never
    /// reached by the sweep.
    Array<T> grad(const Array<T>& a) const {
        if (a.tape != this || a.node < 0) throw ValueError("Tape::grad: array is not on this tape");
        Array<T> g = Array<T>::zeros(a.shape);
        if (has_grad(a.node)) {
            const auto& buf = grads_[a.node];
            std::copy(buf.begin(), buf.end(), g.ptr());
        }
        return g;
    }

    size_t node_count() const { return nodes_.size(); }

private:
    friend struct BackCtx;
    struct NodeRec {
        std::vector<int> parents;
        size_t size;
        BackFn back;
    };

    Array<T> record_ids(std::vector<int> pids, Array<T> value, BackFn back) {
        const size_t n = value.size();
        nodes_.push_back(NodeRec{std::move(pids), n, std::move(back)});
        value.tape = this;
        value.node = int(nodes_.size()) - 1;
        return value;
    }

    T* grad_buffer(int node) {
        auto& buf = grads_[node];
        if (buf.empty()) buf.assign(nodes_[node].size, T(0));
        return buf.data();
    }

    std::vector<NodeRec> nodes_;
    std::vector<std::vector<T>> grads_;
    bool ran_backward_ = false;
};

/// Value-identical copy that backward treats as a constant.
template <typename T>
inline Array<T> stop_gradient(const Array<T>& x) {
    Array<T> out(x.shape, x.data);
    return out;
}

namespace detail {

template <typename T>
inline void check_finite(const char* op, const Array<T>& a) {
    if (!finite_checks_enabled().load(std::memory_order_relaxed)) return;
    const T* p = a.ptr();
    for (size_t i = 0; i < a.size(); ++i) {
        if (!std::isfinite(double(p[i])))
            throw ValueError(std::string(op) + ": non-finite value in result at index " + std::to_string(i));
    }
}

/// Resolve the tape shared by the operands (nullptr if all are detached).
template <typename T>
inline Tape<T>* joint_tape(std::initializer_list<const Array<T>*> args) {
    Tape<T>* t = nullptr;
    for (const Array<T>* a : args) {
        if (!a || a->node < 0) continue;
        if (t && a->tape != t) throw ValueError("operands recorded on different tapes");
        t = a->tape;
    }
    return t;
}

template <typename T>
inline Tape<T>* joint_tape_vec(const std::vector<const Array<T>*>& args) {
    Tape<T>* t = nullptr;
    for (const Array<T>* a : args) {
        if (!a || a->node < 0) continue;
        if (t && a->tape != t) throw ValueError("operands recorded on different tapes");
        t = a->tape;
    }
    return t;
}

} // namespace detail

} // namespace drpose
