#pragma once

#include <map>
#include <string>

#include "drpose/core/image_ops.hpp"
#include "drpose/core/rng.hpp"

namespace drpose {

/// Named parameter set for a network. Ordered map so that iteration (and
/// therefore optimizer updates and checkpoints) is deterministic.
template <typename T>
class ParamStore {
public:
    Array<T>& add(const std::string& name, Shape shape) {
        auto [it, fresh] = params_.emplace(name, Array<T>::zeros(std::move(shape)));
        if (!fresh) throw ValueError("ParamStore: duplicate parameter " + name);
        return it->second;
    }

    Array<T>& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw ValueError("ParamStore: unknown parameter " + name);
        return it->second;
    }
    const Array<T>& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw ValueError("ParamStore: unknown parameter " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return params_.count(name) != 0; }

    void watch_all(Tape<T>& tape) {
        for (auto& [name, p] : params_) tape.watch(p);
    }
    void detach_all() {
        for (auto& [name, p] : params_) {
            p.tape = nullptr;
            p.node = -1;
        }
    }

    /// Gradients for every parameter after tape.backward(); zeros for
    /// parameters the sweep never reached.
    GradientMap<T> grads(const Tape<T>& tape) const {
        GradientMap<T> g;
        for (const auto& [name, p] : params_) g.emplace(name, tape.grad(p));
        return g;
    }

    size_t scalar_count() const {
        size_t n = 0;
        for (const auto& [name, p] : params_) n += p.size();
        return n;
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    size_t size() const { return params_.size(); }

private:
    std::map<std::string, Array<T>> params_;
};

namespace nn {

template <typename T>
void fill_normal(Array<T>& a, Rng& rng, double stddev) {
    for (size_t i = 0; i < a.size(); ++i) a[i] = T(rng.normal() * stddev);
}

/// Kaiming-style init for a conv weight [O,C,kh,kw].
template <typename T>
void init_conv(Array<T>& w, Rng& rng) {
    const size_t fan_in = w.shape[1] * w.shape[2] * w.shape[3];
    fill_normal(w, rng, std::sqrt(2.0 / double(fan_in)));
}

/// Kaiming-style init for a linear weight [out,in].
template <typename T>
void init_linear(Array<T>& w, Rng& rng) {
    fill_normal(w, rng, std::sqrt(2.0 / double(w.shape[1])));
}

/// y = W x + b for a vector x[k], W[out,k], b[out].
template <typename T>
Array<T> linear_vec(const Array<T>& w, const Array<T>& b, const Array<T>& x) {
    if (w.shape.size() != 2 || x.size() != w.shape[1])
        throw ShapeError("linear_vec: shape mismatch " + shape_str(w.shape) + " vs " + shape_str(x.shape));
    Array<T> xm(Shape{x.size(), 1}, x.data);
    xm.tape = x.tape;
    xm.node = x.node;
    Array<T> y = matmul(w, xm);
    Array<T> yv(Shape{w.shape[0]}, y.data);
    yv.tape = y.tape;
    yv.node = y.node;
    return add(yv, b);
}

/// Sinusoidal embedding of an integer timestep, dimension must be even.
template <typename T>
Array<T> time_embedding(int t, size_t dim) {
    if (dim % 2) throw ShapeError("time_embedding: odd dimension");
    Array<T> e = Array<T>::zeros({dim});
    const size_t half = dim / 2;
    for (size_t i = 0; i < half; ++i) {
        const double f = std::exp(-std::log(10000.0) * (half > 1 ? double(i) / double(half - 1) : 0.0));
        e[i] = T(std::sin(t * f));
        e[half + i] = T(std::cos(t * f));
    }
    return e;
}

/// Largest power of two <= cap that divides the channel count.
inline size_t norm_groups_for(size_t channels, size_t cap = 8) {
    size_t g = 1;
    while (g * 2 <= cap && channels % (g * 2) == 0) g *= 2;
    return g;
}

} // namespace nn

} // namespace drpose
