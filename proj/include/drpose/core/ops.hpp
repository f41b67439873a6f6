#pragma once

#include <algorithm>
#include <cmath>

#include "drpose/core/array.hpp"
#include "drpose/core/parallel.hpp"

namespace drpose {

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Binary ops take equal shapes or a scalar (size-1)
// on either side; the scalar side receives the summed gradient.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
inline void binary_shape_check(const char* op, const Array<T>& a, const Array<T>& b) {
    if (same_shape(a.shape, b.shape) || a.size() == 1 || b.size() == 1) return;
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

template <typename T, typename FwdFn, typename BackFn>
Array<T> binary_op(const char* name, const Array<T>& a, const Array<T>& b, FwdFn fwd, BackFn back) {
    binary_shape_check(name, a, b);
    const size_t n = std::max(a.size(), b.size());
    Array<T> out = Array<T>::zeros(a.size() >= b.size() ? a.shape : b.shape);
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    const size_t sa = a.size() == 1 ? 0 : 1;
    const size_t sb = b.size() == 1 ? 0 : 1;
    for (size_t i = 0; i < n; ++i) po[i] = fwd(pa[i * sa], pb[i * sb]);
    check_finite(name, out);
    Tape<T>* tape = joint_tape<T>({&a, &b});
    if (!tape) return out;
    return tape->record({&a, &b}, std::move(out),
                        [da = a.data, db = b.data, sa, sb, n, back](typename Tape<T>::BackCtx& ctx) {
                            T* ga = ctx.parent_grad(0);
                            T* gb = ctx.parent_grad(1);
                            const T* pa = da->data();
                            const T* pb = db->data();
                            for (size_t i = 0; i < n; ++i) {
                                T gx, gy;
                                back(pa[i * sa], pb[i * sb], ctx.out_grad[i], gx, gy);
                                if (ga) ga[i * sa] += gx;
                                if (gb) gb[i * sb] += gy;
                            }
                        });
}

template <typename T, typename FwdFn, typename BackFn>
Array<T> unary_op(const char* name, const Array<T>& x, FwdFn fwd, BackFn back) {
    Array<T> out = Array<T>::zeros(x.shape);
    const T* px = x.ptr();
    T* po = out.ptr();
    const size_t n = x.size();
    for (size_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
    check_finite(name, out);
    Tape<T>* tape = joint_tape<T>({&x});
    if (!tape) return out;
    auto dx = x.data;
    auto dy = out.data;
    return tape->record({&x}, std::move(out), [dx, dy, n, back](typename Tape<T>::BackCtx& ctx) {
        T* gx = ctx.parent_grad(0);
        if (!gx) return;
        const T* px = dx->data();
        const T* py = dy->data();
        for (size_t i = 0; i < n; ++i) gx[i] += back(px[i], py[i]) * ctx.out_grad[i];
    });
}

} // namespace detail

template <typename T>
Array<T> add(const Array<T>& a, const Array<T>& b) {
    return detail::binary_op<T>(
        "add", a, b, [](T x, T y) { return x + y; },
        [](T, T, T g, T& gx, T& gy) { gx = g; gy = g; });
}

template <typename T>
Array<T> sub(const Array<T>& a, const Array<T>& b) {
    return detail::binary_op<T>(
        "sub", a, b, [](T x, T y) { return x - y; },
        [](T, T, T g, T& gx, T& gy) { gx = g; gy = -g; });
}

template <typename T>
Array<T> mul(const Array<T>& a, const Array<T>& b) {
    return detail::binary_op<T>(
        "mul", a, b, [](T x, T y) { return x * y; },
        [](T x, T y, T g, T& gx, T& gy) { gx = g * y; gy = g * x; });
}

template <typename T>
Array<T> div(const Array<T>& a, const Array<T>& b) {
    return detail::binary_op<T>(
        "div", a, b, [](T x, T y) { return x / y; },
        [](T x, T y, T g, T& gx, T& gy) { gx = g / y; gy = -g * x / (y * y); });
}

template <typename T>
Array<T> neg(const Array<T>& x) {
    return detail::unary_op<T>("neg", x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
Array<T> exp(const Array<T>& x) {
    return detail::unary_op<T>("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Array<T> log(const Array<T>& x) {
    return detail::unary_op<T>("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Array<T> sqrt(const Array<T>& x) {
    return detail::unary_op<T>("sqrt", x, [](T v) { return std::sqrt(v); },
                               [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Array<T> sigmoid(const Array<T>& x) {
    auto sig = [](T v) {
        if (v >= 0) return T(1) / (T(1) + std::exp(-v));
        T e = std::exp(v);
        return e / (T(1) + e);
    };
    return detail::unary_op<T>("sigmoid", x, sig, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Array<T> silu(const Array<T>& x) {
    auto sig = [](T v) {
        if (v >= 0) return T(1) / (T(1) + std::exp(-v));
        T e = std::exp(v);
        return e / (T(1) + e);
    };
    return detail::unary_op<T>("silu", x, [sig](T v) { return v * sig(v); },
                               [sig](T v, T) {
                                   T s = sig(v);
                                   return s * (T(1) + v * (T(1) - s));
                               });
}

/// y = c * x for a plain scalar c.
template <typename T>
Array<T> scale(const Array<T>& x, T c) {
    return detail::unary_op<T>("scale", x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <typename T>
Array<T> add_scalar(const Array<T>& x, T c) {
    return detail::unary_op<T>("add_scalar", x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

/// ca*a + cb*b with plain scalar coefficients (shapes must match exactly).
template <typename T>
Array<T> axpby(T ca, const Array<T>& a, T cb, const Array<T>& b) {
    if (!same_shape(a.shape, b.shape))
        throw ShapeError("axpby: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    return detail::binary_op<T>(
        "axpby", a, b, [ca, cb](T x, T y) { return ca * x + cb * y; },
        [ca, cb](T, T, T g, T& gx, T& gy) { gx = ca * g; gy = cb * g; });
}

// ---------------------------------------------------------------------------
// Reductions and losses.
// ---------------------------------------------------------------------------

template <typename T>
Array<T> sum(const Array<T>& x) {
    T acc = 0;
    const T* p = x.ptr();
    for (size_t i = 0; i < x.size(); ++i) acc += p[i];
    Array<T> out = Array<T>::scalar_of(acc);
    detail::check_finite("sum", out);
    Tape<T>* tape = detail::joint_tape<T>({&x});
    if (!tape) return out;
    return tape->record({&x}, std::move(out), [n = x.size()](typename Tape<T>::BackCtx& ctx) {
        T* gx = ctx.parent_grad(0);
        if (!gx) return;
        for (size_t i = 0; i < n; ++i) gx[i] += ctx.out_grad[0];
    });
}

template <typename T>
Array<T> mean(const Array<T>& x) {
    if (x.size() == 0) throw ShapeError("mean: empty array");
    T acc = 0;
    const T* p = x.ptr();
    for (size_t i = 0; i < x.size(); ++i) acc += p[i];
    Array<T> out = Array<T>::scalar_of(acc / T(x.size()));
    detail::check_finite("mean", out);
    Tape<T>* tape = detail::joint_tape<T>({&x});
    if (!tape) return out;
    return tape->record({&x}, std::move(out), [n = x.size()](typename Tape<T>::BackCtx& ctx) {
        T* gx = ctx.parent_grad(0);
        if (!gx) return;
        const T g = ctx.out_grad[0] / T(n);
        for (size_t i = 0; i < n; ++i) gx[i] += g;
    });
}

/// Mean squared error between equal-shape arrays.
template <typename T>
Array<T> mse(const Array<T>& a, const Array<T>& b) {
    if (!same_shape(a.shape, b.shape))
        throw ShapeError("mse: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    const size_t n = a.size();
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T acc = 0;
    for (size_t i = 0; i < n; ++i) {
        T d = pa[i] - pb[i];
        acc += d * d;
    }
    Array<T> out = Array<T>::scalar_of(acc / T(n));
    detail::check_finite("mse", out);
    Tape<T>* tape = detail::joint_tape<T>({&a, &b});
    if (!tape) return out;
    return tape->record({&a, &b}, std::move(out),
                        [da = a.data, db = b.data, n](typename Tape<T>::BackCtx& ctx) {
                            T* ga = ctx.parent_grad(0);
                            T* gb = ctx.parent_grad(1);
                            const T* pa = da->data();
                            const T* pb = db->data();
                            const T c = T(2) * ctx.out_grad[0] / T(n);
                            for (size_t i = 0; i < n; ++i) {
                                T d = c * (pa[i] - pb[i]);
                                if (ga) ga[i] += d;
                                if (gb) gb[i] -= d;
                            }
                        });
}

inline constexpr double kBceEps = 1e-7;

/// Binary cross entropy with soft targets, mean reduction. Predictions are
/// clamped to [eps, 1-eps]; the clamp zeroes the gradient outside that range.
/// Gradients flow to predictions only.
template <typename T>
Array<T> bce(const Array<T>& pred, const Array<T>& target) {
    if (!same_shape(pred.shape, target.shape))
        throw ShapeError("bce: shape mismatch " + shape_str(pred.shape) + " vs " + shape_str(target.shape));
    const size_t n = pred.size();
    const T eps = T(kBceEps);
    const T* pp = pred.ptr();
    const T* pt = target.ptr();
    T acc = 0;
    for (size_t i = 0; i < n; ++i) {
        T p = std::clamp(pp[i], eps, T(1) - eps);
        acc -= pt[i] * std::log(p) + (T(1) - pt[i]) * std::log(T(1) - p);
    }
    Array<T> out = Array<T>::scalar_of(acc / T(n));
    detail::check_finite("bce", out);
    Tape<T>* tape = detail::joint_tape<T>({&pred});
    if (!tape) return out;
    return tape->record({&pred}, std::move(out),
                        [dp = pred.data, dt = target.data, n, eps](typename Tape<T>::BackCtx& ctx) {
                            T* gp = ctx.parent_grad(0);
                            if (!gp) return;
                            const T* pp = dp->data();
                            const T* pt = dt->data();
                            const T c = ctx.out_grad[0] / T(n);
                            for (size_t i = 0; i < n; ++i) {
                                if (pp[i] < eps || pp[i] > T(1) - eps) continue;
                                gp[i] += c * (pp[i] - pt[i]) / (pp[i] * (T(1) - pp[i]));
                            }
                        });
}

// ---------------------------------------------------------------------------
// Matrix multiply: [m,k] x [k,n] -> [m,n].
// ---------------------------------------------------------------------------

namespace detail {

/// C += A(m,k) * B(k,n), row-major. The j-loop vectorizes; each output row is
/// produced by one worker so results are thread-count independent.
template <typename T>
void gemm_acc(const T* A, const T* B, T* C, size_t m, size_t k, size_t n) {
    auto row = [&](size_t i) {
        T* ci = C + i * n;
        const T* ai = A + i * k;
        for (size_t l = 0; l < k; ++l) {
            const T a = ai[l];
            const T* bl = B + l * n;
            for (size_t j = 0; j < n; ++j) ci[j] += a * bl[j];
        }
    };
    if (m * n * k >= 1 << 16) {
        parallel_for(m, 1, row);
    } else {
        for (size_t i = 0; i < m; ++i) row(i);
    }
}

/// C += A^T(k,m stored as m,k) * B... specifically C(m,n) += sum_l A(l,m) B(l,n)
template <typename T>
void gemm_at_b(const T* A, const T* B, T* C, size_t l_dim, size_t m, size_t n) {
    auto row = [&](size_t i) {
        T* ci = C + i * n;
        for (size_t l = 0; l < l_dim; ++l) {
            const T a = A[l * m + i];
            const T* bl = B + l * n;
            for (size_t j = 0; j < n; ++j) ci[j] += a * bl[j];
        }
    };
    if (m * n * l_dim >= 1 << 16) {
        parallel_for(m, 1, row);
    } else {
        for (size_t i = 0; i < m; ++i) row(i);
    }
}

/// C(m,k) += A(m,n) * B^T where B is (k,n): C[i,l] = sum_j A[i,j] B[l,j]
template <typename T>
void gemm_a_bt(const T* A, const T* B, T* C, size_t m, size_t n, size_t k) {
    auto row = [&](size_t i) {
        const T* ai = A + i * n;
        T* ci = C + i * k;
        for (size_t l = 0; l < k; ++l) {
            const T* bl = B + l * n;
            T acc = 0;
            for (size_t j = 0; j < n; ++j) acc += ai[j] * bl[j];
            ci[l] += acc;
        }
    };
    if (m * n * k >= 1 << 16) {
        parallel_for(m, 1, row);
    } else {
        for (size_t i = 0; i < m; ++i) row(i);
    }
}

} // namespace detail

template <typename T>
Array<T> matmul(const Array<T>& a, const Array<T>& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
        throw ShapeError("matmul: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    const size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Array<T> out = Array<T>::zeros({m, n});
    detail::gemm_acc(a.ptr(), b.ptr(), out.ptr(), m, k, n);
    detail::check_finite("matmul", out);
    Tape<T>* tape = detail::joint_tape<T>({&a, &b});
    if (!tape) return out;
    return tape->record({&a, &b}, std::move(out),
                        [da = a.data, db = b.data, m, k, n](typename Tape<T>::BackCtx& ctx) {
                            T* ga = ctx.parent_grad(0);
                            T* gb = ctx.parent_grad(1);
                            // dA = dC * B^T ; dB = A^T * dC
                            if (ga) detail::gemm_a_bt(ctx.out_grad, db->data(), ga, m, n, k);
                            if (gb) detail::gemm_at_b(da->data(), ctx.out_grad, gb, m, k, n);
                        });
}

// ---------------------------------------------------------------------------
// Concatenation along axis 0 and its inverse slice.
// ---------------------------------------------------------------------------

/// Concatenate along the leading axis; trailing dimensions must agree.
template <typename T>
Array<T> concat0(const std::vector<Array<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat0: no inputs");
    Shape tail(parts[0].shape.begin() + 1, parts[0].shape.end());
    size_t lead = 0;
    for (const auto& p : parts) {
        Shape t(p.shape.begin() + 1, p.shape.end());
        if (t != tail)
            throw ShapeError("concat0: trailing shape mismatch " + shape_str(parts[0].shape) + " vs " +
                             shape_str(p.shape));
        lead += p.shape[0];
    }
    Shape out_shape = parts[0].shape;
    out_shape[0] = lead;
    Array<T> out = Array<T>::zeros(out_shape);
    size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.ptr(), p.ptr() + p.size(), out.ptr() + off);
        off += p.size();
    }
    std::vector<const Array<T>*> ptrs;
    for (const auto& p : parts) ptrs.push_back(&p);
    Tape<T>* tape = detail::joint_tape_vec<T>(ptrs);
    if (!tape) return out;
    std::vector<size_t> sizes;
    for (const auto& p : parts) sizes.push_back(p.size());
    return tape->record_many(ptrs, std::move(out), [sizes](typename Tape<T>::BackCtx& ctx) {
        size_t off = 0;
        for (size_t s = 0; s < sizes.size(); ++s) {
            T* g = ctx.parent_grad(s);
            if (g)
                for (size_t i = 0; i < sizes[s]; ++i) g[i] += ctx.out_grad[off + i];
            off += sizes[s];
        }
    });
}

/// View rows [begin, end) of the leading axis as a new array.
template <typename T>
Array<T> slice0(const Array<T>& x, size_t begin, size_t end) {
    if (x.shape.empty() || begin >= end || end > x.shape[0])
        throw ShapeError("slice0: invalid range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") for " + shape_str(x.shape));
    Shape out_shape = x.shape;
    out_shape[0] = end - begin;
    size_t stride = x.size() / x.shape[0];
    const size_t count = (end - begin) * stride;
    Array<T> out = Array<T>::zeros(out_shape);
    std::copy(x.ptr() + begin * stride, x.ptr() + end * stride, out.ptr());
    Tape<T>* tape = detail::joint_tape<T>({&x});
    if (!tape) return out;
    return tape->record({&x}, std::move(out), [begin, stride, count](typename Tape<T>::BackCtx& ctx) {
        T* gx = ctx.parent_grad(0);
        if (!gx) return;
        for (size_t i = 0; i < count; ++i) gx[begin * stride + i] += ctx.out_grad[i];
    });
}

} // namespace drpose
