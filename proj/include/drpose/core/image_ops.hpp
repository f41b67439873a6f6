#pragma once

#include <cmath>

#include "drpose/core/ops.hpp"

namespace drpose {

namespace detail {

/// Unpack x[C,H,W] into columns of receptive fields: col[(c,ky,kx), (oy,ox)].
template <typename T>
void im2col(const T* x, size_t C, size_t H, size_t W, size_t kh, size_t kw, size_t stride, size_t pad,
            size_t Ho, size_t Wo, T* col) {
    for (size_t c = 0; c < C; ++c) {
        for (size_t ky = 0; ky < kh; ++ky) {
            for (size_t kx = 0; kx < kw; ++kx) {
                T* dst = col + ((c * kh + ky) * kw + kx) * (Ho * Wo);
                for (size_t oy = 0; oy < Ho; ++oy) {
                    const long iy = long(oy * stride + ky) - long(pad);
                    if (iy < 0 || iy >= long(H)) {
                        for (size_t ox = 0; ox < Wo; ++ox) dst[oy * Wo + ox] = T(0);
                        continue;
                    }
                    const T* src = x + (c * H + size_t(iy)) * W;
                    for (size_t ox = 0; ox < Wo; ++ox) {
                        const long ix = long(ox * stride + kx) - long(pad);
                        dst[oy * Wo + ox] = (ix < 0 || ix >= long(W)) ? T(0) : src[ix];
                    }
                }
            }
        }
    }
}

/// Scatter-add of column gradients back to the input image.
template <typename T>
void col2im_acc(const T* col, size_t C, size_t H, size_t W, size_t kh, size_t kw, size_t stride,
                size_t pad, size_t Ho, size_t Wo, T* gx) {
    for (size_t c = 0; c < C; ++c) {
        for (size_t ky = 0; ky < kh; ++ky) {
            for (size_t kx = 0; kx < kw; ++kx) {
                const T* src = col + ((c * kh + ky) * kw + kx) * (Ho * Wo);
                for (size_t oy = 0; oy < Ho; ++oy) {
                    const long iy = long(oy * stride + ky) - long(pad);
                    if (iy < 0 || iy >= long(H)) continue;
                    T* dst = gx + (c * H + size_t(iy)) * W;
                    for (size_t ox = 0; ox < Wo; ++ox) {
                        const long ix = long(ox * stride + kx) - long(pad);
                        if (ix >= 0 && ix < long(W)) dst[ix] += src[oy * Wo + ox];
                    }
                }
            }
        }
    }
}

} // namespace detail

/// 2-D convolution, x[C,H,W] * w[O,C,kh,kw] (+ bias[O]) -> [O,Ho,Wo].
/// Pass an undefined bias array to skip the bias term.
template <typename T>
Array<T> conv2d(const Array<T>& x, const Array<T>& w, const Array<T>& bias, size_t stride = 1,
                size_t pad = 0) {
    if (x.shape.size() != 3 || w.shape.size() != 4 || x.shape[0] != w.shape[1])
        throw ShapeError("conv2d: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(w.shape));
    const size_t C = x.shape[0], H = x.shape[1], W = x.shape[2];
    const size_t O = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    if (H + 2 * pad < kh || W + 2 * pad < kw)
        throw ShapeError("conv2d: kernel larger than padded input " + shape_str(x.shape));
    const size_t Ho = (H + 2 * pad - kh) / stride + 1;
    const size_t Wo = (W + 2 * pad - kw) / stride + 1;
    const size_t R = C * kh * kw, N = Ho * Wo;
    const bool has_bias = bias.defined();
    if (has_bias && (bias.shape.size() != 1 || bias.shape[0] != O))
        throw ShapeError("conv2d: bias shape " + shape_str(bias.shape) + " does not match " +
                         std::to_string(O) + " output channels");

    std::vector<T> col(R * N);
    detail::im2col(x.ptr(), C, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
    Array<T> out = Array<T>::zeros({O, Ho, Wo});
    detail::gemm_acc(w.ptr(), col.data(), out.ptr(), O, R, N);
    if (has_bias) {
        T* po = out.ptr();
        const T* pb = bias.ptr();
        for (size_t o = 0; o < O; ++o)
            for (size_t i = 0; i < N; ++i) po[o * N + i] += pb[o];
    }
    detail::check_finite("conv2d", out);

    Tape<T>* tape = detail::joint_tape<T>({&x, &w, has_bias ? &bias : &x});
    if (!tape) return out;
    auto dx = x.data;
    auto dw = w.data;
    auto back = [dx, dw, C, H, W, O, kh, kw, stride, pad, Ho, Wo, R, N](typename Tape<T>::BackCtx& ctx) {
        T* gx = ctx.parent_grad(0);
        T* gw = ctx.parent_grad(1);
        T* gb = ctx.parent_grad(2);
        if (gb) {
            for (size_t o = 0; o < O; ++o) {
                T acc = 0;
                for (size_t i = 0; i < N; ++i) acc += ctx.out_grad[o * N + i];
                gb[o] += acc;
            }
        }
        if (gw) {
            std::vector<T> col(R * N);
            detail::im2col(dx->data(), C, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
            detail::gemm_a_bt(ctx.out_grad, col.data(), gw, O, N, R);
        }
        if (gx) {
            std::vector<T> gcol(R * N, T(0));
            detail::gemm_at_b(dw->data(), ctx.out_grad, gcol.data(), O, R, N);
            detail::col2im_acc(gcol.data(), C, H, W, kh, kw, stride, pad, Ho, Wo, gx);
        }
    };
    if (has_bias) return tape->record({&x, &w, &bias}, std::move(out), std::move(back));
    return tape->record({&x, &w, nullptr}, std::move(out), std::move(back));
}

/// 2x2 average pooling with stride 2 (spatial dims must be even).
template <typename T>
Array<T> avg_pool2(const Array<T>& x) {
    if (x.shape.size() != 3 || x.shape[1] % 2 || x.shape[2] % 2)
        throw ShapeError("avg_pool2: needs [C,H,W] with even H,W, got " + shape_str(x.shape));
    const size_t C = x.shape[0], H = x.shape[1], W = x.shape[2];
    const size_t Ho = H / 2, Wo = W / 2;
    Array<T> out = Array<T>::zeros({C, Ho, Wo});
    const T* px = x.ptr();
    T* po = out.ptr();
    for (size_t c = 0; c < C; ++c)
        for (size_t oy = 0; oy < Ho; ++oy)
            for (size_t ox = 0; ox < Wo; ++ox) {
                const T* p = px + (c * H + 2 * oy) * W + 2 * ox;
                po[(c * Ho + oy) * Wo + ox] = T(0.25) * (p[0] + p[1] + p[W] + p[W + 1]);
            }
    detail::check_finite("avg_pool2", out);
    Tape<T>* tape = detail::joint_tape<T>({&x});
    if (!tape) return out;
    return tape->record({&x}, std::move(out), [C, H, W, Ho, Wo](typename Tape<T>::BackCtx& ctx) {
        T* gx = ctx.parent_grad(0);
        if (!gx) return;
        for (size_t c = 0; c < C; ++c)
            for (size_t oy = 0; oy < Ho; ++oy)
                for (size_t ox = 0; ox < Wo; ++ox) {
                    const T g = T(0.25) * ctx.out_grad[(c * Ho + oy) * Wo + ox];
                    T* p = gx + (c * H + 2 * oy) * W + 2 * ox;
                    p[0] += g;
                    p[1] += g;
                    p[W] += g;
                    p[W + 1] += g;
                }
    });
}

/// Nearest-neighbor 2x upsampling.
template <typename T>
Array<T> upsample_nearest2(const Array<T>& x) {
    if (x.shape.size() != 3) throw ShapeError("upsample_nearest2: needs [C,H,W], got " + shape_str(x.shape));
    const size_t C = x.shape[0], H = x.shape[1], W = x.shape[2];
    Array<T> out = Array<T>::zeros({C, 2 * H, 2 * W});
    const T* px = x.ptr();
    T* po = out.ptr();
    for (size_t c = 0; c < C; ++c)
        for (size_t y = 0; y < H; ++y)
            for (size_t xx = 0; xx < W; ++xx) {
                const T v = px[(c * H + y) * W + xx];
                T* p = po + (c * 2 * H + 2 * y) * 2 * W + 2 * xx;
                p[0] = v;
                p[1] = v;
                p[2 * W] = v;
                p[2 * W + 1] = v;
            }
    Tape<T>* tape = detail::joint_tape<T>({&x});
    if (!tape) return out;
    return tape->record({&x}, std::move(out), [C, H, W](typename Tape<T>::BackCtx& ctx) {
        T* gx = ctx.parent_grad(0);
        if (!gx) return;
        for (size_t c = 0; c < C; ++c)
            for (size_t y = 0; y < H; ++y)
                for (size_t xx = 0; xx < W; ++xx) {
                    const T* p = ctx.out_grad + (c * 2 * H + 2 * y) * 2 * W + 2 * xx;
                    gx[(c * H + y) * W + xx] += p[0] + p[1] + p[2 * W] + p[2 * W + 1];
                }
    });
}

/// Bilinear 2x upsampling (half-pixel centers, clamped borders).
template <typename T>
Array<T> upsample_bilinear2(const Array<T>& x) {
    if (x.shape.size() != 3) throw ShapeError("upsample_bilinear2: needs [C,H,W], got " + shape_str(x.shape));
    const size_t C = x.shape[0], H = x.shape[1], W = x.shape[2];
    const size_t Ho = 2 * H, Wo = 2 * W;
    // Precompute 1-D sample positions/weights shared by rows and columns.
    auto make_taps = [](size_t n_in, size_t n_out, std::vector<size_t>& i0, std::vector<size_t>& i1,
                        std::vector<T>& w1) {
        i0.resize(n_out);
        i1.resize(n_out);
        w1.resize(n_out);
        for (size_t o = 0; o < n_out; ++o) {
            double pos = (o + 0.5) / 2.0 - 0.5;
            double fl = std::floor(pos);
            long a = long(fl);
            double frac = pos - fl;
            long b = a + 1;
            a = std::clamp(a, 0l, long(n_in) - 1);
            b = std::clamp(b, 0l, long(n_in) - 1);
            i0[o] = size_t(a);
            i1[o] = size_t(b);
            w1[o] = T(frac);
        }
    };
    std::vector<size_t> y0, y1, x0, x1;
    std::vector<T> wy, wx;
    make_taps(H, Ho, y0, y1, wy);
    make_taps(W, Wo, x0, x1, wx);

    Array<T> out = Array<T>::zeros({C, Ho, Wo});
    const T* px = x.ptr();
    T* po = out.ptr();
    for (size_t c = 0; c < C; ++c)
        for (size_t oy = 0; oy < Ho; ++oy)
            for (size_t ox = 0; ox < Wo; ++ox) {
                const T* base = px + c * H * W;
                const T v00 = base[y0[oy] * W + x0[ox]], v01 = base[y0[oy] * W + x1[ox]];
                const T v10 = base[y1[oy] * W + x0[ox]], v11 = base[y1[oy] * W + x1[ox]];
                const T a = wy[oy], b = wx[ox];
                po[(c * Ho + oy) * Wo + ox] = (T(1) - a) * ((T(1) - b) * v00 + b * v01) + a * ((T(1) - b) * v10 + b * v11);
            }
    Tape<T>* tape = detail::joint_tape<T>({&x});
    if (!tape) return out;
    return tape->record({&x}, std::move(out),
                        [C, H, W, Ho, Wo, y0, y1, x0, x1, wy, wx](typename Tape<T>::BackCtx& ctx) {
                            T* gx = ctx.parent_grad(0);
                            if (!gx) return;
                            for (size_t c = 0; c < C; ++c)
                                for (size_t oy = 0; oy < Ho; ++oy)
                                    for (size_t ox = 0; ox < Wo; ++ox) {
                                        const T g = ctx.out_grad[(c * Ho + oy) * Wo + ox];
                                        T* base = gx + c * H * W;
                                        const T a = wy[oy], b = wx[ox];
                                        base[y0[oy] * W + x0[ox]] += (T(1) - a) * (T(1) - b) * g;
                                        base[y0[oy] * W + x1[ox]] += (T(1) - a) * b * g;
                                        base[y1[oy] * W + x0[ox]] += a * (T(1) - b) * g;
                                        base[y1[oy] * W + x1[ox]] += a * b * g;
                                    }
                        });
}

/// Group normalization over [C,H,W] with per-channel affine. groups must
/// divide C; groups == C gives instance norm, groups == 1 layer norm.
template <typename T>
Array<T> group_norm(const Array<T>& x, size_t groups, const Array<T>& gamma, const Array<T>& beta,
                    T eps = T(1e-5)) {
    if (x.shape.size() != 3) throw ShapeError("group_norm: needs [C,H,W], got " + shape_str(x.shape));
    const size_t C = x.shape[0], HW = x.shape[1] * x.shape[2];
    if (groups == 0 || C % groups)
        throw ShapeError("group_norm: " + std::to_string(groups) + " groups do not divide " +
                         std::to_string(C) + " channels");
    if (gamma.size() != C || beta.size() != C)
        throw ShapeError("group_norm: affine shape " + shape_str(gamma.shape) + " vs " +
                         std::to_string(C) + " channels");
    const size_t cpg = C / groups, gsize = cpg * HW;
    Array<T> out = Array<T>::zeros(x.shape);
    auto xhat = std::make_shared<std::vector<T>>(x.size());
    auto inv_std = std::make_shared<std::vector<T>>(groups);
    const T* px = x.ptr();
    const T* pg = gamma.ptr();
    const T* pb = beta.ptr();
    T* po = out.ptr();
    for (size_t g = 0; g < groups; ++g) {
        const T* xg = px + g * gsize;
        T m = 0;
        for (size_t i = 0; i < gsize; ++i) m += xg[i];
        m /= T(gsize);
        T v = 0;
        for (size_t i = 0; i < gsize; ++i) {
            T d = xg[i] - m;
            v += d * d;
        }
        v /= T(gsize);
        const T s = T(1) / std::sqrt(v + eps);
        (*inv_std)[g] = s;
        for (size_t c = 0; c < cpg; ++c) {
            const size_t ch = g * cpg + c;
            const T* xi = px + ch * HW;
            T* xh = xhat->data() + ch * HW;
            T* oi = po + ch * HW;
            for (size_t i = 0; i < HW; ++i) {
                xh[i] = (xi[i] - m) * s;
                oi[i] = pg[ch] * xh[i] + pb[ch];
            }
        }
    }
    detail::check_finite("group_norm", out);
    Tape<T>* tape = detail::joint_tape<T>({&x, &gamma, &beta});
    if (!tape) return out;
    auto dgamma = gamma.data;
    return tape->record({&x, &gamma, &beta}, std::move(out),
                        [xhat, inv_std, dgamma, groups, cpg, HW, gsize](typename Tape<T>::BackCtx& ctx) {
                            T* gx = ctx.parent_grad(0);
                            T* gg = ctx.parent_grad(1);
                            T* gb = ctx.parent_grad(2);
                            const T* xh = xhat->data();
                            const T* pg = dgamma->data();
                            for (size_t g = 0; g < groups; ++g) {
                                // dxhat, then the two group means for the input gradient
                                T sum_dxh = 0, sum_dxh_xh = 0;
                                for (size_t c = 0; c < cpg; ++c) {
                                    const size_t ch = g * cpg + c;
                                    for (size_t i = 0; i < HW; ++i) {
                                        const size_t idx = ch * HW + i;
                                        const T go = ctx.out_grad[idx];
                                        if (gb) gb[ch] += go;
                                        if (gg) gg[ch] += go * xh[idx];
                                        const T dxh = go * pg[ch];
                                        sum_dxh += dxh;
                                        sum_dxh_xh += dxh * xh[idx];
                                    }
                                }
                                if (!gx) continue;
                                const T s = (*inv_std)[g];
                                const T m1 = sum_dxh / T(gsize);
                                const T m2 = sum_dxh_xh / T(gsize);
                                for (size_t c = 0; c < cpg; ++c) {
                                    const size_t ch = g * cpg + c;
                                    for (size_t i = 0; i < HW; ++i) {
                                        const size_t idx = ch * HW + i;
                                        const T dxh = ctx.out_grad[idx] * pg[ch];
                                        gx[idx] += s * (dxh - m1 - xh[idx] * m2);
                                    }
                                }
                            }
                        });
}

/// Add a per-channel bias vector b[C] to x[C,H,W].
template <typename T>
Array<T> channel_bias(const Array<T>& x, const Array<T>& b) {
    if (x.shape.size() != 3 || b.size() != x.shape[0])
        throw ShapeError("channel_bias: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(b.shape));
    const size_t C = x.shape[0], HW = x.shape[1] * x.shape[2];
    Array<T> out = Array<T>::zeros(x.shape);
    const T* px = x.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    for (size_t c = 0; c < C; ++c)
        for (size_t i = 0; i < HW; ++i) po[c * HW + i] = px[c * HW + i] + pb[c];
    detail::check_finite("channel_bias", out);
    Tape<T>* tape = detail::joint_tape<T>({&x, &b});
    if (!tape) return out;
    return tape->record({&x, &b}, std::move(out), [C, HW](typename Tape<T>::BackCtx& ctx) {
        T* gx = ctx.parent_grad(0);
        T* gb = ctx.parent_grad(1);
        if (gx)
            for (size_t i = 0; i < C * HW; ++i) gx[i] += ctx.out_grad[i];
        if (gb)
            for (size_t c = 0; c < C; ++c) {
                T acc = 0;
                for (size_t i = 0; i < HW; ++i) acc += ctx.out_grad[c * HW + i];
                gb[c] += acc;
            }
    });
}

} // namespace drpose
