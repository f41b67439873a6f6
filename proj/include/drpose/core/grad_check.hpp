#pragma once

#include <functional>

#include "drpose/core/ops.hpp"

namespace drpose {

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences. Returns the max over coordinates of
/// |analytic - central| / (|analytic| + eps) with eps scaled to the gradient
/// magnitude so that zero-gradient coordinates do not blow up the ratio.
/// f must be pure: it may be called with arrays on or off a tape.
template <typename T>
double finite_diff_check(const std::function<Array<T>(const Array<T>&)>& f, const Array<T>& x, T step) {
    if (step <= 0) throw ValueError("finite_diff_check: step must be positive");
    Tape<T> tape;
    Array<T> xw = x.clone_detached();
    tape.watch(xw);
    Array<T> loss = f(xw);
    if (loss.size() != 1) throw ShapeError("finite_diff_check: f must return a scalar");
    tape.backward(loss);
    Array<T> analytic = tape.grad(xw);

    double max_abs = 0;
    for (size_t i = 0; i < analytic.size(); ++i) max_abs = std::max(max_abs, std::abs(double(analytic[i])));
    const double eps = 1e-4 * (1.0 + max_abs);

    double worst = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        Array<T> xp = x.clone_detached();
        Array<T> xm = x.clone_detached();
        xp[i] += step;
        xm[i] -= step;
        const double fp = double(f(xp).scalar());
        const double fm = double(f(xm).scalar());
        const double central = (fp - fm) / (2.0 * double(step));
        const double err = std::abs(double(analytic[i]) - central) / (std::abs(double(analytic[i])) + eps);
        worst = std::max(worst, err);
    }
    return worst;
}

} // namespace drpose
