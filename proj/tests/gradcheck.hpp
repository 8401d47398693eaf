#pragma once

#include <functional>

#include "camo/autodiff.hpp"

namespace camo::testing {

// Central-difference check of a scalar functional against the analytic
// gradient. Returns the worst component error, relative for large gradients
// and absolute (scaled) for tiny ones.
inline double gradcheck(const std::function<Var(const Var&)>& f, const Tensor& x0,
                        double h = 1e-5) {
    Var x = param(x0);
    Var y = f(x);
    if (y->val.numel() != 1) throw std::logic_error("gradcheck: functional must be scalar");
    backward(y);
    auto eval = [&](const Tensor& xv) { return f(constant(xv))->val.data[0]; };
    double worst = 0.0;
    for (int64_t i = 0; i < x0.numel(); ++i) {
        Tensor xp = x0, xm = x0;
        xp.data[i] += h;
        xm.data[i] -= h;
        const double fd = (eval(xp) - eval(xm)) / (2.0 * h);
        const double ga = x->grad_ready ? x->grad.data[i] : 0.0;
        const double err = std::abs(fd - ga) / std::max({1e-3, std::abs(fd), std::abs(ga)});
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace camo::testing
