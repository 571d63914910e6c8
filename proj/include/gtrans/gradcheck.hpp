#pragma once

#include <cmath>
#include <cstdint>
#include <functional>

#include "gtrans/tensor.hpp"

namespace gtrans {

// Central-difference gradient of a scalar-valued closure with respect to x.
// The closure must recompute the value from x's current contents; x is
// restored after each probe.
template <typename Real>
Tensor<Real> finite_diff_grad(const std::function<Real()>& f, Tensor<Real> x, Real h = Real(1e-4)) {
    Tensor<Real> g(x.shape());
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const Real saved = x.at(i);
        x.at(i) = saved + h;
        const Real fp = f();
        x.at(i) = saved - h;
        const Real fm = f();
        x.at(i) = saved;
        g.at(i) = (fp - fm) / (Real(2) * h);
    }
    return g;
}

// Largest elementwise |a - b| / (atol + rtol * max(|a|, |b|)); a value <= 1
// means every element is within tolerance.
template <typename Real>
Real max_scaled_err(const Tensor<Real>& a, const Tensor<Real>& b, Real rtol, Real atol) {
    Real worst = 0;
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const Real av = a.at(i), bv = b.at(i);
        const Real scale = atol + rtol * std::max(std::abs(av), std::abs(bv));
        worst = std::max(worst, std::abs(av - bv) / scale);
    }
    return worst;
}

template <typename Real>
bool grads_close(const Tensor<Real>& analytic, const Tensor<Real>& numeric, Real rtol, Real atol) {
    if (analytic.shape() != numeric.shape()) return false;
    return max_scaled_err(analytic, numeric, rtol, atol) <= Real(1);
}

// Reads the accumulated gradient of a leaf as a tensor.
template <typename Real>
Tensor<Real> grad_of(const Tensor<Real>& t) {
    Tensor<Real> g(t.shape());
    auto s = t.storage();
    if (s->grad)
        for (std::int64_t i = 0; i < t.numel(); ++i) g.at(i) = (*s->grad)[static_cast<std::size_t>(i)];
    return g;
}

}  // namespace gtrans
