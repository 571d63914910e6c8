#pragma once

#ifndef EIGEN_DONT_PARALLELIZE
#define EIGEN_DONT_PARALLELIZE
#endif

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "gtrans/errors.hpp"
#include "gtrans/rng.hpp"
#include "gtrans/tensor.hpp"
#include "gtrans/token.hpp"

namespace gtrans {
namespace detail {

template <typename Real>
using EMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Real>
Eigen::Map<EMat<Real>> mat(Real* p, std::int64_t r, std::int64_t c) {
    return Eigen::Map<EMat<Real>>(p, r, c);
}

template <typename Real>
Eigen::Map<const EMat<Real>> cmat(const Real* p, std::int64_t r, std::int64_t c) {
    return Eigen::Map<const EMat<Real>>(p, r, c);
}

template <typename Real>
void ensure_grad(TensorStorage<Real>& s) {
    if (!s.grad) s.grad = std::make_shared<std::vector<Real>>(s.data->size(), Real(0));
}

template <typename Real>
bool want_record(Tape<Real>* tape, std::initializer_list<const Tensor<Real>*> inputs) {
    if (!tape) return false;
    for (const auto* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> add(Tensor<Real> a, Tensor<Real> b, Tape<Real>* tape = nullptr) {
    if (a.shape() != b.shape())
        throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<Real> out(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
    check_finite(out, "add");
    if (detail::want_record(tape, {&a, &b})) {
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        tape->record("add", {tape->touch(a), tape->touch(b)}, out, [as, bs, os, n] {
            const auto& g = *os->grad;
            if (as->requires_grad) {
                detail::ensure_grad(*as);
                for (std::int64_t i = 0; i < n; ++i) (*as->grad)[i] += g[i];
            }
            if (bs->requires_grad) {
                detail::ensure_grad(*bs);
                for (std::int64_t i = 0; i < n; ++i) (*bs->grad)[i] += g[i];
            }
        });
    }
    return out;
}

template <typename Real>
Tensor<Real> mul(Tensor<Real> a, Tensor<Real> b, Tape<Real>* tape = nullptr) {
    if (a.shape() != b.shape())
        throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<Real> out(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
    check_finite(out, "mul");
    if (detail::want_record(tape, {&a, &b})) {
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        tape->record("mul", {tape->touch(a), tape->touch(b)}, out, [as, bs, os, n] {
            const auto& g = *os->grad;
            if (as->requires_grad) {
                detail::ensure_grad(*as);
                for (std::int64_t i = 0; i < n; ++i) (*as->grad)[i] += g[i] * (*bs->data)[i];
            }
            if (bs->requires_grad) {
                detail::ensure_grad(*bs);
                for (std::int64_t i = 0; i < n; ++i) (*bs->grad)[i] += g[i] * (*as->data)[i];
            }
        });
    }
    return out;
}

// out = x * c for a fixed (non-learned) scalar c.
template <typename Real>
Tensor<Real> scale(Tensor<Real> x, Real c, Tape<Real>* tape = nullptr) {
    Tensor<Real> out(x.shape());
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) out.at(i) = x.at(i) * c;
    check_finite(out, "scale");
    if (detail::want_record(tape, {&x})) {
        auto xs = x.storage(), os = out.storage();
        tape->record("scale", {tape->touch(x)}, out, [xs, os, c, n] {
            if (!xs->requires_grad) return;
            detail::ensure_grad(*xs);
            const auto& g = *os->grad;
            for (std::int64_t i = 0; i < n; ++i) (*xs->grad)[i] += g[i] * c;
        });
    }
    return out;
}

// out = x * v[idx] where v is a learned vector; the scalar weight receives
// the full inner product <d_out, x> as its gradient.
template <typename Real>
Tensor<Real> scale_by(Tensor<Real> x, Tensor<Real> v, int idx, Tape<Real>* tape = nullptr) {
    if (v.rank() != 1 || idx < 0 || idx >= v.dim(0))
        throw DimensionError("scale_by: index " + std::to_string(idx) + " out of " + shape_str(v.shape()));
    Tensor<Real> out(x.shape());
    const Real c = v.at(idx);
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) out.at(i) = x.at(i) * c;
    check_finite(out, "scale_by");
    if (detail::want_record(tape, {&x, &v})) {
        auto xs = x.storage(), vs = v.storage(), os = out.storage();
        tape->record("scale_by", {tape->touch(x), tape->touch(v)}, out, [xs, vs, os, idx, c, n] {
            const auto& g = *os->grad;
            if (xs->requires_grad) {
                detail::ensure_grad(*xs);
                for (std::int64_t i = 0; i < n; ++i) (*xs->grad)[i] += g[i] * c;
            }
            if (vs->requires_grad) {
                detail::ensure_grad(*vs);
                Real acc = 0;
                for (std::int64_t i = 0; i < n; ++i) acc += g[i] * (*xs->data)[i];
                (*vs->grad)[idx] += acc;
            }
        });
    }
    return out;
}

// x: [R x C], bias: [C], broadcast over rows.
template <typename Real>
Tensor<Real> add_bias(Tensor<Real> x, Tensor<Real> b, Tape<Real>* tape = nullptr) {
    if (x.rank() != 2 || b.rank() != 1 || x.dim(1) != b.dim(0))
        throw DimensionError("add_bias: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
    const std::int64_t r = x.dim(0), c = x.dim(1);
    Tensor<Real> out(x.shape());
    for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) out.at(i * c + j) = x.at(i * c + j) + b.at(j);
    check_finite(out, "add_bias");
    if (detail::want_record(tape, {&x, &b})) {
        auto xs = x.storage(), bs = b.storage(), os = out.storage();
        tape->record("add_bias", {tape->touch(x), tape->touch(b)}, out, [xs, bs, os, r, c] {
            const auto& g = *os->grad;
            if (xs->requires_grad) {
                detail::ensure_grad(*xs);
                for (std::int64_t i = 0; i < r * c; ++i) (*xs->grad)[i] += g[i];
            }
            if (bs->requires_grad) {
                detail::ensure_grad(*bs);
                for (std::int64_t i = 0; i < r; ++i)
                    for (std::int64_t j = 0; j < c; ++j) (*bs->grad)[j] += g[i * c + j];
            }
        });
    }
    return out;
}

template <typename Real>
Tensor<Real> sigmoid(Tensor<Real> x, Tape<Real>* tape = nullptr) {
    Tensor<Real> out(x.shape());
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) out.at(i) = Real(1) / (Real(1) + std::exp(-x.at(i)));
    check_finite(out, "sigmoid");
    if (detail::want_record(tape, {&x})) {
        auto xs = x.storage(), os = out.storage();
        tape->record("sigmoid", {tape->touch(x)}, out, [xs, os, n] {
            if (!xs->requires_grad) return;
            detail::ensure_grad(*xs);
            const auto& g = *os->grad;
            const auto& y = *os->data;
            for (std::int64_t i = 0; i < n; ++i) (*xs->grad)[i] += g[i] * y[i] * (Real(1) - y[i]);
        });
    }
    return out;
}

template <typename Real>
Tensor<Real> relu(Tensor<Real> x, Tape<Real>* tape = nullptr) {
    Tensor<Real> out(x.shape());
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) out.at(i) = x.at(i) > Real(0) ? x.at(i) : Real(0);
    if (detail::want_record(tape, {&x})) {
        auto xs = x.storage(), os = out.storage();
        tape->record("relu", {tape->touch(x)}, out, [xs, os, n] {
            if (!xs->requires_grad) return;
            detail::ensure_grad(*xs);
            const auto& g = *os->grad;
            const auto& xv = *xs->data;
            for (std::int64_t i = 0; i < n; ++i)
                if (xv[i] > Real(0)) (*xs->grad)[i] += g[i];
        });
    }
    return out;
}

// Inverted dropout: kept activations are scaled by 1/(1-p) so eval needs no
// rescaling. Call only in training mode; eval forward simply skips it.
template <typename Real>
Tensor<Real> dropout(Tensor<Real> x, Real p, Rng& rng, Tape<Real>* tape = nullptr) {
    if (p < Real(0) || p >= Real(1)) throw ValueError("dropout rate must be in [0,1)");
    if (p == Real(0)) return x;
    const std::int64_t n = x.numel();
    auto keep = std::make_shared<std::vector<Real>>(n);
    const Real inv = Real(1) / (Real(1) - p);
    for (std::int64_t i = 0; i < n; ++i)
        (*keep)[i] = rng.next_uniform() < static_cast<double>(p) ? Real(0) : inv;
    Tensor<Real> out(x.shape());
    for (std::int64_t i = 0; i < n; ++i) out.at(i) = x.at(i) * (*keep)[i];
    check_finite(out, "dropout");
    if (detail::want_record(tape, {&x})) {
        auto xs = x.storage(), os = out.storage();
        tape->record("dropout", {tape->touch(x)}, out, [xs, os, keep, n] {
            if (!xs->requires_grad) return;
            detail::ensure_grad(*xs);
            const auto& g = *os->grad;
            for (std::int64_t i = 0; i < n; ++i) (*xs->grad)[i] += g[i] * (*keep)[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> matmul(Tensor<Real> a, Tensor<Real> b, Tape<Real>* tape = nullptr) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<Real> out({static_cast<int>(m), static_cast<int>(n)});
    detail::mat(out.data(), m, n).noalias() = detail::cmat(a.data(), m, k) * detail::cmat(b.data(), k, n);
    check_finite(out, "matmul");
    if (detail::want_record(tape, {&a, &b})) {
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        tape->record("matmul", {tape->touch(a), tape->touch(b)}, out, [as, bs, os, m, k, n] {
            auto g = detail::cmat(os->grad->data(), m, n);
            if (as->requires_grad) {
                detail::ensure_grad(*as);
                detail::mat(as->grad->data(), m, k).noalias() +=
                    g * detail::cmat(bs->data->data(), k, n).transpose();
            }
            if (bs->requires_grad) {
                detail::ensure_grad(*bs);
                detail::mat(bs->grad->data(), k, n).noalias() +=
                    detail::cmat(as->data->data(), m, k).transpose() * g;
            }
        });
    }
    return out;
}

// out = a . b^T  (a: [m x k], b: [n x k]).
template <typename Real>
Tensor<Real> matmul_nt(Tensor<Real> a, Tensor<Real> b, Tape<Real>* tape = nullptr) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw DimensionError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor<Real> out({static_cast<int>(m), static_cast<int>(n)});
    detail::mat(out.data(), m, n).noalias() =
        detail::cmat(a.data(), m, k) * detail::cmat(b.data(), n, k).transpose();
    check_finite(out, "matmul_nt");
    if (detail::want_record(tape, {&a, &b})) {
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        tape->record("matmul_nt", {tape->touch(a), tape->touch(b)}, out, [as, bs, os, m, k, n] {
            auto g = detail::cmat(os->grad->data(), m, n);
            if (as->requires_grad) {
                detail::ensure_grad(*as);
                detail::mat(as->grad->data(), m, k).noalias() += g * detail::cmat(bs->data->data(), n, k);
            }
            if (bs->requires_grad) {
                detail::ensure_grad(*bs);
                detail::mat(bs->grad->data(), n, k).noalias() +=
                    g.transpose() * detail::cmat(as->data->data(), m, k);
            }
        });
    }
    return out;
}

namespace detail {

template <typename Real>
std::int64_t batch_count(const Tensor<Real>& t) {
    std::int64_t b = 1;
    for (int i = 0; i + 2 < t.rank(); ++i) b *= t.dim(i);
    return b;
}

template <typename Real>
bool batch_dims_match(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.rank() != b.rank()) return false;
    for (int i = 0; i + 2 < a.rank(); ++i)
        if (a.dim(i) != b.dim(i)) return false;
    return true;
}

}  // namespace detail

// Batched product over the leading dims: [ ... x m x k ] . [ ... x k x n ].
template <typename Real>
Tensor<Real> bmm(Tensor<Real> a, Tensor<Real> b, Tape<Real>* tape = nullptr) {
    if (a.rank() < 3 || !detail::batch_dims_match(a, b) || a.dim(a.rank() - 1) != b.dim(b.rank() - 2))
        throw DimensionError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::int64_t bc = detail::batch_count(a);
    const std::int64_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1), n = b.dim(b.rank() - 1);
    Shape os(a.shape());
    os[os.size() - 1] = static_cast<int>(n);
    Tensor<Real> out(os);
    for (std::int64_t i = 0; i < bc; ++i)
        detail::mat(out.data() + i * m * n, m, n).noalias() =
            detail::cmat(a.data() + i * m * k, m, k) * detail::cmat(b.data() + i * k * n, k, n);
    check_finite(out, "bmm");
    if (detail::want_record(tape, {&a, &b})) {
        auto as = a.storage(), bs = b.storage(), oss = out.storage();
        tape->record("bmm", {tape->touch(a), tape->touch(b)}, out, [as, bs, oss, bc, m, k, n] {
            for (std::int64_t i = 0; i < bc; ++i) {
                auto g = detail::cmat(oss->grad->data() + i * m * n, m, n);
                if (as->requires_grad) {
                    detail::ensure_grad(*as);
                    detail::mat(as->grad->data() + i * m * k, m, k).noalias() +=
                        g * detail::cmat(bs->data->data() + i * k * n, k, n).transpose();
                }
                if (bs->requires_grad) {
                    detail::ensure_grad(*bs);
                    detail::mat(bs->grad->data() + i * k * n, k, n).noalias() +=
                        detail::cmat(as->data->data() + i * m * k, m, k).transpose() * g;
                }
            }
        });
    }
    return out;
}

// Batched a . b^T: [ ... x m x k ] . [ ... x n x k ] -> [ ... x m x n ].
template <typename Real>
Tensor<Real> bmm_nt(Tensor<Real> a, Tensor<Real> b, Tape<Real>* tape = nullptr) {
    if (a.rank() < 3 || !detail::batch_dims_match(a, b) || a.dim(a.rank() - 1) != b.dim(b.rank() - 1))
        throw DimensionError("bmm_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
    const std::int64_t bc = detail::batch_count(a);
    const std::int64_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1), n = b.dim(b.rank() - 2);
    Shape os(a.shape());
    os[os.size() - 1] = static_cast<int>(n);
    Tensor<Real> out(os);
    for (std::int64_t i = 0; i < bc; ++i)
        detail::mat(out.data() + i * m * n, m, n).noalias() =
            detail::cmat(a.data() + i * m * k, m, k) * detail::cmat(b.data() + i * n * k, n, k).transpose();
    check_finite(out, "bmm_nt");
    if (detail::want_record(tape, {&a, &b})) {
        auto as = a.storage(), bs = b.storage(), oss = out.storage();
        tape->record("bmm_nt", {tape->touch(a), tape->touch(b)}, out, [as, bs, oss, bc, m, k, n] {
            for (std::int64_t i = 0; i < bc; ++i) {
                auto g = detail::cmat(oss->grad->data() + i * m * n, m, n);
                if (as->requires_grad) {
                    detail::ensure_grad(*as);
                    detail::mat(as->grad->data() + i * m * k, m, k).noalias() +=
                        g * detail::cmat(bs->data->data() + i * n * k, n, k);
                }
                if (bs->requires_grad) {
                    detail::ensure_grad(*bs);
                    detail::mat(bs->grad->data() + i * n * k, n, k).noalias() +=
                        g.transpose() * detail::cmat(as->data->data() + i * m * k, m, k);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// shape movement
// ---------------------------------------------------------------------------

// General axis permutation (materialized copy).
template <typename Real>
Tensor<Real> permute(Tensor<Real> x, const std::vector<int>& perm, Tape<Real>* tape = nullptr) {
    const int r = x.rank();
    if (static_cast<int>(perm.size()) != r) throw DimensionError("permute: rank mismatch");
    std::vector<char> seen(static_cast<std::size_t>(r), 0);
    for (int p : perm) {
        if (p < 0 || p >= r || seen[static_cast<std::size_t>(p)])
            throw DimensionError("permute: invalid permutation");
        seen[static_cast<std::size_t>(p)] = 1;
    }
    Shape oshape(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) oshape[static_cast<std::size_t>(i)] = x.dim(perm[static_cast<std::size_t>(i)]);

    std::vector<std::int64_t> xstride(static_cast<std::size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
        xstride[static_cast<std::size_t>(i)] = xstride[static_cast<std::size_t>(i + 1)] * x.dim(i + 1);
    // stride in x for each output axis
    auto ostride_in_x = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i)
        (*ostride_in_x)[static_cast<std::size_t>(i)] = xstride[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];

    Tensor<Real> out(oshape);
    const std::int64_t n = x.numel();
    auto oshape_p = std::make_shared<Shape>(oshape);
    {
        std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
        std::int64_t src = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            out.at(i) = x.at(src);
            for (int a = r - 1; a >= 0; --a) {
                src += (*ostride_in_x)[static_cast<std::size_t>(a)];
                if (++idx[static_cast<std::size_t>(a)] < oshape[static_cast<std::size_t>(a)]) break;
                src -= (*ostride_in_x)[static_cast<std::size_t>(a)] * oshape[static_cast<std::size_t>(a)];
                idx[static_cast<std::size_t>(a)] = 0;
            }
        }
    }
    if (detail::want_record(tape, {&x})) {
        auto xs = x.storage(), oss = out.storage();
        tape->record("permute", {tape->touch(x)}, out, [xs, oss, ostride_in_x, oshape_p, n] {
            if (!xs->requires_grad) return;
            detail::ensure_grad(*xs);
            const int r2 = static_cast<int>(oshape_p->size());
            std::vector<std::int64_t> idx(static_cast<std::size_t>(r2), 0);
            std::int64_t src = 0;
            const auto& g = *oss->grad;
            for (std::int64_t i = 0; i < n; ++i) {
                (*xs->grad)[static_cast<std::size_t>(src)] += g[static_cast<std::size_t>(i)];
                for (int a = r2 - 1; a >= 0; --a) {
                    src += (*ostride_in_x)[static_cast<std::size_t>(a)];
                    if (++idx[static_cast<std::size_t>(a)] < (*oshape_p)[static_cast<std::size_t>(a)]) break;
                    src -= (*ostride_in_x)[static_cast<std::size_t>(a)] * (*oshape_p)[static_cast<std::size_t>(a)];
                    idx[static_cast<std::size_t>(a)] = 0;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

// Temperature softmax over the last axis, computed with max subtraction.
template <typename Real>
Tensor<Real> softmax_t(Tensor<Real> x, Real tau, Tape<Real>* tape = nullptr) {
    if (tau <= Real(0)) throw ValueError("softmax temperature must be positive");
    const std::int64_t c = x.dim(x.rank() - 1);
    const std::int64_t rows = x.numel() / c;
    Tensor<Real> out(x.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        const Real* xr = x.data() + r * c;
        Real* yr = out.data() + r * c;
        Real mx = xr[0];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
        Real z = 0;
        for (std::int64_t j = 0; j < c; ++j) {
            yr[j] = std::exp((xr[j] - mx) / tau);
            z += yr[j];
        }
        for (std::int64_t j = 0; j < c; ++j) yr[j] /= z;
    }
    check_finite(out, "softmax_t");
    if (detail::want_record(tape, {&x})) {
        auto xs = x.storage(), os = out.storage();
        tape->record("softmax_t", {tape->touch(x)}, out, [xs, os, rows, c, tau] {
            if (!xs->requires_grad) return;
            detail::ensure_grad(*xs);
            for (std::int64_t r = 0; r < rows; ++r) {
                const Real* y = os->data->data() + r * c;
                const Real* g = os->grad->data() + r * c;
                Real* dx = xs->grad->data() + r * c;
                Real dot = 0;
                for (std::int64_t j = 0; j < c; ++j) dot += y[j] * g[j];
                for (std::int64_t j = 0; j < c; ++j) dx[j] += y[j] * (g[j] - dot) / tau;
            }
        });
    }
    return out;
}

// log softmax over the last axis.
template <typename Real>
Tensor<Real> log_softmax(Tensor<Real> x, Tape<Real>* tape = nullptr) {
    const std::int64_t c = x.dim(x.rank() - 1);
    const std::int64_t rows = x.numel() / c;
    Tensor<Real> out(x.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        const Real* xr = x.data() + r * c;
        Real* yr = out.data() + r * c;
        Real mx = xr[0];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
        Real z = 0;
        for (std::int64_t j = 0; j < c; ++j) z += std::exp(xr[j] - mx);
        const Real lse = mx + std::log(z);
        for (std::int64_t j = 0; j < c; ++j) yr[j] = xr[j] - lse;
    }
    check_finite(out, "log_softmax");
    if (detail::want_record(tape, {&x})) {
        auto xs = x.storage(), os = out.storage();
        tape->record("log_softmax", {tape->touch(x)}, out, [xs, os, rows, c] {
            if (!xs->requires_grad) return;
            detail::ensure_grad(*xs);
            for (std::int64_t r = 0; r < rows; ++r) {
                const Real* y = os->data->data() + r * c;
                const Real* g = os->grad->data() + r * c;
                Real* dx = xs->grad->data() + r * c;
                Real gsum = 0;
                for (std::int64_t j = 0; j < c; ++j) gsum += g[j];
                for (std::int64_t j = 0; j < c; ++j) dx[j] += g[j] - std::exp(y[j]) * gsum;
            }
        });
    }
    return out;
}

// Softmax over the allowed entries of each row; blocked entries get weight
// exactly 0. scores: [B x H x Tq x Tk], mask: [B x Tq x Tk] shared across
// heads. A row with no allowed entry is an input error.
template <typename Real>
Tensor<Real> masked_softmax(Tensor<Real> scores, const ByteMask& mask, Tape<Real>* tape = nullptr) {
    if (scores.rank() != 4) throw DimensionError("masked_softmax expects [B,H,Tq,Tk] scores");
    const std::int64_t b = scores.dim(0), h = scores.dim(1), tq = scores.dim(2), tk = scores.dim(3);
    if (mask.shape != Shape{static_cast<int>(b), static_cast<int>(tq), static_cast<int>(tk)})
        throw DimensionError("masked_softmax: mask shape mismatch");
    Tensor<Real> out(scores.shape());
    for (std::int64_t bi = 0; bi < b; ++bi) {
        for (std::int64_t hi = 0; hi < h; ++hi) {
            for (std::int64_t q = 0; q < tq; ++q) {
                const std::uint8_t* mrow = mask.v.data() + (bi * tq + q) * tk;
                const Real* xr = scores.data() + ((bi * h + hi) * tq + q) * tk;
                Real* yr = out.data() + ((bi * h + hi) * tq + q) * tk;
                Real mx = -std::numeric_limits<Real>::infinity();
                for (std::int64_t k = 0; k < tk; ++k)
                    if (mrow[k]) mx = std::max(mx, xr[k]);
                if (!std::isfinite(static_cast<double>(mx)))
                    throw ValueError("masked_softmax: attention row has no allowed column");
                Real z = 0;
                for (std::int64_t k = 0; k < tk; ++k) {
                    yr[k] = mrow[k] ? std::exp(xr[k] - mx) : Real(0);
                    z += yr[k];
                }
                for (std::int64_t k = 0; k < tk; ++k) yr[k] /= z;
            }
        }
    }
    check_finite(out, "masked_softmax");
    if (detail::want_record(tape, {&scores})) {
        auto xs = scores.storage(), os = out.storage();
        tape->record("masked_softmax", {tape->touch(scores)}, out, [xs, os, b, h, tq, tk] {
            if (!xs->requires_grad) return;
            detail::ensure_grad(*xs);
            const std::int64_t rows = b * h * tq;
            for (std::int64_t r = 0; r < rows; ++r) {
                const Real* y = os->data->data() + r * tk;
                const Real* g = os->grad->data() + r * tk;
                Real* dx = xs->grad->data() + r * tk;
                Real dot = 0;
                for (std::int64_t k = 0; k < tk; ++k) dot += y[k] * g[k];
                // y is zero on blocked entries, so they receive no gradient
                for (std::int64_t k = 0; k < tk; ++k) dx[k] += y[k] * (g[k] - dot);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// layer norm
// ---------------------------------------------------------------------------

// Per-last-axis standardization (biased variance) followed by gamma/beta.
template <typename Real>
Tensor<Real> layer_norm(Tensor<Real> x, Tensor<Real> gamma, Tensor<Real> beta, Real eps,
                        Tape<Real>* tape = nullptr) {
    const std::int64_t d = x.dim(x.rank() - 1);
    if (d == 0) throw DimensionError("layer_norm: empty feature axis");
    if (eps <= Real(0)) throw ValueError("layer_norm: eps must be positive");
    if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d)
        throw DimensionError("layer_norm: gamma/beta must be [" + std::to_string(d) + "]");
    const std::int64_t rows = x.numel() / d;
    Tensor<Real> out(x.shape());
    auto inv_std = std::make_shared<std::vector<Real>>(rows);
    auto xhat = std::make_shared<std::vector<Real>>(x.numel());
    for (std::int64_t r = 0; r < rows; ++r) {
        const Real* xr = x.data() + r * d;
        Real mean = 0;
        for (std::int64_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<Real>(d);
        Real var = 0;
        for (std::int64_t j = 0; j < d; ++j) {
            const Real c = xr[j] - mean;
            var += c * c;
        }
        var /= static_cast<Real>(d);
        const Real is = Real(1) / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        Real* hr = xhat->data() + r * d;
        Real* yr = out.data() + r * d;
        for (std::int64_t j = 0; j < d; ++j) {
            hr[j] = (xr[j] - mean) * is;
            yr[j] = hr[j] * gamma.at(j) + beta.at(j);
        }
    }
    check_finite(out, "layer_norm");
    if (detail::want_record(tape, {&x, &gamma, &beta})) {
        auto xs = x.storage(), gs = gamma.storage(), bs = beta.storage(), os = out.storage();
        tape->record("layer_norm", {tape->touch(x), tape->touch(gamma), tape->touch(beta)}, out,
                     [xs, gs, bs, os, xhat, inv_std, rows, d] {
                         const auto& g = *os->grad;
                         if (gs->requires_grad) detail::ensure_grad(*gs);
                         if (bs->requires_grad) detail::ensure_grad(*bs);
                         if (xs->requires_grad) detail::ensure_grad(*xs);
                         for (std::int64_t r = 0; r < rows; ++r) {
                             const Real* gr = g.data() + r * d;
                             const Real* hr = xhat->data() + r * d;
                             if (gs->requires_grad || bs->requires_grad) {
                                 for (std::int64_t j = 0; j < d; ++j) {
                                     if (gs->requires_grad) (*gs->grad)[j] += gr[j] * hr[j];
                                     if (bs->requires_grad) (*bs->grad)[j] += gr[j];
                                 }
                             }
                             if (xs->requires_grad) {
                                 Real sum_dy = 0, sum_dyh = 0;
                                 for (std::int64_t j = 0; j < d; ++j) {
                                     const Real dy = gr[j] * (*gs->data)[j];
                                     sum_dy += dy;
                                     sum_dyh += dy * hr[j];
                                 }
                                 const Real is = (*inv_std)[r];
                                 const Real inv_d = Real(1) / static_cast<Real>(d);
                                 Real* dx = xs->grad->data() + r * d;
                                 for (std::int64_t j = 0; j < d; ++j) {
                                     const Real dy = gr[j] * (*gs->data)[j];
                                     dx[j] += is * (dy - sum_dy * inv_d - hr[j] * sum_dyh * inv_d);
                                 }
                             }
                         }
                     });
    }
    return out;
}

// ---------------------------------------------------------------------------
// embeddings and losses
// ---------------------------------------------------------------------------

// Row gather: table [V x D], ids [R x C] -> [R x C x D].
template <typename Real>
Tensor<Real> embedding(Tensor<Real> table, const TokenMatrix& ids, Tape<Real>* tape = nullptr) {
    if (table.rank() != 2) throw DimensionError("embedding table must be [V x D]");
    const std::int64_t v = table.dim(0), d = table.dim(1);
    for (TokenId id : ids.v)
        if (id < 0 || id >= v)
            throw VocabError("token id " + std::to_string(id) + " outside vocabulary of size " +
                             std::to_string(v));
    Tensor<Real> out({ids.rows, ids.cols, static_cast<int>(d)});
    const std::int64_t n = static_cast<std::int64_t>(ids.v.size());
    for (std::int64_t i = 0; i < n; ++i)
        std::copy_n(table.data() + ids.v[static_cast<std::size_t>(i)] * d, d, out.data() + i * d);
    check_finite(out, "embedding");
    if (detail::want_record(tape, {&table})) {
        auto ts = table.storage(), os = out.storage();
        auto idv = std::make_shared<std::vector<TokenId>>(ids.v);
        tape->record("embedding", {tape->touch(table)}, out, [ts, os, idv, d, n] {
            if (!ts->requires_grad) return;
            detail::ensure_grad(*ts);
            for (std::int64_t i = 0; i < n; ++i) {
                Real* dst = ts->grad->data() + (*idv)[static_cast<std::size_t>(i)] * d;
                const Real* src = os->grad->data() + i * d;
                for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

// x: [B x T x D] plus fixed positional table pe: [L x D], T <= L. The table
// is a constant; no gradient flows into it.
template <typename Real>
Tensor<Real> add_positional(Tensor<Real> x, const Tensor<Real>& pe, Tape<Real>* tape = nullptr) {
    if (x.rank() != 3 || pe.rank() != 2 || x.dim(2) != pe.dim(1) || x.dim(1) > pe.dim(0))
        throw DimensionError("add_positional: " + shape_str(x.shape()) + " with table " +
                             shape_str(pe.shape()));
    const std::int64_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
    Tensor<Real> out(x.shape());
    for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t ti = 0; ti < t; ++ti) {
            const Real* xr = x.data() + (bi * t + ti) * d;
            const Real* pr = pe.data() + ti * d;
            Real* yr = out.data() + (bi * t + ti) * d;
            for (std::int64_t j = 0; j < d; ++j) yr[j] = xr[j] + pr[j];
        }
    check_finite(out, "add_positional");
    if (detail::want_record(tape, {&x})) {
        auto xs = x.storage(), os = out.storage();
        const std::int64_t n = x.numel();
        tape->record("add_positional", {tape->touch(x)}, out, [xs, os, n] {
            if (!xs->requires_grad) return;
            detail::ensure_grad(*xs);
            for (std::int64_t i = 0; i < n; ++i) (*xs->grad)[i] += (*os->grad)[i];
        });
    }
    return out;
}

// Label-smoothed negative log likelihood, averaged over non-pad rows.
// log_probs: [R x V]; targets: R ids; rows whose target equals pad_id are
// excluded. smoothing = 0 gives plain NLL.
template <typename Real>
Tensor<Real> smoothed_nll(Tensor<Real> log_probs, const std::vector<TokenId>& targets, TokenId pad_id,
                          Real smoothing, Tape<Real>* tape = nullptr) {
    if (log_probs.rank() != 2) throw DimensionError("smoothed_nll expects [R x V] log probs");
    const std::int64_t r = log_probs.dim(0), v = log_probs.dim(1);
    if (static_cast<std::int64_t>(targets.size()) != r)
        throw DimensionError("smoothed_nll: target count mismatch");
    if (smoothing < Real(0) || smoothing >= Real(1)) throw ValueError("smoothing must be in [0,1)");
    std::int64_t live = 0;
    double acc = 0;
    for (std::int64_t i = 0; i < r; ++i) {
        const TokenId t = targets[static_cast<std::size_t>(i)];
        if (t == pad_id) continue;
        if (t < 0 || t >= v)
            throw VocabError("target id " + std::to_string(t) + " outside vocabulary of size " +
                             std::to_string(v));
        ++live;
        const Real* lp = log_probs.data() + i * v;
        double row = -(1.0 - static_cast<double>(smoothing)) * static_cast<double>(lp[t]);
        if (smoothing > Real(0)) {
            double s = 0;
            for (std::int64_t j = 0; j < v; ++j) s += static_cast<double>(lp[j]);
            row += -static_cast<double>(smoothing) * s / static_cast<double>(v);
        }
        acc += row;
    }
    if (live == 0) throw ValueError("smoothed_nll: every position is padding");
    Tensor<Real> out = Tensor<Real>::scalar(static_cast<Real>(acc / static_cast<double>(live)));
    check_finite(out, "smoothed_nll");
    if (detail::want_record(tape, {&log_probs})) {
        auto ls = log_probs.storage(), os = out.storage();
        auto tg = std::make_shared<std::vector<TokenId>>(targets);
        tape->record("smoothed_nll", {tape->touch(log_probs)}, out,
                     [ls, os, tg, pad_id, smoothing, r, v, live] {
                         if (!ls->requires_grad) return;
                         detail::ensure_grad(*ls);
                         const Real g = (*os->grad)[0] / static_cast<Real>(live);
                         const Real uni = smoothing / static_cast<Real>(v);
                         for (std::int64_t i = 0; i < r; ++i) {
                             const TokenId t = (*tg)[static_cast<std::size_t>(i)];
                             if (t == pad_id) continue;
                             Real* dl = ls->grad->data() + i * v;
                             if (smoothing > Real(0))
                                 for (std::int64_t j = 0; j < v; ++j) dl[j] -= g * uni;
                             dl[t] -= g * (Real(1) - smoothing);
                         }
                     });
    }
    return out;
}

// Plain NLL over non-pad rows.
template <typename Real>
Tensor<Real> nll_loss(Tensor<Real> log_probs, const std::vector<TokenId>& targets, TokenId pad_id,
                      Tape<Real>* tape = nullptr) {
    return smoothed_nll(log_probs, targets, pad_id, Real(0), tape);
}

// ---------------------------------------------------------------------------
// reductions and glue
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> sum(Tensor<Real> x, Tape<Real>* tape = nullptr) {
    double acc = 0;
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) acc += static_cast<double>(x.at(i));
    Tensor<Real> out = Tensor<Real>::scalar(static_cast<Real>(acc));
    check_finite(out, "sum");
    if (detail::want_record(tape, {&x})) {
        auto xs = x.storage(), os = out.storage();
        tape->record("sum", {tape->touch(x)}, out, [xs, os, n] {
            if (!xs->requires_grad) return;
            detail::ensure_grad(*xs);
            const Real g = (*os->grad)[0];
            for (std::int64_t i = 0; i < n; ++i) (*xs->grad)[i] += g;
        });
    }
    return out;
}

// Packs scalar tensors into one vector [N].
template <typename Real>
Tensor<Real> concat_scalars(std::vector<Tensor<Real>> parts, Tape<Real>* tape = nullptr) {
    if (parts.empty()) throw DimensionError("concat_scalars: nothing to concatenate");
    const int n = static_cast<int>(parts.size());
    Tensor<Real> out({n});
    bool any_grad = false;
    for (int i = 0; i < n; ++i) {
        if (parts[static_cast<std::size_t>(i)].numel() != 1)
            throw DimensionError("concat_scalars: element " + std::to_string(i) + " is not scalar");
        out.at(i) = parts[static_cast<std::size_t>(i)].at(0);
        any_grad = any_grad || parts[static_cast<std::size_t>(i)].requires_grad();
    }
    check_finite(out, "concat_scalars");
    if (tape && any_grad) {
        std::vector<std::int64_t> ids;
        std::vector<std::shared_ptr<TensorStorage<Real>>> ss;
        ids.reserve(static_cast<std::size_t>(n));
        ss.reserve(static_cast<std::size_t>(n));
        for (auto& p : parts) {
            ids.push_back(tape->touch(p));
            ss.push_back(p.storage());
        }
        auto os = out.storage();
        tape->record("concat_scalars", std::move(ids), out, [ss, os] {
            for (std::size_t i = 0; i < ss.size(); ++i) {
                if (!ss[i]->requires_grad) continue;
                detail::ensure_grad(*ss[i]);
                (*ss[i]->grad)[0] += (*os->grad)[i];
            }
        });
    }
    return out;
}

}  // namespace gtrans
