#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "gtrans/ops.hpp"
#include "gtrans/transformer.hpp"

namespace gtrans {

// Partition of L stacked layers into ceil(L/T) contiguous groups. Boundaries
// are 1-based layer indices: boundary i = min(i*T, L), the last layer of
// group i. The final group may hold fewer than T layers.
struct GroupScheme {
    int total_layers = 0;
    int group_size = 0;
    std::vector<int> boundaries;

    int groups() const { return static_cast<int>(boundaries.size()); }

    // first 1-based layer of group k (1-based)
    int group_lo(int k) const { return (k - 1) * group_size + 1; }
    // last 1-based layer of group k
    int group_hi(int k) const { return boundaries[static_cast<std::size_t>(k - 1)]; }
};

inline GroupScheme group_boundaries(int layers, int group_size) {
    if (layers < 1 || group_size < 1)
        throw ValueError("group_boundaries: need layers >= 1 and group size >= 1, got L=" +
                         std::to_string(layers) + " T=" + std::to_string(group_size));
    GroupScheme s;
    s.total_layers = layers;
    s.group_size = group_size;
    for (int b = group_size;; b += group_size) {
        s.boundaries.push_back(std::min(b, layers));
        if (s.boundaries.back() == layers) break;
    }
    return s;
}

// Trainable fusion state: one scalar per encoder group, one per decoder
// layer, one per decoder group, plus the LN wrapping the encoder fusion.
template <typename Real>
struct FusionParams {
    Tensor<Real> enc_weights;       // [M]
    Tensor<Real> dec_rep_weights;   // [L_d]
    Tensor<Real> dec_prob_weights;  // [N]
    LayerNormParams<Real> ln;
    Real tau = 1;
};

// Sparse fusion of encoder layer states: reads only the last layer of each
// group, sigmoid-gates each, averages over the groups read, then applies the
// fusion LN. use_groups < M restricts to the bottom groups (pruned decode).
template <typename Real>
Tensor<Real> encoder_group_fuse(const std::vector<Tensor<Real>>& layers,
                                const FusionParams<Real>& params, const GroupScheme& scheme,
                                Real eps, Tape<Real>* tape = nullptr, int use_groups = -1) {
    const int m = use_groups < 0 ? scheme.groups() : use_groups;
    if (m < 1 || m > scheme.groups())
        throw ValueError("encoder fusion: cannot keep " + std::to_string(m) + " of " +
                         std::to_string(scheme.groups()) + " groups");
    // a pruned encoder passes only its bottom layers; they must still cover
    // every boundary that participates
    const int need = use_groups < 0 ? scheme.total_layers
                                    : scheme.boundaries[static_cast<std::size_t>(m - 1)];
    if (static_cast<int>(layers.size()) < need ||
        (use_groups < 0 && static_cast<int>(layers.size()) != scheme.total_layers))
        throw DimensionError("encoder fusion: got " + std::to_string(layers.size()) +
                             " layer states, need " + std::to_string(need));
    if (params.enc_weights.dim(0) != scheme.groups())
        throw DimensionError("encoder fusion: weight count mismatch");
    Tensor<Real> gates = sigmoid(params.enc_weights, tape);
    Tensor<Real> acc;
    for (int i = 0; i < m; ++i) {
        Tensor<Real> term =
            scale_by(layers[static_cast<std::size_t>(scheme.boundaries[static_cast<std::size_t>(i)] - 1)],
                     gates, i, tape);
        acc = i == 0 ? term : add(acc, term, tape);
    }
    acc = scale(acc, Real(1) / static_cast<Real>(m), tape);
    return layer_norm(acc, params.ln.gamma, params.ln.beta, eps, tape);
}

// Representation fusion inside each decoder group: sigmoid-weighted sum of
// the group's layer states. No averaging and no LN here.
template <typename Real>
std::vector<Tensor<Real>> decoder_group_fuse(const std::vector<Tensor<Real>>& layers,
                                             const FusionParams<Real>& params,
                                             const GroupScheme& scheme, Tape<Real>* tape = nullptr) {
    if (static_cast<int>(layers.size()) != scheme.total_layers)
        throw DimensionError("decoder fusion: got " + std::to_string(layers.size()) +
                             " layer states for a " + std::to_string(scheme.total_layers) +
                             "-layer scheme");
    if (params.dec_rep_weights.dim(0) != scheme.total_layers)
        throw DimensionError("decoder fusion: weight count mismatch");
    Tensor<Real> gates = sigmoid(params.dec_rep_weights, tape);
    std::vector<Tensor<Real>> fused;
    fused.reserve(static_cast<std::size_t>(scheme.groups()));
    for (int k = 1; k <= scheme.groups(); ++k) {
        Tensor<Real> acc;
        for (int i = scheme.group_lo(k); i <= scheme.group_hi(k); ++i) {
            Tensor<Real> term = scale_by(layers[static_cast<std::size_t>(i - 1)], gates, i - 1, tape);
            acc = i == scheme.group_lo(k) ? term : add(acc, term, tape);
        }
        fused.push_back(acc);
    }
    return fused;
}

// Temperature-softmax normalization of the probability-fusion scalars.
template <typename Real>
Tensor<Real> fusion_prob_weights(Tensor<Real> weights, Real tau, Tape<Real>* tape = nullptr) {
    if (weights.rank() != 1) throw DimensionError("fusion weights must be a vector");
    return softmax_t(weights.reshaped({1, weights.dim(0)}), tau, tape).reshaped({weights.dim(0)});
}

// psi restricted to groups [lo, hi] (1-based, inclusive): softmax over the
// surviving scalars only. Plain values; used at pruned inference.
template <typename Real>
std::vector<Real> fusion_prob_weights_range(const Tensor<Real>& weights, Real tau, int lo, int hi) {
    if (lo < 1 || hi > weights.dim(0) || lo > hi)
        throw ValueError("group range " + std::to_string(lo) + ":" + std::to_string(hi) +
                         " invalid for " + std::to_string(weights.dim(0)) + " groups");
    if (tau <= Real(0)) throw ValueError("softmax temperature must be positive");
    std::vector<Real> psi(static_cast<std::size_t>(hi - lo + 1));
    Real mx = weights.at(lo - 1);
    for (int i = lo; i <= hi; ++i) mx = std::max(mx, weights.at(i - 1));
    Real z = 0;
    for (int i = lo; i <= hi; ++i) {
        psi[static_cast<std::size_t>(i - lo)] = std::exp((weights.at(i - 1) - mx) / tau);
        z += psi[static_cast<std::size_t>(i - lo)];
    }
    for (Real& p : psi) p /= z;
    return psi;
}

// Convex combination of per-group distributions: sum_i psi_i * P_i. Inputs
// must already be normalized; rows off by more than 1e-5 are a contract
// violation, as is a non-normalized psi.
template <typename Real>
Tensor<Real> probability_fuse(const std::vector<Tensor<Real>>& group_probs,
                              const std::vector<Real>& psi) {
    if (group_probs.empty() || group_probs.size() != psi.size())
        throw DimensionError("probability fusion: " + std::to_string(group_probs.size()) +
                             " distributions vs " + std::to_string(psi.size()) + " weights");
    Real psi_sum = 0;
    for (Real p : psi) psi_sum += p;
    if (std::abs(psi_sum - Real(1)) > Real(1e-5))
        throw ValueError("probability fusion: psi sums to " + std::to_string(psi_sum));
    const Shape& shape = group_probs[0].shape();
    const std::int64_t v = shape[shape.size() - 1];
    for (const auto& p : group_probs) {
        if (p.shape() != shape) throw DimensionError("probability fusion: shape mismatch");
        const std::int64_t rows = p.numel() / v;
        for (std::int64_t r = 0; r < rows; ++r) {
            Real s = 0;
            for (std::int64_t j = 0; j < v; ++j) s += p.at(r * v + j);
            if (std::abs(s - Real(1)) > Real(1e-5))
                throw ValueError("probability fusion: input row sums to " + std::to_string(s));
        }
    }
    Tensor<Real> out(shape);
    for (std::size_t i = 0; i < group_probs.size(); ++i)
        for (std::int64_t j = 0; j < out.numel(); ++j)
            out.at(j) += psi[i] * group_probs[i].at(j);
    check_finite(out, "probability_fuse");
    return out;
}

}  // namespace gtrans
