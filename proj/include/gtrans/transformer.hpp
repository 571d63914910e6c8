#pragma once

#include <cmath>
#include <functional>
#include <utility>

#include "gtrans/ops.hpp"

namespace gtrans {

enum class NormStyle { post, pre };

inline const char* norm_style_name(NormStyle s) { return s == NormStyle::post ? "post" : "pre"; }

// Shared knobs every forward pass threads through: the active tape (null in
// eval), the dropout source, and whether dropout is live.
template <typename Real>
struct RunCtx {
    Tape<Real>* tape = nullptr;
    Rng* rng = nullptr;
    Real dropout = 0;
    bool train = false;
};

template <typename Real>
Tensor<Real> maybe_drop(Tensor<Real> x, RunCtx<Real>& ctx) {
    if (!ctx.train || ctx.dropout <= Real(0)) return x;
    return dropout(x, ctx.dropout, *ctx.rng, ctx.tape);
}

template <typename Real>
struct LinearParams {
    Tensor<Real> w;  // [in x out]
    Tensor<Real> b;  // [out]
};

template <typename Real>
struct LayerNormParams {
    Tensor<Real> gamma;
    Tensor<Real> beta;
};

template <typename Real>
struct AttentionParams {
    LinearParams<Real> q, k, v, o;
};

template <typename Real>
struct FfnParams {
    LinearParams<Real> in, out;
};

template <typename Real>
struct EncoderLayerParams {
    AttentionParams<Real> self_attn;
    FfnParams<Real> ffn;
    LayerNormParams<Real> ln1, ln2;
};

template <typename Real>
struct DecoderLayerParams {
    AttentionParams<Real> self_attn;
    AttentionParams<Real> cross_attn;
    FfnParams<Real> ffn;
    LayerNormParams<Real> ln1, ln2, ln3;
};

// x: [B x T x Din] -> [B x T x Dout] through a row-flattened product.
template <typename Real>
Tensor<Real> linear(Tensor<Real> x, const LinearParams<Real>& p, Tape<Real>* tape) {
    if (x.rank() != 3) throw DimensionError("linear expects [B,T,D] input, got " + shape_str(x.shape()));
    const int b = x.dim(0), t = x.dim(1), din = x.dim(2), dout = p.w.dim(1);
    Tensor<Real> flat = x.reshaped({b * t, din});
    Tensor<Real> y = add_bias(matmul(flat, p.w, tape), p.b, tape);
    return y.reshaped({b, t, dout});
}

// [B x T x D] -> [B x H x T x D/H]
template <typename Real>
Tensor<Real> split_heads(Tensor<Real> x, int heads, Tape<Real>* tape) {
    const int b = x.dim(0), t = x.dim(1), d = x.dim(2);
    return permute(x.reshaped({b, t, heads, d / heads}), {0, 2, 1, 3}, tape);
}

// [B x H x T x D/H] -> [B x T x D]
template <typename Real>
Tensor<Real> merge_heads(Tensor<Real> x, Tape<Real>* tape) {
    const int b = x.dim(0), h = x.dim(1), t = x.dim(2), dh = x.dim(3);
    return permute(x, {0, 2, 1, 3}, tape).reshaped({b, t, h * dh});
}

// Scaled dot-product attention. Batched form: q [B x Tq x D], k and v
// [B x Tk x D], mask [B x Tq x Tk] shared by all heads. Rank-2 inputs are
// treated as a single sentence with a [Tq x Tk] mask.
template <typename Real>
Tensor<Real> multi_head_attention(Tensor<Real> q, Tensor<Real> k, Tensor<Real> v,
                                  const AttentionParams<Real>& p, int heads, const ByteMask& mask,
                                  RunCtx<Real>& ctx) {
    if (q.rank() == 2) {
        if (k.rank() != 2 || v.rank() != 2 || mask.shape != Shape{q.dim(0), k.dim(0)})
            throw DimensionError("single-sentence attention needs [T x D] inputs and a [Tq x Tk] mask");
        ByteMask m({1, q.dim(0), k.dim(0)});
        m.v = mask.v;
        Tensor<Real> out = multi_head_attention(q.reshaped({1, q.dim(0), q.dim(1)}),
                                                k.reshaped({1, k.dim(0), k.dim(1)}),
                                                v.reshaped({1, v.dim(0), v.dim(1)}), p, heads, m, ctx);
        return out.reshaped({out.dim(1), out.dim(2)});
    }
    const int d = q.dim(2);
    if (heads < 1 || d % heads != 0)
        throw DimensionError("head count " + std::to_string(heads) + " must divide model dim " +
                             std::to_string(d));
    const Real inv_scale = Real(1) / std::sqrt(static_cast<Real>(d / heads));
    Tensor<Real> qh = split_heads(linear(q, p.q, ctx.tape), heads, ctx.tape);
    Tensor<Real> kh = split_heads(linear(k, p.k, ctx.tape), heads, ctx.tape);
    Tensor<Real> vh = split_heads(linear(v, p.v, ctx.tape), heads, ctx.tape);
    Tensor<Real> scores = scale(bmm_nt(qh, kh, ctx.tape), inv_scale, ctx.tape);
    Tensor<Real> weights = maybe_drop(masked_softmax(scores, mask, ctx.tape), ctx);
    Tensor<Real> mixed = merge_heads(bmm(weights, vh, ctx.tape), ctx.tape);
    return linear(mixed, p.o, ctx.tape);
}

template <typename Real>
Tensor<Real> ffn_forward(Tensor<Real> x, const FfnParams<Real>& p, RunCtx<Real>& ctx) {
    Tensor<Real> hidden = maybe_drop(relu(linear(x, p.in, ctx.tape), ctx.tape), ctx);
    return linear(hidden, p.out, ctx.tape);
}

// post: LN(x + sublayer(x)); pre: x + sublayer(LN(x)). The sublayer output
// is dropped out before joining the residual stream.
template <typename Real>
Tensor<Real> residual_apply(NormStyle style, Tensor<Real> x,
                            const std::function<Tensor<Real>(Tensor<Real>)>& sublayer,
                            const LayerNormParams<Real>& ln, Real eps, RunCtx<Real>& ctx) {
    if (style == NormStyle::post) {
        Tensor<Real> s = maybe_drop(sublayer(x), ctx);
        return layer_norm(add(x, s, ctx.tape), ln.gamma, ln.beta, eps, ctx.tape);
    }
    Tensor<Real> s = maybe_drop(sublayer(layer_norm(x, ln.gamma, ln.beta, eps, ctx.tape)), ctx);
    return add(x, s, ctx.tape);
}

template <typename Real>
Tensor<Real> encoder_layer_forward(Tensor<Real> x, const EncoderLayerParams<Real>& p, int heads,
                                   const ByteMask& self_mask, NormStyle style, Real eps,
                                   RunCtx<Real>& ctx) {
    x = residual_apply<Real>(
        style, x,
        [&](Tensor<Real> in) {
            return multi_head_attention(in, in, in, p.self_attn, heads, self_mask, ctx);
        },
        p.ln1, eps, ctx);
    return residual_apply<Real>(
        style, x, [&](Tensor<Real> in) { return ffn_forward(in, p.ffn, ctx); }, p.ln2, eps, ctx);
}

// y: [B x Tt x D] target states; memory: [B x Ts x D] fused encoder states.
template <typename Real>
Tensor<Real> decoder_layer_forward(Tensor<Real> y, Tensor<Real> memory,
                                   const DecoderLayerParams<Real>& p, int heads,
                                   const ByteMask& self_mask, const ByteMask& cross_mask,
                                   NormStyle style, Real eps, RunCtx<Real>& ctx) {
    y = residual_apply<Real>(
        style, y,
        [&](Tensor<Real> in) {
            return multi_head_attention(in, in, in, p.self_attn, heads, self_mask, ctx);
        },
        p.ln1, eps, ctx);
    y = residual_apply<Real>(
        style, y,
        [&](Tensor<Real> in) {
            return multi_head_attention(in, memory, memory, p.cross_attn, heads, cross_mask, ctx);
        },
        p.ln2, eps, ctx);
    return residual_apply<Real>(
        style, y, [&](Tensor<Real> in) { return ffn_forward(in, p.ffn, ctx); }, p.ln3, eps, ctx);
}

// ---------------------------------------------------------------------------
// masks
// ---------------------------------------------------------------------------

// Every query may read every non-pad key position.
inline ByteMask padding_attention_mask(const TokenMatrix& keys, TokenId pad) {
    ByteMask m({keys.rows, keys.cols, keys.cols}, 0);
    for (int b = 0; b < keys.rows; ++b)
        for (int q = 0; q < keys.cols; ++q)
            for (int k = 0; k < keys.cols; ++k)
                if (keys.at(b, k) != pad)
                    m.v[(static_cast<std::size_t>(b) * keys.cols + q) * keys.cols + k] = 1;
    return m;
}

// Lower-triangular and pad-blocking.
inline ByteMask causal_attention_mask(const TokenMatrix& keys, TokenId pad) {
    ByteMask m({keys.rows, keys.cols, keys.cols}, 0);
    for (int b = 0; b < keys.rows; ++b)
        for (int q = 0; q < keys.cols; ++q)
            for (int k = 0; k <= q; ++k)
                if (keys.at(b, k) != pad)
                    m.v[(static_cast<std::size_t>(b) * keys.cols + q) * keys.cols + k] = 1;
    return m;
}

// Decoder queries against encoder keys: block pad source columns.
inline ByteMask cross_attention_mask(int tgt_len, const TokenMatrix& src, TokenId pad) {
    ByteMask m({src.rows, tgt_len, src.cols}, 0);
    for (int b = 0; b < src.rows; ++b)
        for (int q = 0; q < tgt_len; ++q)
            for (int k = 0; k < src.cols; ++k)
                if (src.at(b, k) != pad)
                    m.v[(static_cast<std::size_t>(b) * tgt_len + q) * src.cols + k] = 1;
    return m;
}

// ---------------------------------------------------------------------------
// fixed tables and init
// ---------------------------------------------------------------------------

// Interleaved sin/cos table, [max_len x d].
template <typename Real>
Tensor<Real> sinusoidal_table(int max_len, int d) {
    Tensor<Real> pe({max_len, d});
    for (int p = 0; p < max_len; ++p)
        for (int i = 0; i < d; i += 2) {
            const double angle = p / std::pow(10000.0, static_cast<double>(i) / d);
            pe.at(p * d + i) = static_cast<Real>(std::sin(angle));
            if (i + 1 < d) pe.at(p * d + i + 1) = static_cast<Real>(std::cos(angle));
        }
    return pe;
}

// Xavier-uniform fill with bound sqrt(6 / (fan_in + fan_out)).
template <typename Real>
void xavier_fill(Tensor<Real>& w, int fan_in, int fan_out, Rng rng) {
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    for (std::int64_t i = 0; i < w.numel(); ++i)
        w.at(i) = static_cast<Real>(rng.next_symmetric(bound));
}

}  // namespace gtrans
