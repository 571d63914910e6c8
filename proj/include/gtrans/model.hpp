#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "gtrans/fusion.hpp"
#include "gtrans/ops.hpp"
#include "gtrans/rng.hpp"
#include "gtrans/tensor.hpp"
#include "gtrans/token.hpp"
#include "gtrans/transformer.hpp"

namespace gtrans {

struct ModelConfig {
    int enc_layers = 6;
    int dec_layers = 6;
    int enc_group_size = 3;  // encoder layers per group
    int dec_group_size = 2;  // decoder layers per group
    int model_dim = 512;
    int ffn_dim = 1024;
    int heads = 8;
    double dropout = 0.3;
    NormStyle norm_style = NormStyle::post;
    int src_vocab = 0;
    int tgt_vocab = 0;
    bool tie_embeddings = true;
    bool fusion = true;  // off = vanilla transformer baseline
    double tau_override = 0;  // 0 = sqrt(model_dim)
    int max_len = 128;
    double ln_eps = 1e-5;

    double tau() const { return tau_override > 0 ? tau_override : std::sqrt(model_dim); }
};

inline std::vector<std::string> config_violations(const ModelConfig& c) {
    std::vector<std::string> v;
    auto bad = [&](const std::string& s) { v.push_back(s); };
    if (c.enc_layers < 1) bad("enc_layers must be >= 1");
    if (c.dec_layers < 1) bad("dec_layers must be >= 1");
    if (c.enc_group_size < 1) bad("enc_group_size must be >= 1");
    if (c.dec_group_size < 1) bad("dec_group_size must be >= 1");
    if (c.model_dim < 1) bad("model_dim must be >= 1");
    if (c.ffn_dim < 1) bad("ffn_dim must be >= 1");
    if (c.heads < 1 || (c.model_dim >= 1 && c.model_dim % c.heads != 0))
        bad("heads must be >= 1 and divide model_dim");
    if (c.dropout < 0 || c.dropout >= 1) bad("dropout must be in [0,1)");
    if (c.src_vocab < 5) bad("src_vocab must be >= 5");
    if (c.tgt_vocab < 5) bad("tgt_vocab must be >= 5");
    if (c.tau_override < 0) bad("tau_override must be >= 0");
    if (c.max_len < 2) bad("max_len must be >= 2");
    if (c.ln_eps <= 0) bad("ln_eps must be positive");
    return v;
}

template <typename Real>
struct NamedParam {
    std::string name;
    Tensor<Real> tensor;
    int enc_layer = 0;  // 1-based owning layer, 0 = outside the encoder stack
    int dec_layer = 0;
};

template <typename Real>
struct Model {
    ModelConfig cfg;
    GroupScheme enc_scheme;
    GroupScheme dec_scheme;
    Tensor<Real> src_embed;  // [Vs x D]
    Tensor<Real> tgt_embed;  // [Vt x D]; same storage as src_embed when shared
    Tensor<Real> out_proj;   // [Vt x D]; same storage as tgt_embed when tied
    Tensor<Real> pos_table;  // constant [max_len x D]
    std::vector<EncoderLayerParams<Real>> enc;
    std::vector<DecoderLayerParams<Real>> dec;
    FusionParams<Real> fuse;  // tensors undefined when cfg.fusion == false

    // Canonical parameter walk. Tied tensors appear once, under the first
    // name that reaches them.
    std::vector<NamedParam<Real>> parameters() const {
        std::vector<NamedParam<Real>> out;
        std::set<const void*> seen;
        auto push = [&](std::string name, const Tensor<Real>& t, int el, int dl) {
            if (!seen.insert(t.data()).second) return;
            out.push_back(NamedParam<Real>{std::move(name), t, el, dl});
        };
        push("src_embed", src_embed, 0, 0);
        push("tgt_embed", tgt_embed, 0, 0);
        push("out_proj", out_proj, 0, 0);
        auto push_linear = [&](const std::string& base, const LinearParams<Real>& p, int el, int dl) {
            push(base + ".w", p.w, el, dl);
            push(base + ".b", p.b, el, dl);
        };
        auto push_attn = [&](const std::string& base, const AttentionParams<Real>& p, int el, int dl) {
            push_linear(base + ".q", p.q, el, dl);
            push_linear(base + ".k", p.k, el, dl);
            push_linear(base + ".v", p.v, el, dl);
            push_linear(base + ".o", p.o, el, dl);
        };
        auto push_ln = [&](const std::string& base, const LayerNormParams<Real>& p, int el, int dl) {
            push(base + ".gamma", p.gamma, el, dl);
            push(base + ".beta", p.beta, el, dl);
        };
        for (int l = 1; l <= cfg.enc_layers; ++l) {
            const auto& p = enc[static_cast<std::size_t>(l - 1)];
            const std::string base = "enc." + std::to_string(l);
            push_attn(base + ".attn", p.self_attn, l, 0);
            push_linear(base + ".ffn.in", p.ffn.in, l, 0);
            push_linear(base + ".ffn.out", p.ffn.out, l, 0);
            push_ln(base + ".ln1", p.ln1, l, 0);
            push_ln(base + ".ln2", p.ln2, l, 0);
        }
        for (int l = 1; l <= cfg.dec_layers; ++l) {
            const auto& p = dec[static_cast<std::size_t>(l - 1)];
            const std::string base = "dec." + std::to_string(l);
            push_attn(base + ".self", p.self_attn, 0, l);
            push_attn(base + ".cross", p.cross_attn, 0, l);
            push_linear(base + ".ffn.in", p.ffn.in, 0, l);
            push_linear(base + ".ffn.out", p.ffn.out, 0, l);
            push_ln(base + ".ln1", p.ln1, 0, l);
            push_ln(base + ".ln2", p.ln2, 0, l);
            push_ln(base + ".ln3", p.ln3, 0, l);
        }
        if (cfg.fusion) {
            push("fuse.enc_w", fuse.enc_weights, 0, 0);
            push("fuse.dec_rep_w", fuse.dec_rep_weights, 0, 0);
            push("fuse.dec_prob_w", fuse.dec_prob_weights, 0, 0);
            push_ln("fuse.ln", fuse.ln, 0, 0);
        }
        return out;
    }

    std::int64_t parameter_count() const {
        std::int64_t n = 0;
        for (const auto& p : parameters()) n += p.tensor.numel();
        return n;
    }

    void zero_grads() const {
        for (auto& p : parameters()) {
            Tensor<Real> t = p.tensor;
            t.zero_grad();
        }
    }
};

template <typename Real>
Model<Real> build_model(const ModelConfig& cfg, std::uint64_t seed) {
    const std::vector<std::string> bad = config_violations(cfg);
    if (!bad.empty()) {
        std::string msg = "invalid model config:";
        for (const auto& b : bad) msg += "\n  - " + b;
        throw ValueError(msg);
    }
    Model<Real> m;
    m.cfg = cfg;
    m.enc_scheme = group_boundaries(cfg.enc_layers, cfg.enc_group_size);
    m.dec_scheme = group_boundaries(cfg.dec_layers, cfg.dec_group_size);

    Rng root(seed);
    auto stream = [&](const std::string& name) { return root.split(hash_name(name.c_str())); };
    const int d = cfg.model_dim;
    auto make_embed = [&](const std::string& name, int vocab) {
        Tensor<Real> e({vocab, d});
        // std 1/sqrt(D) so the sqrt(D)-scaled embedding has unit-scale entries
        const double bound = std::sqrt(3.0 / d);
        Rng rng = stream(name);
        for (std::int64_t i = 0; i < e.numel(); ++i)
            e.at(i) = static_cast<Real>(rng.next_symmetric(bound));
        return e;
    };
    auto make_linear = [&](const std::string& name, int fan_in, int fan_out) {
        LinearParams<Real> p{Tensor<Real>({fan_in, fan_out}), Tensor<Real>({fan_out}, Real(0))};
        xavier_fill(p.w, fan_in, fan_out, stream(name + ".w"));
        return p;
    };
    auto make_ln = [&](int dim) {
        return LayerNormParams<Real>{Tensor<Real>({dim}, Real(1)), Tensor<Real>({dim}, Real(0))};
    };
    auto make_attn = [&](const std::string& base) {
        return AttentionParams<Real>{make_linear(base + ".q", d, d), make_linear(base + ".k", d, d),
                                     make_linear(base + ".v", d, d), make_linear(base + ".o", d, d)};
    };

    m.src_embed = make_embed("src_embed", cfg.src_vocab);
    const bool share_embed = cfg.src_vocab == cfg.tgt_vocab;
    m.tgt_embed = share_embed ? m.src_embed : make_embed("tgt_embed", cfg.tgt_vocab);
    m.out_proj = cfg.tie_embeddings ? m.tgt_embed : make_embed("out_proj", cfg.tgt_vocab);
    m.pos_table = sinusoidal_table<Real>(cfg.max_len, d);

    for (int l = 1; l <= cfg.enc_layers; ++l) {
        const std::string base = "enc." + std::to_string(l);
        m.enc.push_back(EncoderLayerParams<Real>{
            make_attn(base + ".attn"),
            FfnParams<Real>{make_linear(base + ".ffn.in", d, cfg.ffn_dim),
                            make_linear(base + ".ffn.out", cfg.ffn_dim, d)},
            make_ln(d), make_ln(d)});
    }
    for (int l = 1; l <= cfg.dec_layers; ++l) {
        const std::string base = "dec." + std::to_string(l);
        m.dec.push_back(DecoderLayerParams<Real>{
            make_attn(base + ".self"), make_attn(base + ".cross"),
            FfnParams<Real>{make_linear(base + ".ffn.in", d, cfg.ffn_dim),
                            make_linear(base + ".ffn.out", cfg.ffn_dim, d)},
            make_ln(d), make_ln(d), make_ln(d)});
    }
    if (cfg.fusion) {
        // zero weights start every gate at 0.5 and psi uniform
        m.fuse.enc_weights = Tensor<Real>({m.enc_scheme.groups()}, Real(0));
        m.fuse.dec_rep_weights = Tensor<Real>({cfg.dec_layers}, Real(0));
        m.fuse.dec_prob_weights = Tensor<Real>({m.dec_scheme.groups()}, Real(0));
        m.fuse.ln = make_ln(d);
        m.fuse.tau = static_cast<Real>(cfg.tau());
    }
    for (auto& p : m.parameters()) {
        Tensor<Real> t = p.tensor;
        t.set_requires_grad();
    }
    return m;
}

template <typename Real>
struct EncoderOutput {
    std::vector<Tensor<Real>> layer_states;  // one per executed encoder layer
    Tensor<Real> fused;                      // [B x S x D], what the decoder reads
    TokenMatrix src;                         // kept for cross-attention masks
};

template <typename Real>
struct GroupPrediction {
    std::vector<Tensor<Real>> fused_states;     // [B x T x D] per active group
    std::vector<Tensor<Real>> group_log_probs;  // [B x T x V] per active group
    Tensor<Real> psi;                           // [N_active], on tape when training
    std::vector<Real> psi_values;
    Tensor<Real> fused_probs;  // [B x T x V], detached convex combination
};

namespace detail {

// embed ids, scale by sqrt(D), add positions
template <typename Real>
Tensor<Real> embed_sequence(const Tensor<Real>& table, const TokenMatrix& ids,
                            const Tensor<Real>& pos, int d, RunCtx<Real>& ctx) {
    Tensor<Real> x = embedding(table, ids, ctx.tape);
    x = scale(x, static_cast<Real>(std::sqrt(static_cast<double>(d))), ctx.tape);
    return add_positional(x, pos, ctx.tape);
}

}  // namespace detail

// Runs the bottom `keep_layers` encoder layers (all when -1) and fuses the
// group boundaries they cover.
template <typename Real>
EncoderOutput<Real> encode(const Model<Real>& m, const TokenMatrix& src, RunCtx<Real>& ctx,
                           int keep_layers = -1) {
    if (src.cols > m.cfg.max_len)
        throw ValueError("source length " + std::to_string(src.cols) + " exceeds max_len " +
                         std::to_string(m.cfg.max_len));
    const int keep = keep_layers < 0 ? m.cfg.enc_layers : keep_layers;
    if (keep < 1 || keep > m.cfg.enc_layers)
        throw ValueError("cannot run " + std::to_string(keep) + " of " +
                         std::to_string(m.cfg.enc_layers) + " encoder layers");
    EncoderOutput<Real> out;
    out.src = src;
    const ByteMask mask = padding_attention_mask(src, kPadId);
    Tensor<Real> x = detail::embed_sequence(m.src_embed, src, m.pos_table, m.cfg.model_dim, ctx);
    const Real eps = static_cast<Real>(m.cfg.ln_eps);
    for (int l = 0; l < keep; ++l) {
        x = encoder_layer_forward(x, m.enc[static_cast<std::size_t>(l)], m.cfg.heads, mask,
                                  m.cfg.norm_style, eps, ctx);
        out.layer_states.push_back(x);
    }
    if (!m.cfg.fusion) {
        out.fused = out.layer_states.back();
        return out;
    }
    const int use_groups = keep == m.cfg.enc_layers ? -1 : keep / m.enc_scheme.group_size;
    out.fused = encoder_group_fuse(out.layer_states, m.fuse, m.enc_scheme, eps, ctx.tape, use_groups);
    return out;
}

// Decoder forward over groups [group_lo, group_hi] (1-based; -1 = all).
// Runs only the decoder layers those groups need, fuses each group's states,
// projects every fused state through the shared output rows, and combines
// the per-group distributions with psi.
template <typename Real>
GroupPrediction<Real> decode(const Model<Real>& m, const TokenMatrix& tgt_in,
                             const EncoderOutput<Real>& enc_out, RunCtx<Real>& ctx,
                             int group_lo = 1, int group_hi = -1) {
    if (tgt_in.cols > m.cfg.max_len)
        throw ValueError("target length " + std::to_string(tgt_in.cols) + " exceeds max_len " +
                         std::to_string(m.cfg.max_len));
    const int n_groups = m.cfg.fusion ? m.dec_scheme.groups() : 1;
    const int hi = group_hi < 0 ? n_groups : group_hi;
    if (group_lo < 1 || hi < group_lo || hi > n_groups)
        throw ValueError("decoder group range " + std::to_string(group_lo) + ":" +
                         std::to_string(hi) + " invalid for " + std::to_string(n_groups) +
                         " groups");
    const int b = tgt_in.rows, t = tgt_in.cols, d = m.cfg.model_dim, v = m.cfg.tgt_vocab;
    const Real eps = static_cast<Real>(m.cfg.ln_eps);
    const ByteMask self_mask = causal_attention_mask(tgt_in, kPadId);
    const ByteMask cross_mask = cross_attention_mask(t, enc_out.src, kPadId);

    Tensor<Real> y = detail::embed_sequence(m.tgt_embed, tgt_in, m.pos_table, d, ctx);
    const int run_layers = m.cfg.fusion ? m.dec_scheme.group_hi(hi) : m.cfg.dec_layers;
    std::vector<Tensor<Real>> states;
    for (int l = 0; l < run_layers; ++l) {
        y = decoder_layer_forward(y, enc_out.fused, m.dec[static_cast<std::size_t>(l)], m.cfg.heads,
                                  self_mask, cross_mask, m.cfg.norm_style, eps, ctx);
        states.push_back(y);
    }

    GroupPrediction<Real> pred;
    if (m.cfg.fusion) {
        Tensor<Real> gates = sigmoid(m.fuse.dec_rep_weights, ctx.tape);
        for (int k = group_lo; k <= hi; ++k) {
            Tensor<Real> acc;
            for (int i = m.dec_scheme.group_lo(k); i <= m.dec_scheme.group_hi(k); ++i) {
                Tensor<Real> term =
                    scale_by(states[static_cast<std::size_t>(i - 1)], gates, i - 1, ctx.tape);
                acc = i == m.dec_scheme.group_lo(k) ? term : add(acc, term, ctx.tape);
            }
            pred.fused_states.push_back(acc);
        }
        if (group_lo == 1 && hi == n_groups) {
            pred.psi = fusion_prob_weights(m.fuse.dec_prob_weights, m.fuse.tau, ctx.tape);
            for (int i = 0; i < n_groups; ++i) pred.psi_values.push_back(pred.psi.at(i));
        } else {
            pred.psi_values =
                fusion_prob_weights_range(m.fuse.dec_prob_weights, m.fuse.tau, group_lo, hi);
            pred.psi = Tensor<Real>({hi - group_lo + 1}, pred.psi_values);
        }
    } else {
        pred.fused_states.push_back(states.back());
        pred.psi = Tensor<Real>({1}, Real(1));
        pred.psi_values = {Real(1)};
    }

    for (Tensor<Real>& h : pred.fused_states) {
        Tensor<Real> logits = matmul_nt(h.reshaped({b * t, d}), m.out_proj, ctx.tape);
        pred.group_log_probs.push_back(log_softmax(logits, ctx.tape).reshaped({b, t, v}));
    }

    // inference-side fused distribution; metrics only, so kept off the tape
    std::vector<Tensor<Real>> probs;
    for (const Tensor<Real>& lp : pred.group_log_probs) {
        Tensor<Real> p(lp.shape());
        for (std::int64_t i = 0; i < p.numel(); ++i) p.at(i) = std::exp(lp.at(i));
        probs.push_back(p);
    }
    pred.fused_probs = probability_fuse(probs, pred.psi_values);
    return pred;
}

// Single-sentence fronts for the batched passes.
template <typename Real>
EncoderOutput<Real> encode(const Model<Real>& m, const std::vector<TokenId>& src_ids,
                           RunCtx<Real>& ctx, int keep_layers = -1) {
    if (src_ids.empty()) throw ValueError("cannot encode an empty sentence");
    TokenMatrix src(1, static_cast<int>(src_ids.size()));
    src.v = src_ids;
    return encode(m, src, ctx, keep_layers);
}

template <typename Real>
GroupPrediction<Real> decode(const Model<Real>& m, const std::vector<TokenId>& tgt_prefix,
                             const EncoderOutput<Real>& enc_out, RunCtx<Real>& ctx,
                             int group_lo = 1, int group_hi = -1) {
    if (tgt_prefix.empty()) throw ValueError("cannot decode from an empty prefix");
    TokenMatrix tgt(1, static_cast<int>(tgt_prefix.size()));
    tgt.v = tgt_prefix;
    return decode(m, tgt, enc_out, ctx, group_lo, group_hi);
}

// psi-weighted sum of per-group smoothed cross entropies, each a mean over
// non-pad target positions.
template <typename Real>
Tensor<Real> multi_level_loss(const GroupPrediction<Real>& pred, const TokenMatrix& tgt_out,
                              TokenId pad_id, Real smoothing, Tape<Real>* tape) {
    if (pred.group_log_probs.empty()) throw DimensionError("prediction holds no groups");
    const int b = pred.group_log_probs[0].dim(0), t = pred.group_log_probs[0].dim(1),
              v = pred.group_log_probs[0].dim(2);
    if (tgt_out.rows != b || tgt_out.cols != t)
        throw DimensionError("target matrix does not match prediction shape");
    std::vector<Tensor<Real>> ces;
    for (const Tensor<Real>& lp : pred.group_log_probs)
        ces.push_back(smoothed_nll(lp.reshaped({b * t, v}), tgt_out.v, pad_id, smoothing, tape));
    Tensor<Real> ce_vec = concat_scalars(ces, tape);
    return sum(mul(pred.psi, ce_vec, tape), tape);
}

}  // namespace gtrans
