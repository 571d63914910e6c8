#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gtrans/model.hpp"
#include "gtrans/training.hpp"

namespace gtrans {

struct BleuReport {
    double score = 0;                    // 0..100
    double precisions[4] = {0, 0, 0, 0};  // as used in the geometric mean
    double brevity_penalty = 0;
    std::int64_t hyp_len = 0;
    std::int64_t ref_len = 0;
};

inline nlohmann::json to_json(const BleuReport& b) {
    return nlohmann::json{{"bleu", b.score},
                          {"precisions", {b.precisions[0], b.precisions[1], b.precisions[2],
                                          b.precisions[3]}},
                          {"brevity_penalty", b.brevity_penalty},
                          {"hyp_len", b.hyp_len},
                          {"ref_len", b.ref_len}};
}

namespace detail {

inline void count_ngrams(const std::vector<TokenId>& ids, int n,
                         std::map<std::vector<TokenId>, std::int64_t>& out) {
    if (static_cast<int>(ids.size()) < n) return;
    for (std::size_t i = 0; i + n <= ids.size(); ++i)
        ++out[std::vector<TokenId>(ids.begin() + i, ids.begin() + i + n)];
}

}  // namespace detail

// Corpus-level BLEU-4 with one reference per hypothesis. Modified n-gram
// counts are clipped per sentence and pooled; precisions for n >= 2 fall
// back to add-one only when the pooled match count is zero. The brevity
// penalty is e^{1 - r/c} once the hypotheses run short.
inline BleuReport bleu4(const std::vector<std::vector<TokenId>>& hyps,
                        const std::vector<std::vector<TokenId>>& refs) {
    if (hyps.empty()) throw ValueError("bleu4 needs a non-empty corpus");
    if (hyps.size() != refs.size())
        throw ValueError("bleu4 got " + std::to_string(hyps.size()) + " hypotheses but " +
                         std::to_string(refs.size()) + " references");

    BleuReport rep;
    std::int64_t matches[4] = {0, 0, 0, 0};
    std::int64_t totals[4] = {0, 0, 0, 0};
    for (std::size_t s = 0; s < hyps.size(); ++s) {
        rep.hyp_len += static_cast<std::int64_t>(hyps[s].size());
        rep.ref_len += static_cast<std::int64_t>(refs[s].size());
        for (int n = 1; n <= 4; ++n) {
            std::map<std::vector<TokenId>, std::int64_t> h, r;
            detail::count_ngrams(hyps[s], n, h);
            detail::count_ngrams(refs[s], n, r);
            for (const auto& [gram, c] : h) {
                totals[n - 1] += c;
                auto it = r.find(gram);
                if (it != r.end()) matches[n - 1] += std::min(c, it->second);
            }
        }
    }

    if (rep.hyp_len == 0) return rep;  // nothing generated: score 0 by convention
    rep.brevity_penalty =
        rep.hyp_len >= rep.ref_len
            ? 1.0
            : std::exp(1.0 - static_cast<double>(rep.ref_len) / static_cast<double>(rep.hyp_len));

    double log_sum = 0;
    for (int n = 0; n < 4; ++n) {
        std::int64_t m = matches[n], t = totals[n];
        if (n > 0 && m == 0) {
            ++m;
            ++t;
        }
        rep.precisions[n] = t > 0 ? static_cast<double>(m) / static_cast<double>(t) : 0.0;
        if (rep.precisions[n] == 0) return rep;  // unigram miss: score stays 0
        log_sum += 0.25 * std::log(rep.precisions[n]);
    }
    rep.score = 100.0 * rep.brevity_penalty * std::exp(log_sum);
    return rep;
}

struct GradientReport {
    std::int64_t step = 0;
    std::vector<double> enc_layer_norms;  // L2 over each encoder layer's parameters
    std::vector<double> dec_layer_norms;
    double other_norm = 0;  // embeddings, fusion scalars, anything outside the stacks
    double global_norm = 0;
};

namespace detail {

template <typename Real>
GradientReport norms_from_grads(const std::vector<NamedParam<Real>>& params, int enc_layers,
                                int dec_layers) {
    GradientReport rep;
    std::vector<double> enc(static_cast<std::size_t>(enc_layers), 0.0);
    std::vector<double> dec(static_cast<std::size_t>(dec_layers), 0.0);
    double other = 0, all = 0;
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        double sq = 0;
        for (Real g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
        all += sq;
        if (p.enc_layer > 0)
            enc[static_cast<std::size_t>(p.enc_layer - 1)] += sq;
        else if (p.dec_layer > 0)
            dec[static_cast<std::size_t>(p.dec_layer - 1)] += sq;
        else
            other += sq;
    }
    for (double& v : enc) v = std::sqrt(v);
    for (double& v : dec) v = std::sqrt(v);
    rep.enc_layer_norms = std::move(enc);
    rep.dec_layer_norms = std::move(dec);
    rep.other_norm = std::sqrt(other);
    rep.global_norm = std::sqrt(all);
    return rep;
}

}  // namespace detail

// One deterministic forward+backward of the multi-level loss on `batch`,
// reported as per-layer L2 gradient norms. Leaves the gradients zeroed.
template <typename Real>
GradientReport gradient_norm_report(Model<Real>& m, const Batch& batch, double smoothing = 0.0,
                                    std::int64_t step = 0) {
    m.zero_grads();
    Tape<Real> tape;
    RunCtx<Real> ctx{&tape};
    EncoderOutput<Real> enc = encode(m, batch.src, ctx);
    GroupPrediction<Real> pred = decode(m, batch.tgt_in, enc, ctx);
    Tensor<Real> loss = multi_level_loss(pred, batch.tgt_out, kPadId, static_cast<Real>(smoothing),
                                         &tape);
    tape.backward(loss);
    auto params = m.parameters();
    GradientReport rep = detail::norms_from_grads(params, m.cfg.enc_layers, m.cfg.dec_layers);
    rep.step = step;
    m.zero_grads();
    return rep;
}

struct WeightTrace {
    std::int64_t step = 0;
    std::vector<double> enc_sigma;  // gate per encoder group boundary
    std::vector<double> dec_sigma;  // gate per decoder layer
    std::vector<double> psi;
};

template <typename Real>
WeightTrace capture_weight_trace(const Model<Real>& m, std::int64_t step) {
    if (!m.cfg.fusion) throw ValueError("weight traces need the fusion parameters");
    WeightTrace tr;
    tr.step = step;
    for (std::int64_t i = 0; i < m.fuse.enc_weights.numel(); ++i)
        tr.enc_sigma.push_back(1.0 / (1.0 + std::exp(-static_cast<double>(m.fuse.enc_weights.at(i)))));
    for (std::int64_t i = 0; i < m.fuse.dec_rep_weights.numel(); ++i)
        tr.dec_sigma.push_back(
            1.0 / (1.0 + std::exp(-static_cast<double>(m.fuse.dec_rep_weights.at(i)))));
    tr.psi = detail::psi_snapshot(m);
    return tr;
}

// CSV of fusion-weight trajectories: step, then one column per weight.
inline std::string export_weight_trace(const std::vector<WeightTrace>& history) {
    if (history.empty()) throw ValueError("weight trace export needs at least one step");
    std::string out = "step";
    const WeightTrace& head = history.front();
    for (std::size_t i = 0; i < head.enc_sigma.size(); ++i)
        out += ",enc_sigma_" + std::to_string(i + 1);
    for (std::size_t i = 0; i < head.dec_sigma.size(); ++i)
        out += ",dec_sigma_" + std::to_string(i + 1);
    for (std::size_t i = 0; i < head.psi.size(); ++i) out += ",psi_" + std::to_string(i + 1);
    out += "\n";
    char buf[40];
    auto put = [&](double v) {
        std::snprintf(buf, sizeof buf, ",%.9g", v);
        out += buf;
    };
    for (const WeightTrace& tr : history) {
        if (tr.enc_sigma.size() != head.enc_sigma.size() ||
            tr.dec_sigma.size() != head.dec_sigma.size() || tr.psi.size() != head.psi.size())
            throw ValueError("weight trace rows disagree on column counts");
        out += std::to_string(tr.step);
        for (double v : tr.enc_sigma) put(v);
        for (double v : tr.dec_sigma) put(v);
        for (double v : tr.psi) put(v);
        out += "\n";
    }
    return out;
}

}  // namespace gtrans
