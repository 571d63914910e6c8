#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <type_traits>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gtrans/data.hpp"
#include "gtrans/model.hpp"

namespace gtrans {

struct TrainConfig {
    int warmup_steps = 4000;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
    double clip_norm = 1.0;  // 0 disables clipping
    double label_smoothing = 0.1;
    int epochs = 10;
    int batch_tokens = 2048;
    std::uint64_t seed = 1;
};

inline std::vector<std::string> train_config_violations(const TrainConfig& c) {
    std::vector<std::string> v;
    if (c.warmup_steps < 1) v.push_back("warmup_steps must be >= 1");
    if (c.beta1 < 0 || c.beta1 >= 1) v.push_back("beta1 must be in [0,1)");
    if (c.beta2 < 0 || c.beta2 >= 1) v.push_back("beta2 must be in [0,1)");
    if (c.eps <= 0) v.push_back("eps must be positive");
    if (c.clip_norm < 0) v.push_back("clip_norm must be >= 0");
    if (c.label_smoothing < 0 || c.label_smoothing >= 1)
        v.push_back("label_smoothing must be in [0,1)");
    if (c.epochs < 1) v.push_back("epochs must be >= 1");
    if (c.batch_tokens < 1) v.push_back("batch_tokens must be >= 1");
    return v;
}

// Inverse-square-root schedule with linear warmup, scaled by the model width.
inline double lr_at_step(std::int64_t step, int model_dim, int warmup_steps) {
    if (step < 1) throw ValueError("schedule is defined from step 1");
    if (warmup_steps < 1) throw ValueError("warmup_steps must be >= 1");
    const double s = static_cast<double>(step);
    return std::pow(static_cast<double>(model_dim), -0.5) *
           std::min(std::pow(s, -0.5), s * std::pow(static_cast<double>(warmup_steps), -1.5));
}

template <typename Real>
struct TrainState {
    std::int64_t step = 0;
    std::map<std::string, Tensor<Real>> m1, m2;  // Adam moments, keyed by parameter name
    Rng rng{0};
    double best_valid = std::numeric_limits<double>::infinity();

    TrainState() = default;
    explicit TrainState(std::uint64_t seed) : rng(Rng(seed).split(hash_name("dropout"))) {}
};

template <typename Real>
double global_grad_norm(const std::vector<NamedParam<Real>>& params) {
    double sq = 0;
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (Real g : p.tensor.grad()) sq += static_cast<double>(g) * g;
    }
    return std::sqrt(sq);
}

// Scales every gradient by clip_norm / ||g|| when the global norm exceeds the
// cap. Returns the pre-clip norm.
template <typename Real>
double clip_gradients(const std::vector<NamedParam<Real>>& params, double clip_norm) {
    const double norm = global_grad_norm(params);
    if (clip_norm > 0 && norm > clip_norm) {
        const Real k = static_cast<Real>(clip_norm / norm);
        for (const auto& p : params) {
            if (!p.tensor.has_grad()) continue;
            Tensor<Real> t = p.tensor;
            for (Real& g : t.grad()) g *= k;
        }
    }
    return norm;
}

// One bias-corrected Adam update over every parameter, in place.
template <typename Real>
void adam_step(const std::vector<NamedParam<Real>>& params, TrainState<Real>& st, double lr,
               const TrainConfig& cfg) {
    ++st.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        const std::vector<Real>& g = p.tensor.grad();
        for (std::int64_t i = 0; i < p.tensor.numel(); ++i)
            if (!std::isfinite(static_cast<double>(g[i])))
                throw NonFiniteError("non-finite gradient in " + p.name + " at entry " +
                                     std::to_string(i));
        auto m_it = st.m1.find(p.name);
        if (m_it == st.m1.end()) {
            m_it = st.m1.emplace(p.name, Tensor<Real>(p.tensor.shape())).first;
            st.m2.emplace(p.name, Tensor<Real>(p.tensor.shape()));
        }
        Tensor<Real>& m = m_it->second;
        Tensor<Real>& v = st.m2.at(p.name);
        Tensor<Real> w = p.tensor;
        for (std::int64_t i = 0; i < w.numel(); ++i) {
            const double gi = static_cast<double>(g[static_cast<std::size_t>(i)]);
            const double mi = cfg.beta1 * m.at(i) + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * v.at(i) + (1.0 - cfg.beta2) * gi * gi;
            m.at(i) = static_cast<Real>(mi);
            v.at(i) = static_cast<Real>(vi);
            w.at(i) = static_cast<Real>(w.at(i) - lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps));
        }
    }
}

struct DivergenceReport {
    std::int64_t step = 0;
    std::vector<double> enc_layer_grad_norms;  // last norms seen before the failure
    std::string reason;
};

template <typename Real>
struct EpochReport {
    double train_loss = 0;  // token-weighted mean multi-level loss
    std::int64_t steps = 0;
    std::vector<double> enc_grad_norm_mean;  // one entry per encoder layer
    std::vector<double> enc_grad_norm_min;
    std::vector<Real> psi;
    std::optional<DivergenceReport> divergence;
};

namespace detail {

template <typename Real>
std::vector<double> encoder_layer_grad_norms(const std::vector<NamedParam<Real>>& params,
                                             int enc_layers) {
    std::vector<double> sq(static_cast<std::size_t>(enc_layers), 0.0);
    for (const auto& p : params) {
        if (p.enc_layer < 1 || !p.tensor.has_grad()) continue;
        double s = 0;
        for (Real g : p.tensor.grad()) s += static_cast<double>(g) * g;
        sq[static_cast<std::size_t>(p.enc_layer - 1)] += s;
    }
    for (double& s : sq) s = std::sqrt(s);
    return sq;
}

// Reporting-precision psi: softmax of the stored logits at double precision,
// so the simplex assertion is about the math, not float rounding.
template <typename Real>
std::vector<double> psi_snapshot(const Model<Real>& m) {
    if (!m.cfg.fusion) return {1.0};
    const Tensor<Real>& w = m.fuse.dec_prob_weights;
    const double tau = static_cast<double>(m.fuse.tau);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t i = 0; i < w.numel(); ++i)
        mx = std::max(mx, static_cast<double>(w.at(i)) / tau);
    std::vector<double> out(static_cast<std::size_t>(w.numel()));
    double z = 0;
    for (std::int64_t i = 0; i < w.numel(); ++i) {
        out[static_cast<std::size_t>(i)] = std::exp(static_cast<double>(w.at(i)) / tau - mx);
        z += out[static_cast<std::size_t>(i)];
    }
    for (double& p : out) p /= z;
    return out;
}

}  // namespace detail

// One pass over the batches: forward, multi-level loss, backward, clip, Adam.
// A non-finite loss or gradient ends the epoch with a DivergenceReport in the
// returned record instead of an exception.
template <typename Real>
EpochReport<Real> train_epoch(Model<Real>& m, const std::vector<Batch>& batches,
                              TrainState<Real>& st, const TrainConfig& cfg) {
    {
        const auto bad = train_config_violations(cfg);
        if (!bad.empty()) {
            std::string msg = "invalid train config:";
            for (const auto& b : bad) msg += "\n  - " + b;
            throw ValueError(msg);
        }
    }
    if (batches.empty()) throw ValueError("cannot train on an empty batch list");
    const auto params = m.parameters();
    EpochReport<Real> rep;
    rep.enc_grad_norm_mean.assign(static_cast<std::size_t>(m.cfg.enc_layers), 0.0);
    rep.enc_grad_norm_min.assign(static_cast<std::size_t>(m.cfg.enc_layers),
                                 std::numeric_limits<double>::infinity());
    std::vector<double> last_norms;
    double loss_sum = 0;
    std::int64_t token_sum = 0;

    for (const Batch& batch : batches) {
        const std::int64_t this_step = st.step + 1;
        const double lr = lr_at_step(this_step, m.cfg.model_dim, cfg.warmup_steps);
        try {
            Tape<Real> tape;
            RunCtx<Real> ctx{&tape, &st.rng, static_cast<Real>(m.cfg.dropout), true};
            EncoderOutput<Real> enc = encode(m, batch.src, ctx);
            GroupPrediction<Real> pred = decode(m, batch.tgt_in, enc, ctx);
            Tensor<Real> loss = multi_level_loss(pred, batch.tgt_out,
                                                 kPadId, static_cast<Real>(cfg.label_smoothing),
                                                 &tape);
            tape.backward(loss);
            last_norms = detail::encoder_layer_grad_norms(params, m.cfg.enc_layers);
            clip_gradients(params, cfg.clip_norm);
            adam_step(params, st, lr, cfg);
            m.zero_grads();
            const std::int64_t toks = count_non_pad(batch.tgt_out);
            loss_sum += static_cast<double>(loss.at(0)) * static_cast<double>(toks);
            token_sum += toks;
            ++rep.steps;
            for (std::size_t l = 0; l < last_norms.size(); ++l) {
                rep.enc_grad_norm_mean[l] += last_norms[l];
                rep.enc_grad_norm_min[l] = std::min(rep.enc_grad_norm_min[l], last_norms[l]);
            }
        } catch (const NonFiniteError& e) {
            m.zero_grads();
            rep.divergence = DivergenceReport{this_step, last_norms, e.what()};
            break;
        }
    }

    if (rep.steps > 0) {
        for (double& x : rep.enc_grad_norm_mean) x /= static_cast<double>(rep.steps);
        rep.train_loss = loss_sum / static_cast<double>(token_sum);
    }
    const std::vector<double> psi = detail::psi_snapshot(m);
    double psi_sum = 0;
    for (double p : psi) {
        psi_sum += p;
        rep.psi.push_back(static_cast<Real>(p));
    }
    if (std::abs(psi_sum - 1.0) > 1e-9)
        throw ValueError("psi drifted off the simplex: sum " + std::to_string(psi_sum));
    return rep;
}

// Token-weighted mean multi-level loss without dropout or gradients.
template <typename Real>
double evaluate_loss(const Model<Real>& m, const std::vector<Batch>& batches, Real smoothing) {
    if (batches.empty()) throw ValueError("cannot evaluate on an empty batch list");
    double loss_sum = 0;
    std::int64_t token_sum = 0;
    for (const Batch& batch : batches) {
        RunCtx<Real> ctx;
        EncoderOutput<Real> enc = encode(m, batch.src, ctx);
        GroupPrediction<Real> pred = decode(m, batch.tgt_in, enc, ctx);
        Tensor<Real> loss =
            multi_level_loss(pred, batch.tgt_out, kPadId, smoothing, static_cast<Tape<Real>*>(nullptr));
        const std::int64_t toks = count_non_pad(batch.tgt_out);
        loss_sum += static_cast<double>(loss.at(0)) * static_cast<double>(toks);
        token_sum += toks;
    }
    return loss_sum / static_cast<double>(token_sum);
}

// Teacher-forced argmax accuracy of the fused distribution over non-pad cells.
template <typename Real>
double token_accuracy(const Model<Real>& m, const std::vector<Batch>& batches) {
    if (batches.empty()) throw ValueError("cannot evaluate on an empty batch list");
    std::int64_t hit = 0, total = 0;
    for (const Batch& batch : batches) {
        RunCtx<Real> ctx;
        EncoderOutput<Real> enc = encode(m, batch.src, ctx);
        GroupPrediction<Real> pred = decode(m, batch.tgt_in, enc, ctx);
        const int v = pred.fused_probs.dim(2);
        for (int r = 0; r < batch.tgt_out.rows; ++r)
            for (int c = 0; c < batch.tgt_out.cols; ++c) {
                const TokenId want = batch.tgt_out.at(r, c);
                if (want == kPadId) continue;
                const std::int64_t row =
                    (static_cast<std::int64_t>(r) * batch.tgt_out.cols + c) * v;
                int arg = 0;
                for (int j = 1; j < v; ++j)
                    if (pred.fused_probs.at(row + j) > pred.fused_probs.at(row + arg)) arg = j;
                hit += arg == want;
                ++total;
            }
    }
    return static_cast<double>(hit) / static_cast<double>(total);
}

template <typename Real>
struct EpochLog {
    int epoch = 0;
    double train_loss = 0;
    double valid_loss = 0;
    double valid_acc = 0;
    double lr = 0;
    std::vector<Real> psi;
    bool best = false;
    std::vector<double> enc_grad_norm_mean;
    std::vector<double> enc_grad_norm_min;
    std::optional<DivergenceReport> divergence;
};

// Epoch driver: reshuffled batches per epoch, validation after each one,
// best-checkpoint callback on improvement. Stops early on divergence.
template <typename Real>
std::vector<EpochLog<Real>> train_loop(
    Model<Real>& m, const std::vector<SentencePair>& train_pairs,
    const std::vector<SentencePair>& valid_pairs, TrainState<Real>& st, const TrainConfig& cfg,
    const std::type_identity_t<std::function<void(const EpochLog<Real>&)>>& on_epoch = nullptr,
    const std::type_identity_t<std::function<void(const Model<Real>&, const TrainState<Real>&)>>&
        on_best = nullptr) {
    const std::vector<Batch> valid_batches =
        make_batches(valid_pairs, cfg.batch_tokens, cfg.seed);
    std::vector<EpochLog<Real>> logs;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const std::uint64_t epoch_seed =
            Rng(cfg.seed).split(static_cast<std::uint64_t>(epoch)).key();
        const std::vector<Batch> batches =
            make_batches(train_pairs, cfg.batch_tokens, epoch_seed);
        EpochReport<Real> rep = train_epoch(m, batches, st, cfg);
        EpochLog<Real> log;
        log.epoch = epoch;
        log.train_loss = rep.train_loss;
        log.psi = rep.psi;
        log.enc_grad_norm_mean = rep.enc_grad_norm_mean;
        log.enc_grad_norm_min = rep.enc_grad_norm_min;
        log.divergence = rep.divergence;
        log.lr = lr_at_step(std::max<std::int64_t>(st.step, 1), m.cfg.model_dim,
                            cfg.warmup_steps);
        if (!rep.divergence) {
            log.valid_loss =
                evaluate_loss(m, valid_batches, static_cast<Real>(cfg.label_smoothing));
            log.valid_acc = token_accuracy(m, valid_batches);
            if (log.valid_loss < st.best_valid) {
                st.best_valid = log.valid_loss;
                log.best = true;
                if (on_best) on_best(m, st);
            }
        }
        logs.push_back(log);
        if (on_epoch) on_epoch(logs.back());
        if (rep.divergence) break;
    }
    return logs;
}

}  // namespace gtrans
