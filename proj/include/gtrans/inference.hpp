#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "gtrans/model.hpp"

namespace gtrans {

struct PruneSpec {
    int encoder_keep = -1;  // bottom encoder layers to run; -1 = all
    int decoder_lo = 1;     // inclusive decoder-group range
    int decoder_hi = -1;    // -1 = last group
};

// Validates a prune request against the model and resolves the -1 defaults.
template <typename Real>
PruneSpec resolve_prune(const Model<Real>& m, PruneSpec s) {
    const int layers = m.cfg.enc_layers;
    const int groups = m.cfg.fusion ? m.dec_scheme.groups() : 1;
    if (s.encoder_keep == -1) s.encoder_keep = layers;
    if (s.decoder_hi == -1) s.decoder_hi = groups;
    if (s.encoder_keep < 1 || s.encoder_keep > layers)
        throw ValueError("encoder_keep " + std::to_string(s.encoder_keep) + " outside 1.." +
                         std::to_string(layers));
    if (m.cfg.fusion) {
        const int t = m.enc_scheme.group_size;
        if (s.encoder_keep != layers && s.encoder_keep % t != 0)
            throw ValueError("encoder_keep " + std::to_string(s.encoder_keep) +
                             " keeps a partial group (group size " + std::to_string(t) + ")");
    } else if (s.encoder_keep != layers) {
        throw ValueError("encoder pruning needs fusion; this model reads only the top layer");
    }
    if (s.decoder_lo < 1 || s.decoder_hi < s.decoder_lo || s.decoder_hi > groups)
        throw ValueError("decoder group range " + std::to_string(s.decoder_lo) + ":" +
                         std::to_string(s.decoder_hi) + " invalid for " + std::to_string(groups) +
                         " groups");
    return s;
}

struct Hypothesis {
    std::vector<TokenId> ids;  // generated tokens, eos included when finished
    double log_prob = 0;       // cumulative log of the fused probability
    bool finished = false;

    double score(double length_penalty) const {
        const double len = ids.empty() ? 1.0 : static_cast<double>(ids.size());
        return log_prob / std::pow(len, length_penalty);
    }
};

namespace detail {

inline bool lex_less(const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
    return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

// Replicates a single-sentence encoding so hypotheses decode as one batch.
template <typename Real>
EncoderOutput<Real> tile_encoder(const EncoderOutput<Real>& enc, int rows) {
    if (enc.src.rows != 1) throw DimensionError("can only tile a single-sentence encoding");
    EncoderOutput<Real> out;
    out.src = TokenMatrix(rows, enc.src.cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < enc.src.cols; ++c) out.src.at(r, c) = enc.src.at(0, c);
    const int s = enc.fused.dim(1), d = enc.fused.dim(2);
    out.fused = Tensor<Real>({rows, s, d});
    const std::int64_t row_n = static_cast<std::int64_t>(s) * d;
    for (int r = 0; r < rows; ++r)
        for (std::int64_t i = 0; i < row_n; ++i)
            out.fused.at(r * row_n + i) = enc.fused.at(i);
    return out;
}

// Longest generated sequence: the bos-led prefix must stay within max_len.
template <typename Real>
int generation_cap(const Model<Real>& m, int max_len) {
    int cap = m.cfg.max_len - 1;
    if (max_len > 0) cap = std::min(cap, max_len);
    return cap;
}

// Argmax chain over the fused distribution until eos or the length cap,
// with the cumulative log probability of its choices. Ties go to the
// smaller token id.
template <typename Real>
Hypothesis greedy_rollout(const Model<Real>& m, const EncoderOutput<Real>& enc, RunCtx<Real>& ctx,
                          int cap, const PruneSpec& p) {
    std::vector<TokenId> prefix{kBosId};
    Hypothesis h;
    while (static_cast<int>(h.ids.size()) < cap) {
        GroupPrediction<Real> pred = decode(m, prefix, enc, ctx, p.decoder_lo, p.decoder_hi);
        const int v = pred.fused_probs.dim(2);
        const std::int64_t row = (static_cast<std::int64_t>(prefix.size()) - 1) * v;
        int arg = 0;
        for (int j = 1; j < v; ++j)
            if (pred.fused_probs.at(row + j) > pred.fused_probs.at(row + arg)) arg = j;
        h.ids.push_back(arg);
        h.log_prob += std::log(static_cast<double>(pred.fused_probs.at(row + arg)));
        if (arg == kEosId) {
            h.finished = true;
            break;
        }
        prefix.push_back(arg);
    }
    return h;
}

}  // namespace detail

// Appends the argmax of the fused distribution until eos or the length cap.
// Ties go to the smaller token id.
template <typename Real>
std::vector<TokenId> greedy_decode(const Model<Real>& m, const std::vector<TokenId>& src,
                                   int max_len = -1, PruneSpec prune = {}) {
    const PruneSpec p = resolve_prune(m, prune);
    const int cap = detail::generation_cap(m, max_len);
    RunCtx<Real> ctx;
    const EncoderOutput<Real> enc = encode(m, src, ctx, p.encoder_keep);
    return detail::greedy_rollout(m, enc, ctx, cap, p).ids;
}

// Beam over the log fused probability. Candidates rank by cumulative log
// probability with lexicographic-id tie-breaks; the winner is the best
// finished (or cap-stopped) hypothesis under score = log P / len^lp.
// The greedy completion is seeded into the finished pool, so it always
// competes: a wide beam can prune the locally-greedy branch, yet never
// returns a hypothesis scoring below it.
template <typename Real>
Hypothesis beam_search(const Model<Real>& m, const std::vector<TokenId>& src, int width = 8,
                       int max_len = -1, double length_penalty = 1.0, PruneSpec prune = {}) {
    if (width < 1) throw ValueError("beam width must be >= 1");
    if (length_penalty < 0) throw ValueError("length penalty must be >= 0");
    const PruneSpec p = resolve_prune(m, prune);
    const int cap = detail::generation_cap(m, max_len);
    RunCtx<Real> ctx;
    const EncoderOutput<Real> enc1 = encode(m, src, ctx, p.encoder_keep);

    std::vector<Hypothesis> active{Hypothesis{}};
    std::vector<Hypothesis> done{detail::greedy_rollout(m, enc1, ctx, cap, p)};
    auto better_score = [&](const Hypothesis& a, const Hypothesis& b) {
        const double sa = a.score(length_penalty), sb = b.score(length_penalty);
        if (sa != sb) return sa > sb;
        return detail::lex_less(a.ids, b.ids);
    };

    while (!active.empty()) {
        const int rows = static_cast<int>(active.size());
        TokenMatrix prefixes(rows, 1 + static_cast<int>(active[0].ids.size()));
        for (int r = 0; r < rows; ++r) {
            prefixes.at(r, 0) = kBosId;
            for (std::size_t i = 0; i < active[static_cast<std::size_t>(r)].ids.size(); ++i)
                prefixes.at(r, static_cast<int>(i + 1)) = active[static_cast<std::size_t>(r)].ids[i];
        }
        const EncoderOutput<Real> enc = rows == 1 ? enc1 : detail::tile_encoder(enc1, rows);
        GroupPrediction<Real> pred = decode(m, prefixes, enc, ctx, p.decoder_lo, p.decoder_hi);
        const int v = pred.fused_probs.dim(2);
        const int t = prefixes.cols;

        std::vector<Hypothesis> cands;
        cands.reserve(static_cast<std::size_t>(rows) * v);
        for (int r = 0; r < rows; ++r) {
            const std::int64_t row = (static_cast<std::int64_t>(r) * t + (t - 1)) * v;
            for (int j = 0; j < v; ++j) {
                const double prob = static_cast<double>(pred.fused_probs.at(row + j));
                if (prob <= 0) continue;
                Hypothesis h = active[static_cast<std::size_t>(r)];
                h.ids.push_back(j);
                h.log_prob += std::log(prob);
                h.finished = j == kEosId;
                cands.push_back(std::move(h));
            }
        }
        std::sort(cands.begin(), cands.end(), [&](const Hypothesis& a, const Hypothesis& b) {
            if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
            return detail::lex_less(a.ids, b.ids);
        });
        if (static_cast<int>(cands.size()) > width) cands.resize(static_cast<std::size_t>(width));

        active.clear();
        for (Hypothesis& h : cands) {
            if (h.finished)
                done.push_back(std::move(h));
            else
                active.push_back(std::move(h));
        }
        if (!active.empty() && static_cast<int>(active[0].ids.size()) >= cap) {
            // length cap reached; cap-stopped hypotheses compete as they are
            for (Hypothesis& h : active) done.push_back(std::move(h));
            active.clear();
        }
        if (!done.empty() && !active.empty()) {
            // an active branch whose ceiling cannot beat the best finished
            // hypothesis is dead weight (log probs only fall with length)
            const Hypothesis& best_done = *std::min_element(
                done.begin(), done.end(),
                [&](const Hypothesis& a, const Hypothesis& b) { return better_score(a, b); });
            const double horizon = std::pow(static_cast<double>(cap), length_penalty);
            std::vector<Hypothesis> keep;
            for (Hypothesis& h : active)
                if (h.log_prob / horizon > best_done.score(length_penalty))
                    keep.push_back(std::move(h));
            active = std::move(keep);
        }
    }

    return *std::min_element(done.begin(), done.end(),
                             [&](const Hypothesis& a, const Hypothesis& b) {
                                 return better_score(a, b);
                             });
}

}  // namespace gtrans
