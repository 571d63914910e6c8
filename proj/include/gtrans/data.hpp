#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gtrans/errors.hpp"
#include "gtrans/rng.hpp"
#include "gtrans/token.hpp"

namespace gtrans {

inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kBosToken = "<bos>";
inline constexpr const char* kEosToken = "<eos>";
inline constexpr const char* kUnkToken = "<unk>";

// Token/id bijection with the four reserved entries pinned to ids 0..3.
class Vocabulary {
  public:
    Vocabulary() {
        for (const char* t : {kPadToken, kBosToken, kEosToken, kUnkToken}) add(t);
    }

    TokenId add(const std::string& tok) {
        auto it = ids_.find(tok);
        if (it != ids_.end()) return it->second;
        const TokenId id = static_cast<TokenId>(tokens_.size());
        tokens_.push_back(tok);
        ids_.emplace(tok, id);
        return id;
    }

    int size() const { return static_cast<int>(tokens_.size()); }

    TokenId id_of(const std::string& tok) const {
        auto it = ids_.find(tok);
        return it == ids_.end() ? kUnkId : it->second;
    }

    const std::string& token_of(TokenId id) const {
        if (id < 0 || id >= size())
            throw VocabError("token id " + std::to_string(id) + " outside vocabulary of " +
                             std::to_string(size()));
        return tokens_[static_cast<std::size_t>(id)];
    }

    std::vector<TokenId> encode(const std::vector<std::string>& toks) const {
        std::vector<TokenId> out;
        out.reserve(toks.size());
        for (const auto& t : toks) out.push_back(id_of(t));
        return out;
    }

    std::vector<std::string> decode(const std::vector<TokenId>& ids) const {
        std::vector<std::string> out;
        out.reserve(ids.size());
        for (TokenId id : ids) out.push_back(token_of(id));
        return out;
    }

    const std::vector<std::string>& tokens() const { return tokens_; }

    // Rebuild from a serialized token list; the reserved prefix must survive
    // the round trip exactly.
    static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
        if (tokens.size() < 5) throw VocabError("vocabulary must hold at least 5 tokens");
        const char* reserved[] = {kPadToken, kBosToken, kEosToken, kUnkToken};
        for (int i = 0; i < 4; ++i)
            if (tokens[static_cast<std::size_t>(i)] != reserved[i])
                throw VocabError("reserved token slot " + std::to_string(i) + " holds '" +
                                 tokens[static_cast<std::size_t>(i)] + "'");
        Vocabulary v;
        for (std::size_t i = 4; i < tokens.size(); ++i) {
            if (v.ids_.count(tokens[i]))
                throw VocabError("duplicate token '" + tokens[i] + "' in vocabulary");
            v.add(tokens[i]);
        }
        return v;
    }

  private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> ids_;
};

inline std::vector<std::string> split_ws(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

// Frequency-ranked vocabulary, ties broken lexicographically, capped at
// max_size content tokens before the reserved four go in front.
inline Vocabulary build_vocab(const std::vector<std::vector<std::string>>& corpus,
                              std::size_t max_size) {
    if (max_size < 1) throw ValueError("vocabulary max_size must be >= 1");
    std::map<std::string, std::int64_t> freq;
    for (const auto& sent : corpus)
        for (const auto& tok : sent) ++freq[tok];
    if (freq.empty()) throw ValueError("cannot build a vocabulary from an empty corpus");
    std::vector<std::pair<std::string, std::int64_t>> ranked(freq.begin(), freq.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    if (ranked.size() > max_size) ranked.resize(max_size);
    Vocabulary v;
    for (const auto& [tok, n] : ranked) v.add(tok);
    return v;
}

struct SentencePair {
    std::vector<TokenId> src;  // ends with eos
    std::vector<TokenId> tgt;  // bos ... eos
};

// Wraps raw content ids with the sentence delimiters.
inline SentencePair frame_pair(std::vector<TokenId> src_content, std::vector<TokenId> tgt_content) {
    SentencePair p;
    p.src = std::move(src_content);
    p.src.push_back(kEosId);
    p.tgt.reserve(tgt_content.size() + 2);
    p.tgt.push_back(kBosId);
    p.tgt.insert(p.tgt.end(), tgt_content.begin(), tgt_content.end());
    p.tgt.push_back(kEosId);
    return p;
}

enum class SynthTask { copy, reverse, sort };

inline const char* synth_task_name(SynthTask t) {
    switch (t) {
        case SynthTask::copy: return "copy";
        case SynthTask::reverse: return "reverse";
        case SynthTask::sort: return "sort";
    }
    return "?";
}

inline SynthTask parse_synth_task(const std::string& s) {
    if (s == "copy") return SynthTask::copy;
    if (s == "reverse") return SynthTask::reverse;
    if (s == "sort") return SynthTask::sort;
    throw ValueError("unknown task '" + s + "' (expected copy, reverse, or sort)");
}

// Content ids live in [4, vocab_size); the target is a pure function of the
// source, so the tasks are learnable exactly.
inline std::vector<SentencePair> gen_synthetic(SynthTask task, int vocab_size, int min_len,
                                               int max_len, int n, std::uint64_t seed) {
    if (vocab_size < 5) throw ValueError("vocab_size must be >= 5");
    if (min_len < 1 || min_len > max_len) throw ValueError("need 1 <= min_len <= max_len");
    if (n < 1) throw ValueError("need at least one sentence pair");
    Rng rng = Rng(seed).split(hash_name("gen_synthetic"));
    std::vector<SentencePair> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int len =
            min_len + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(max_len - min_len + 1)));
        std::vector<TokenId> src(static_cast<std::size_t>(len));
        for (TokenId& t : src)
            t = 4 + static_cast<TokenId>(rng.next_below(static_cast<std::uint64_t>(vocab_size - 4)));
        std::vector<TokenId> tgt = src;
        if (task == SynthTask::reverse) std::reverse(tgt.begin(), tgt.end());
        if (task == SynthTask::sort) std::sort(tgt.begin(), tgt.end());
        out.push_back(frame_pair(std::move(src), std::move(tgt)));
    }
    return out;
}

// Vocabulary whose content token k has surface "k", so synthetic ids survive
// a text round trip unchanged.
inline Vocabulary synthetic_vocab(int vocab_size) {
    if (vocab_size < 5) throw ValueError("vocab_size must be >= 5");
    Vocabulary v;
    for (int id = 4; id < vocab_size; ++id) v.add(std::to_string(id));
    return v;
}

struct TsvCorpus {
    std::vector<SentencePair> pairs;
    Vocabulary vocab;  // joint over both sides
    int skipped = 0;   // lines dropped for exceeding max_len
};

inline TsvCorpus load_tsv(const std::string& path, int max_len = 128,
                          std::size_t max_vocab = 1u << 20) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path);
    std::vector<std::pair<std::vector<std::string>, std::vector<std::string>>> kept;
    std::string line;
    int line_no = 0, skipped = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::vector<std::string> fields;
        std::size_t start = 0;
        for (std::size_t i = 0; i <= line.size(); ++i)
            if (i == line.size() || line[i] == '\t') {
                fields.push_back(line.substr(start, i - start));
                start = i + 1;
            }
        if (fields.size() != 2)
            throw ParseError(path + ":" + std::to_string(line_no) + ": expected 2 tab-separated fields, got " +
                             std::to_string(fields.size()));
        std::vector<std::string> src = split_ws(fields[0]), tgt = split_ws(fields[1]);
        if (src.empty() || tgt.empty())
            throw ParseError(path + ":" + std::to_string(line_no) + ": empty side");
        if (static_cast<int>(src.size()) + 1 > max_len || static_cast<int>(tgt.size()) + 2 > max_len) {
            ++skipped;
            continue;
        }
        kept.emplace_back(std::move(src), std::move(tgt));
    }
    if (line_no == 0) throw ParseError(path + ": empty corpus");
    if (kept.empty())
        throw ParseError(path + ": every line exceeded max_len " + std::to_string(max_len));
    std::vector<std::vector<std::string>> streams;
    streams.reserve(kept.size() * 2);
    for (const auto& [s, t] : kept) {
        streams.push_back(s);
        streams.push_back(t);
    }
    TsvCorpus out;
    out.vocab = build_vocab(streams, max_vocab);
    out.skipped = skipped;
    for (const auto& [s, t] : kept)
        out.pairs.push_back(frame_pair(out.vocab.encode(s), out.vocab.encode(t)));
    return out;
}

inline void write_tsv(const std::string& path, const std::vector<SentencePair>& pairs,
                      const Vocabulary& vocab) {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot open " + path + " for writing");
    for (const auto& p : pairs) {
        std::string line;
        for (std::size_t i = 0; i + 1 < p.src.size(); ++i) {
            if (i) line += ' ';
            line += vocab.token_of(p.src[i]);
        }
        line += '\t';
        for (std::size_t i = 1; i + 1 < p.tgt.size(); ++i) {
            if (i > 1) line += ' ';
            line += vocab.token_of(p.tgt[i]);
        }
        out << line << '\n';
    }
    if (!out) throw ParseError("write to " + path + " failed");
}

struct Batch {
    TokenMatrix src;      // [B x S], right-padded
    TokenMatrix tgt_in;   // [B x T], bos-shifted
    TokenMatrix tgt_out;  // [B x T]
    ByteMask src_pad;     // [B x S], 1 exactly at pad cells
    ByteMask tgt_pad;     // [B x T]
};

inline std::int64_t count_non_pad(const TokenMatrix& m) {
    std::int64_t n = 0;
    for (TokenId t : m.v) n += t != kPadId;
    return n;
}

// Length-bucketed batches capped at batch_tokens padded target positions,
// emitted in a seed-shuffled order.
inline std::vector<Batch> make_batches(const std::vector<SentencePair>& pairs, int batch_tokens,
                                       std::uint64_t seed) {
    if (pairs.empty()) throw ValueError("cannot batch an empty pair list");
    if (batch_tokens < 1) throw ValueError("batch_tokens must be >= 1");
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        if (p.src.empty() || p.tgt.size() < 2)
            throw ValueError("pair " + std::to_string(i) + " is degenerate");
        const int cost = static_cast<int>(p.tgt.size()) - 1;
        if (cost > batch_tokens)
            throw ValueError("pair " + std::to_string(i) + " needs " + std::to_string(cost) +
                             " target tokens, over the batch budget of " +
                             std::to_string(batch_tokens));
    }

    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (pairs[a].tgt.size() != pairs[b].tgt.size()) return pairs[a].tgt.size() < pairs[b].tgt.size();
        return pairs[a].src.size() < pairs[b].src.size();
    });

    std::vector<std::vector<std::size_t>> groups;
    std::size_t at = 0;
    while (at < order.size()) {
        std::vector<std::size_t> g{order[at]};
        int max_cost = static_cast<int>(pairs[order[at]].tgt.size()) - 1;
        ++at;
        while (at < order.size()) {
            const int cost = static_cast<int>(pairs[order[at]].tgt.size()) - 1;
            const int widest = std::max(max_cost, cost);
            if (static_cast<int>(g.size() + 1) * widest > batch_tokens) break;
            g.push_back(order[at]);
            max_cost = widest;
            ++at;
        }
        groups.push_back(std::move(g));
    }

    Rng rng = Rng(seed).split(hash_name("batch_order"));
    for (std::size_t i = groups.size(); i > 1; --i)
        std::swap(groups[i - 1], groups[rng.next_below(i)]);

    std::vector<Batch> out;
    out.reserve(groups.size());
    for (const auto& g : groups) {
        int max_src = 0, max_tgt = 0;
        for (std::size_t idx : g) {
            max_src = std::max(max_src, static_cast<int>(pairs[idx].src.size()));
            max_tgt = std::max(max_tgt, static_cast<int>(pairs[idx].tgt.size()) - 1);
        }
        Batch b;
        const int rows = static_cast<int>(g.size());
        b.src = TokenMatrix(rows, max_src);
        b.tgt_in = TokenMatrix(rows, max_tgt);
        b.tgt_out = TokenMatrix(rows, max_tgt);
        for (int r = 0; r < rows; ++r) {
            const SentencePair& p = pairs[g[static_cast<std::size_t>(r)]];
            for (std::size_t c = 0; c < p.src.size(); ++c)
                b.src.at(r, static_cast<int>(c)) = p.src[c];
            for (std::size_t c = 0; c + 1 < p.tgt.size(); ++c) {
                b.tgt_in.at(r, static_cast<int>(c)) = p.tgt[c];
                b.tgt_out.at(r, static_cast<int>(c)) = p.tgt[c + 1];
            }
        }
        b.src_pad = ByteMask({rows, max_src}, 0);
        b.tgt_pad = ByteMask({rows, max_tgt}, 0);
        for (std::size_t i = 0; i < b.src.v.size(); ++i) b.src_pad.v[i] = b.src.v[i] == kPadId;
        for (std::size_t i = 0; i < b.tgt_out.v.size(); ++i) b.tgt_pad.v[i] = b.tgt_out.v[i] == kPadId;
        out.push_back(std::move(b));
    }
    return out;
}

}  // namespace gtrans
