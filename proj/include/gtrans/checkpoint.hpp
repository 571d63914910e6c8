#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "gtrans/data.hpp"
#include "gtrans/model.hpp"
#include "gtrans/training.hpp"

namespace gtrans {

constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t u) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t u) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    put_u32(out, u);
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
           static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

inline std::uint64_t get_u64(const unsigned char* p) {
    return static_cast<std::uint64_t>(get_u32(p)) |
           static_cast<std::uint64_t>(get_u32(p + 4)) << 32;
}

inline float get_f32(const unsigned char* p) {
    const std::uint32_t u = get_u32(p);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"enc_layers", c.enc_layers},
                          {"dec_layers", c.dec_layers},
                          {"enc_group_size", c.enc_group_size},
                          {"dec_group_size", c.dec_group_size},
                          {"model_dim", c.model_dim},
                          {"ffn_dim", c.ffn_dim},
                          {"heads", c.heads},
                          {"dropout", c.dropout},
                          {"norm_style", norm_style_name(c.norm_style)},
                          {"src_vocab", c.src_vocab},
                          {"tgt_vocab", c.tgt_vocab},
                          {"tie_embeddings", c.tie_embeddings},
                          {"fusion", c.fusion},
                          {"tau_override", c.tau_override},
                          {"max_len", c.max_len},
                          {"ln_eps", c.ln_eps}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.enc_layers = j.at("enc_layers").get<int>();
    c.dec_layers = j.at("dec_layers").get<int>();
    c.enc_group_size = j.at("enc_group_size").get<int>();
    c.dec_group_size = j.at("dec_group_size").get<int>();
    c.model_dim = j.at("model_dim").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.heads = j.at("heads").get<int>();
    c.dropout = j.at("dropout").get<double>();
    const std::string style = j.at("norm_style").get<std::string>();
    if (style == "post") {
        c.norm_style = NormStyle::post;
    } else if (style == "pre") {
        c.norm_style = NormStyle::pre;
    } else {
        throw CheckpointError(CheckpointFault::BadHeader, "unknown norm_style '" + style + "'");
    }
    c.src_vocab = j.at("src_vocab").get<int>();
    c.tgt_vocab = j.at("tgt_vocab").get<int>();
    c.tie_embeddings = j.at("tie_embeddings").get<bool>();
    c.fusion = j.at("fusion").get<bool>();
    c.tau_override = j.at("tau_override").get<double>();
    c.max_len = j.at("max_len").get<int>();
    c.ln_eps = j.at("ln_eps").get<double>();
    return c;
}

}  // namespace detail

// Layout: "GTRN", format version u32, header length u64, JSON header, raw
// little-endian float32 payloads, crc32 of the payload bytes. All integers
// little-endian.
template <typename Real>
void save_checkpoint(const Model<Real>& m, const TrainState<Real>& st,
                     const Vocabulary& src_vocab, const Vocabulary& tgt_vocab,
                     const std::string& path) {
    using nlohmann::json;
    std::string payload;
    json index = json::array();
    auto emit = [&](const std::string& name, const Tensor<Real>& t) {
        json entry;
        entry["name"] = name;
        entry["shape"] = t.shape();
        entry["offset"] = payload.size();
        index.push_back(std::move(entry));
        for (std::int64_t i = 0; i < t.numel(); ++i)
            detail::put_f32(payload, static_cast<float>(t.at(i)));
    };
    for (const auto& p : m.parameters()) emit(p.name, p.tensor);
    for (const auto& [name, t] : st.m1) emit("adam.m." + name, t);
    for (const auto& [name, t] : st.m2) emit("adam.v." + name, t);

    json header;
    header["config"] = detail::config_to_json(m.cfg);
    // json has no infinity; an untouched best_valid is stored as null
    header["state"] = json{{"step", st.step},
                           {"best_valid", std::isfinite(st.best_valid) ? json(st.best_valid) : json()},
                           {"rng_key", st.rng.key()},
                           {"rng_counter", st.rng.counter()}};
    header["src_tokens"] = src_vocab.tokens();
    header["tgt_tokens"] = tgt_vocab.tokens();
    header["tensors"] = std::move(index);
    const std::string header_text = header.dump();

    std::string file;
    file.reserve(16 + header_text.size() + payload.size() + 4);
    file += "GTRN";
    detail::put_u32(file, kCheckpointVersion);
    detail::put_u64(file, header_text.size());
    file += header_text;
    file += payload;
    const std::uint32_t crc = static_cast<std::uint32_t>(
        crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(payload.data()),
              static_cast<uInt>(payload.size())));
    detail::put_u32(file, crc);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointFault::Io, "cannot open " + path + " for writing");
    out.write(file.data(), static_cast<std::streamsize>(file.size()));
    if (!out) throw CheckpointError(CheckpointFault::Io, "write to " + path + " failed");
}

template <typename Real>
struct LoadedCheckpoint {
    Model<Real> model;
    TrainState<Real> state;
    Vocabulary src_vocab;
    Vocabulary tgt_vocab;
};

template <typename Real>
LoadedCheckpoint<Real> load_checkpoint(const std::string& path) {
    using nlohmann::json;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(CheckpointFault::Io, "cannot open " + path);
    std::string file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto* bytes = reinterpret_cast<const unsigned char*>(file.data());

    if (file.size() < 16)
        throw CheckpointError(CheckpointFault::Truncated, path + ": shorter than any header");
    if (file.compare(0, 4, "GTRN") != 0)
        throw CheckpointError(CheckpointFault::BadMagic, path + ": wrong magic bytes");
    const std::uint32_t version = detail::get_u32(bytes + 4);
    if (version != kCheckpointVersion)
        throw CheckpointError(CheckpointFault::VersionMismatch,
                              path + ": format version " + std::to_string(version) +
                                  ", expected " + std::to_string(kCheckpointVersion));
    const std::uint64_t header_len = detail::get_u64(bytes + 8);
    if (16 + header_len + 4 > file.size())
        throw CheckpointError(CheckpointFault::Truncated, path + ": header runs past the file");
    json header;
    try {
        header = json::parse(file.begin() + 16, file.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const json::exception& e) {
        throw CheckpointError(CheckpointFault::BadHeader, path + ": " + e.what());
    }

    const std::size_t payload_at = 16 + static_cast<std::size_t>(header_len);
    const std::size_t payload_len = file.size() - payload_at - 4;
    // a cut-off payload is a truncation, not a checksum failure, so size the
    // tensor index before touching the crc
    std::size_t need_payload = 0;
    try {
        for (const json& e : header.at("tensors")) {
            const Shape shp = e.at("shape").get<Shape>();
            std::size_t n = 1;
            for (int d : shp) {
                if (d < 1)
                    throw CheckpointError(CheckpointFault::BadHeader,
                                          path + ": non-positive tensor extent");
                n *= static_cast<std::size_t>(d);
            }
            need_payload =
                std::max(need_payload, e.at("offset").get<std::size_t>() + 4 * n);
        }
    } catch (const json::exception& e) {
        throw CheckpointError(CheckpointFault::BadHeader, path + ": " + e.what());
    }
    if (payload_len < need_payload)
        throw CheckpointError(CheckpointFault::Truncated,
                              path + ": payload shorter than the tensor index needs");
    const std::uint32_t want_crc = detail::get_u32(bytes + file.size() - 4);
    const std::uint32_t got_crc = static_cast<std::uint32_t>(
        crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(file.data() + payload_at),
              static_cast<uInt>(payload_len)));
    if (want_crc != got_crc)
        throw CheckpointError(CheckpointFault::ChecksumMismatch,
                              path + ": payload crc mismatch");

    LoadedCheckpoint<Real> out;
    try {
        const ModelConfig cfg = detail::config_from_json(header.at("config"));
        const auto bad = config_violations(cfg);
        if (!bad.empty())
            throw CheckpointError(CheckpointFault::ConfigMismatch,
                                  path + ": stored config invalid: " + bad.front());
        out.model = build_model<Real>(cfg, 0);
        const json& state = header.at("state");
        out.state.step = state.at("step").get<std::int64_t>();
        out.state.best_valid = state.at("best_valid").is_null()
                                   ? std::numeric_limits<double>::infinity()
                                   : state.at("best_valid").get<double>();
        out.state.rng.restore(state.at("rng_key").get<std::uint64_t>(),
                              state.at("rng_counter").get<std::uint64_t>());
        try {
            out.src_vocab =
                Vocabulary::from_tokens(header.at("src_tokens").get<std::vector<std::string>>());
            out.tgt_vocab =
                Vocabulary::from_tokens(header.at("tgt_tokens").get<std::vector<std::string>>());
        } catch (const VocabError& e) {
            throw CheckpointError(CheckpointFault::ConfigMismatch, path + ": " + e.what());
        }
        if (out.src_vocab.size() != cfg.src_vocab || out.tgt_vocab.size() != cfg.tgt_vocab)
            throw CheckpointError(CheckpointFault::ConfigMismatch,
                                  path + ": vocabulary sizes disagree with the stored config");

        struct Entry {
            Shape shape;
            std::size_t offset;
        };
        std::map<std::string, Entry> entries;
        for (const json& e : header.at("tensors"))
            entries[e.at("name").get<std::string>()] =
                Entry{e.at("shape").get<Shape>(), e.at("offset").get<std::size_t>()};

        auto fill = [&](const std::string& name, Tensor<Real> t) {
            auto it = entries.find(name);
            if (it == entries.end())
                throw CheckpointError(CheckpointFault::ConfigMismatch,
                                      path + ": missing tensor " + name);
            if (it->second.shape != t.shape())
                throw CheckpointError(CheckpointFault::ConfigMismatch,
                                      path + ": tensor " + name + " has shape " +
                                          shape_str(it->second.shape) + ", expected " +
                                          shape_str(t.shape()));
            const std::size_t need = it->second.offset + static_cast<std::size_t>(t.numel()) * 4;
            if (need > payload_len)
                throw CheckpointError(CheckpointFault::Truncated,
                                      path + ": tensor " + name + " runs past the payload");
            const unsigned char* p = bytes + payload_at + it->second.offset;
            for (std::int64_t i = 0; i < t.numel(); ++i)
                t.at(i) = static_cast<Real>(detail::get_f32(p + 4 * i));
            entries.erase(it);
        };
        for (const auto& p : out.model.parameters()) fill(p.name, p.tensor);
        if (out.state.step > 0) {
            for (const auto& p : out.model.parameters()) {
                Tensor<Real> m1(p.tensor.shape()), m2(p.tensor.shape());
                fill("adam.m." + p.name, m1);
                fill("adam.v." + p.name, m2);
                out.state.m1.emplace(p.name, m1);
                out.state.m2.emplace(p.name, m2);
            }
        }
        if (!entries.empty())
            throw CheckpointError(CheckpointFault::ConfigMismatch,
                                  path + ": unexpected tensor " + entries.begin()->first);
    } catch (const json::exception& e) {
        throw CheckpointError(CheckpointFault::BadHeader, path + ": " + e.what());
    }
    return out;
}

}  // namespace gtrans
