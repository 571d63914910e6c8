#pragma once

#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "gtrans/model.hpp"
#include "gtrans/training.hpp"

namespace gtrans {

inline constexpr int kRunConfigSchema = 1;

// Experiment file: model + training knobs + data paths. Every field has a
// default, so a file only states what it changes; unknown keys are errors
// rather than silent typos.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    std::string train_data;
    std::string valid_data;
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                                const std::string& where) {
    for (const auto& item : j.items())
        if (!allowed.count(item.key()))
            throw ParseError("unknown key \"" + item.key() + "\" in " + where);
}

template <typename T>
void take(const nlohmann::json& j, const char* key, T& into) {
    if (j.contains(key)) into = j.at(key).get<T>();
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ParseError("run config must be a JSON object");
    detail::reject_unknown_keys(j, {"schema_version", "model", "train", "data"}, "run config");
    if (!j.contains("schema_version")) throw ParseError("run config is missing schema_version");

    RunConfig rc;
    try {
        const int ver = j.at("schema_version").get<int>();
        if (ver != kRunConfigSchema)
            throw ParseError("run config schema_version " + std::to_string(ver) +
                             " is not supported (expected " + std::to_string(kRunConfigSchema) +
                             ")");
        if (j.contains("model")) {
            const nlohmann::json& m = j.at("model");
            detail::reject_unknown_keys(
                m,
                {"enc_layers", "dec_layers", "enc_group_size", "dec_group_size", "model_dim",
                 "ffn_dim", "heads", "src_vocab", "tgt_vocab", "dropout", "norm_style",
                 "tie_embeddings", "fusion", "tau_override", "max_len", "ln_eps"},
                "model");
            detail::take(m, "enc_layers", rc.model.enc_layers);
            detail::take(m, "dec_layers", rc.model.dec_layers);
            detail::take(m, "enc_group_size", rc.model.enc_group_size);
            detail::take(m, "dec_group_size", rc.model.dec_group_size);
            detail::take(m, "model_dim", rc.model.model_dim);
            detail::take(m, "ffn_dim", rc.model.ffn_dim);
            detail::take(m, "heads", rc.model.heads);
            detail::take(m, "src_vocab", rc.model.src_vocab);
            detail::take(m, "tgt_vocab", rc.model.tgt_vocab);
            detail::take(m, "dropout", rc.model.dropout);
            detail::take(m, "tie_embeddings", rc.model.tie_embeddings);
            detail::take(m, "fusion", rc.model.fusion);
            detail::take(m, "tau_override", rc.model.tau_override);
            detail::take(m, "max_len", rc.model.max_len);
            detail::take(m, "ln_eps", rc.model.ln_eps);
            if (m.contains("norm_style")) {
                const std::string s = m.at("norm_style").get<std::string>();
                if (s == "post")
                    rc.model.norm_style = NormStyle::post;
                else if (s == "pre")
                    rc.model.norm_style = NormStyle::pre;
                else
                    throw ParseError("norm_style must be \"post\" or \"pre\", got \"" + s + "\"");
            }
        }
        if (j.contains("train")) {
            const nlohmann::json& t = j.at("train");
            detail::reject_unknown_keys(t,
                                        {"warmup_steps", "beta1", "beta2", "eps", "clip_norm",
                                         "label_smoothing", "epochs", "batch_tokens", "seed"},
                                        "train");
            detail::take(t, "warmup_steps", rc.train.warmup_steps);
            detail::take(t, "beta1", rc.train.beta1);
            detail::take(t, "beta2", rc.train.beta2);
            detail::take(t, "eps", rc.train.eps);
            detail::take(t, "clip_norm", rc.train.clip_norm);
            detail::take(t, "label_smoothing", rc.train.label_smoothing);
            detail::take(t, "epochs", rc.train.epochs);
            detail::take(t, "batch_tokens", rc.train.batch_tokens);
            detail::take(t, "seed", rc.train.seed);
        }
        if (j.contains("data")) {
            const nlohmann::json& d = j.at("data");
            detail::reject_unknown_keys(d, {"train", "valid"}, "data");
            detail::take(d, "train", rc.train_data);
            detail::take(d, "valid", rc.valid_data);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("run config: ") + e.what());
    }
    return rc;
}

inline nlohmann::json to_json(const RunConfig& rc) {
    return nlohmann::json{
        {"schema_version", kRunConfigSchema},
        {"model",
         {{"enc_layers", rc.model.enc_layers},
          {"dec_layers", rc.model.dec_layers},
          {"enc_group_size", rc.model.enc_group_size},
          {"dec_group_size", rc.model.dec_group_size},
          {"model_dim", rc.model.model_dim},
          {"ffn_dim", rc.model.ffn_dim},
          {"heads", rc.model.heads},
          {"src_vocab", rc.model.src_vocab},
          {"tgt_vocab", rc.model.tgt_vocab},
          {"dropout", rc.model.dropout},
          {"norm_style", rc.model.norm_style == NormStyle::post ? "post" : "pre"},
          {"tie_embeddings", rc.model.tie_embeddings},
          {"fusion", rc.model.fusion},
          {"tau_override", rc.model.tau_override},
          {"max_len", rc.model.max_len},
          {"ln_eps", rc.model.ln_eps}}},
        {"train",
         {{"warmup_steps", rc.train.warmup_steps},
          {"beta1", rc.train.beta1},
          {"beta2", rc.train.beta2},
          {"eps", rc.train.eps},
          {"clip_norm", rc.train.clip_norm},
          {"label_smoothing", rc.train.label_smoothing},
          {"epochs", rc.train.epochs},
          {"batch_tokens", rc.train.batch_tokens},
          {"seed", rc.train.seed}}},
        {"data", {{"train", rc.train_data}, {"valid", rc.valid_data}}}};
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open run config " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(buf.str());
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace gtrans
