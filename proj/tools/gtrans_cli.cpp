#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "CLI11.hpp"
#include "gtrans/checkpoint.hpp"
#include "gtrans/data.hpp"
#include "gtrans/eval.hpp"
#include "gtrans/inference.hpp"
#include "gtrans/run_config.hpp"

using namespace gtrans;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;
constexpr int kExitCheckpoint = 5;

struct Exit {
    int code;
    std::string msg;
};

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

PruneSpec parse_prune_flags(int encoder_keep, const std::string& groups) {
    PruneSpec p;
    p.encoder_keep = encoder_keep;
    if (groups.empty()) return p;
    const auto colon = groups.find(':');
    std::size_t lo_end = 0, hi_end = 0;
    try {
        if (colon == std::string::npos) throw std::invalid_argument("no colon");
        p.decoder_lo = std::stoi(groups.substr(0, colon), &lo_end);
        p.decoder_hi = std::stoi(groups.substr(colon + 1), &hi_end);
    } catch (const std::exception&) {
        throw ValueError("--decoder-groups expects a:b, got \"" + groups + "\"");
    }
    if (lo_end != colon || hi_end != groups.size() - colon - 1)
        throw ValueError("--decoder-groups expects a:b, got \"" + groups + "\"");
    return p;
}

// TSV pairs encoded with an existing vocabulary (unknowns fall back to <unk>),
// for files that must match a trained model or a training-side vocabulary.
std::vector<SentencePair> load_tsv_with(const std::string& path, const Vocabulary& vocab,
                                        int max_len) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path);
    std::vector<SentencePair> pairs;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto tab = line.find('\t');
        if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
            throw ParseError(path + ":" + std::to_string(line_no) + ": expected exactly one tab");
        SentencePair p = frame_pair(vocab.encode(split_ws(line.substr(0, tab))),
                                    vocab.encode(split_ws(line.substr(tab + 1))));
        if (static_cast<int>(p.src.size()) > max_len || static_cast<int>(p.tgt.size()) > max_len)
            continue;
        pairs.push_back(std::move(p));
    }
    if (pairs.empty()) throw ParseError(path + ": no usable pairs");
    return pairs;
}

std::string surface_line(const std::vector<TokenId>& ids, const Vocabulary& vocab) {
    std::string out;
    for (TokenId t : ids) {
        if (t == kEosId || t == kBosId || t == kPadId) continue;
        if (!out.empty()) out += ' ';
        out += vocab.token_of(t);
    }
    return out;
}

void write_text(const std::string& path, const std::string& body) {
    if (path == "-") {
        std::cout << body;
        return;
    }
    std::ofstream out(path);
    if (!out) throw Exit{kExitData, "cannot write " + path};
    out << body;
}

int run_gen_data(const std::string& task, int vocab, int min_len, int max_len, int n,
                 std::uint64_t seed, const std::string& out) {
    try {
        const SynthTask t = parse_synth_task(task);
        const auto pairs = gen_synthetic(t, vocab, min_len, max_len, n, seed);
        write_tsv(out, pairs, synthetic_vocab(vocab));
        std::cout << "wrote " << pairs.size() << " pairs to " << out << "\n";
        return 0;
    } catch (const ValueError& e) {
        throw Exit{kExitUsage, e.what()};
    }
}

int run_train(RunConfig rc, const std::string& out_dir) {
    std::vector<SentencePair> train_pairs, valid_pairs;
    Vocabulary vocab;
    try {
        TsvCorpus corpus = load_tsv(rc.train_data, rc.model.max_len);
        train_pairs = std::move(corpus.pairs);
        vocab = std::move(corpus.vocab);
        valid_pairs = load_tsv_with(rc.valid_data, vocab, rc.model.max_len);
        if (corpus.skipped > 0)
            std::cerr << "skipped " << corpus.skipped << " over-length training pairs\n";
    } catch (const Error& e) {
        throw Exit{kExitData, e.what()};
    }
    rc.model.src_vocab = static_cast<int>(vocab.size());
    rc.model.tgt_vocab = static_cast<int>(vocab.size());

    auto problems = config_violations(rc.model);
    for (const auto& p : train_config_violations(rc.train)) problems.push_back(p);
    if (!problems.empty()) {
        std::string msg = "invalid configuration:";
        for (const auto& p : problems) msg += "\n  " + p;
        throw Exit{kExitUsage, msg};
    }

    std::filesystem::create_directories(out_dir);
    {
        std::ofstream cfg_out(out_dir + "/config.json");
        cfg_out << to_json(rc).dump(2) << "\n";
    }
    std::ofstream metrics(out_dir + "/metrics.jsonl");
    if (!metrics) throw Exit{kExitData, "cannot write " + out_dir + "/metrics.jsonl"};

    Model<float> m = build_model<float>(rc.model, rc.train.seed);
    TrainState<float> st(rc.train.seed);
    std::vector<WeightTrace> traces;
    bool ckpt_saved = false;

    auto on_epoch = [&](const EpochLog<float>& log) {
        nlohmann::json rec{{"epoch", log.epoch},
                           {"train_loss", log.train_loss},
                           {"valid_loss", log.divergence ? nlohmann::json() : nlohmann::json(log.valid_loss)},
                           {"valid_token_acc", log.divergence ? nlohmann::json() : nlohmann::json(log.valid_acc)},
                           {"lr", log.lr},
                           {"psi", log.psi}};
        if (log.divergence)
            rec["divergence"] = {{"step", log.divergence->step}, {"reason", log.divergence->reason}};
        metrics << rec.dump() << "\n";
        metrics.flush();
        if (rc.model.fusion) traces.push_back(capture_weight_trace(m, st.step));
        std::cout << "epoch " << log.epoch << " train " << log.train_loss;
        if (!log.divergence)
            std::cout << " valid " << log.valid_loss << " acc " << log.valid_acc << " lr " << log.lr
                      << (log.best ? " *" : "");
        std::cout << "\n";
    };
    auto on_best = [&](const Model<float>& best, const TrainState<float>& bst) {
        save_checkpoint(best, bst, vocab, vocab, out_dir + "/best.ckpt");
        ckpt_saved = true;
    };

    std::vector<EpochLog<float>> logs;
    try {
        logs = train_loop(m, train_pairs, valid_pairs, st, rc.train, on_epoch, on_best);
        save_checkpoint(m, st, vocab, vocab, out_dir + "/last.ckpt");
    } catch (const CheckpointError& e) {
        throw Exit{kExitCheckpoint, e.what()};
    }

    if (!traces.empty()) {
        std::ofstream wt(out_dir + "/weight_trace.csv");
        wt << export_weight_trace(traces);
    }
    {
        std::ofstream gn(out_dir + "/gradient_norms.csv");
        gn << "epoch";
        for (int l = 1; l <= rc.model.enc_layers; ++l) gn << ",enc_mean_" << l;
        for (int l = 1; l <= rc.model.enc_layers; ++l) gn << ",enc_min_" << l;
        gn << "\n";
        char buf[40];
        for (const auto& log : logs) {
            gn << log.epoch;
            for (double v : log.enc_grad_norm_mean) {
                std::snprintf(buf, sizeof buf, ",%.9g", v);
                gn << buf;
            }
            for (double v : log.enc_grad_norm_min) {
                std::snprintf(buf, sizeof buf, ",%.9g", v);
                gn << buf;
            }
            gn << "\n";
        }
    }

    if (!logs.empty() && logs.back().divergence) {
        const DivergenceReport& d = *logs.back().divergence;
        std::cerr << "training diverged at step " << d.step << ": " << d.reason << "\n";
        return kExitDivergence;
    }
    if (!ckpt_saved) std::cerr << "note: validation never improved; only last.ckpt written\n";
    return 0;
}

int run_translate(const std::string& ckpt, const std::string& input, const std::string& output,
                  int beam, int max_len, double length_penalty, int encoder_keep,
                  const std::string& groups) {
    if (beam < 1) throw Exit{kExitUsage, "--beam must be >= 1"};
    if (length_penalty < 0) throw Exit{kExitUsage, "--length-penalty must be >= 0"};
    PruneSpec prune;
    try {
        prune = parse_prune_flags(encoder_keep, groups);
    } catch (const ValueError& e) {
        throw Exit{kExitUsage, e.what()};
    }
    LoadedCheckpoint<float> lc = [&] {
        try {
            return load_checkpoint<float>(ckpt);
        } catch (const CheckpointError& e) {
            throw Exit{kExitCheckpoint, e.what()};
        }
    }();
    try {
        resolve_prune(lc.model, prune);
    } catch (const ValueError& e) {
        throw Exit{kExitUsage, e.what()};
    }

    std::string body;
    try {
        const auto lines = read_lines(input);
        for (std::size_t i = 0; i < lines.size(); ++i) {
            std::vector<TokenId> src = lc.src_vocab.encode(split_ws(lines[i]));
            src.push_back(kEosId);
            try {
                const Hypothesis h =
                    beam_search(lc.model, src, beam, max_len, length_penalty, prune);
                body += surface_line(h.ids, lc.tgt_vocab);
                body += '\n';
            } catch (const Error& e) {
                throw ParseError("line " + std::to_string(i + 1) + ": " + e.what());
            }
        }
    } catch (const Error& e) {
        throw Exit{kExitData, e.what()};
    }
    write_text(output, body);
    return 0;
}

int run_eval_bleu(const std::string& hyp_path, const std::string& ref_path) {
    try {
        const auto hyp_lines = read_lines(hyp_path);
        const auto ref_lines = read_lines(ref_path);
        if (hyp_lines.size() != ref_lines.size())
            throw ParseError(hyp_path + " has " + std::to_string(hyp_lines.size()) +
                             " lines but " + ref_path + " has " +
                             std::to_string(ref_lines.size()));
        std::unordered_map<std::string, TokenId> ids;
        auto to_ids = [&](const std::vector<std::string>& lines) {
            std::vector<std::vector<TokenId>> out;
            for (const auto& line : lines) {
                std::vector<TokenId> row;
                for (const auto& tok : split_ws(line)) {
                    auto [it, fresh] = ids.emplace(tok, static_cast<TokenId>(ids.size()));
                    (void)fresh;
                    row.push_back(it->second);
                }
                out.push_back(std::move(row));
            }
            return out;
        };
        const BleuReport rep = bleu4(to_ids(hyp_lines), to_ids(ref_lines));
        std::cout << to_json(rep).dump(2) << "\n";
        return 0;
    } catch (const Error& e) {
        throw Exit{kExitData, e.what()};
    }
}

int run_analyze(const std::string& ckpt, const std::string& data, const std::string& output,
                int batch_tokens, double smoothing, std::uint64_t seed) {
    LoadedCheckpoint<float> lc = [&] {
        try {
            return load_checkpoint<float>(ckpt);
        } catch (const CheckpointError& e) {
            throw Exit{kExitCheckpoint, e.what()};
        }
    }();
    std::vector<Batch> batches;
    try {
        const auto pairs = load_tsv_with(data, lc.src_vocab, lc.model.cfg.max_len);
        batches = make_batches(pairs, batch_tokens, seed);
    } catch (const Error& e) {
        throw Exit{kExitData, e.what()};
    }

    std::string body = "batch";
    for (int l = 1; l <= lc.model.cfg.enc_layers; ++l) body += ",enc_" + std::to_string(l);
    for (int l = 1; l <= lc.model.cfg.dec_layers; ++l) body += ",dec_" + std::to_string(l);
    body += ",other,global\n";
    char buf[40];
    auto put = [&](double v) {
        std::snprintf(buf, sizeof buf, ",%.9g", v);
        body += buf;
    };
    for (std::size_t b = 0; b < batches.size(); ++b) {
        const GradientReport rep = gradient_norm_report(lc.model, batches[b], smoothing,
                                                        static_cast<std::int64_t>(b));
        body += std::to_string(b);
        for (double v : rep.enc_layer_norms) put(v);
        for (double v : rep.dec_layer_norms) put(v);
        put(rep.other_norm);
        put(rep.global_norm);
        body += '\n';
    }
    write_text(output, body);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"group-fused transformer: data, training, translation, analysis"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "write a synthetic parallel corpus as TSV");
    std::string gen_task;
    int gen_vocab = 20, gen_min = 2, gen_max = 12, gen_n = 10000;
    std::uint64_t gen_seed = 1;
    std::string gen_out;
    gen->add_option("task", gen_task, "task: copy, reverse, or sort")->required();
    gen->add_option("--vocab", gen_vocab, "vocabulary size including 4 reserved tokens")
        ->capture_default_str();
    gen->add_option("--min-len", gen_min, "shortest source length")->capture_default_str();
    gen->add_option("--max-len", gen_max, "longest source length")->capture_default_str();
    gen->add_option("--n", gen_n, "number of pairs")->capture_default_str();
    gen->add_option("--seed", gen_seed, "generator seed")->capture_default_str();
    gen->add_option("--out", gen_out, "output TSV path")->required();

    // train
    auto* tr = app.add_subcommand("train", "train a model and log metrics");
    std::string tr_config, tr_data, tr_valid, tr_out_dir;
    RunConfig flag_rc;
    std::string tr_norm = "post";
    bool tr_fusion = true, tr_tie = true;
    tr->add_option("--config", tr_config, "run-config JSON (flags override it)");
    tr->add_option("--data", tr_data, "training TSV");
    tr->add_option("--valid", tr_valid, "validation TSV");
    tr->add_option("--out-dir", tr_out_dir, "output directory")->required();
    auto* o_enc_l = tr->add_option("--enc-layers", flag_rc.model.enc_layers, "encoder layers")
                        ->capture_default_str();
    auto* o_dec_l = tr->add_option("--dec-layers", flag_rc.model.dec_layers, "decoder layers")
                        ->capture_default_str();
    auto* o_enc_g = tr->add_option("--enc-group-size", flag_rc.model.enc_group_size,
                                   "encoder layers per group")
                        ->capture_default_str();
    auto* o_dec_g = tr->add_option("--dec-group-size", flag_rc.model.dec_group_size,
                                   "decoder layers per group")
                        ->capture_default_str();
    auto* o_dim = tr->add_option("--model-dim", flag_rc.model.model_dim, "model width")
                      ->capture_default_str();
    auto* o_ffn = tr->add_option("--ffn-dim", flag_rc.model.ffn_dim, "feed-forward width")
                      ->capture_default_str();
    auto* o_heads =
        tr->add_option("--heads", flag_rc.model.heads, "attention heads")->capture_default_str();
    auto* o_drop = tr->add_option("--dropout", flag_rc.model.dropout, "dropout probability")
                       ->capture_default_str();
    auto* o_norm = tr->add_option("--norm-style", tr_norm, "post or pre")->capture_default_str();
    auto* o_fuse = tr->add_flag("--fusion,!--no-fusion", tr_fusion, "group fusion on/off")
                       ->capture_default_str();
    auto* o_tie = tr->add_flag("--tie-embeddings,!--no-tie-embeddings", tr_tie,
                               "tie target embedding and output projection")
                      ->capture_default_str();
    auto* o_maxlen = tr->add_option("--max-len", flag_rc.model.max_len, "length cap")
                         ->capture_default_str();
    auto* o_warm = tr->add_option("--warmup", flag_rc.train.warmup_steps, "warmup steps")
                       ->capture_default_str();
    auto* o_epochs =
        tr->add_option("--epochs", flag_rc.train.epochs, "training epochs")->capture_default_str();
    auto* o_bt = tr->add_option("--batch-tokens", flag_rc.train.batch_tokens,
                                "padded target tokens per batch")
                     ->capture_default_str();
    auto* o_ls = tr->add_option("--label-smoothing", flag_rc.train.label_smoothing,
                                "label smoothing mass")
                     ->capture_default_str();
    auto* o_clip = tr->add_option("--clip-norm", flag_rc.train.clip_norm,
                                  "gradient norm cap, 0 disables")
                       ->capture_default_str();
    auto* o_seed =
        tr->add_option("--seed", flag_rc.train.seed, "training seed")->capture_default_str();

    // translate
    auto* tl = app.add_subcommand("translate", "decode a text file line by line");
    std::string tl_ckpt, tl_input, tl_output = "-", tl_groups;
    int tl_beam = 8, tl_maxlen = -1, tl_keep = -1;
    double tl_lp = 1.0;
    tl->add_option("--ckpt", tl_ckpt, "checkpoint path")->required();
    tl->add_option("--input", tl_input, "source text, one sentence per line")->required();
    tl->add_option("--output", tl_output, "output path, - for stdout")->capture_default_str();
    tl->add_option("--beam", tl_beam, "beam width, 1 = greedy")->capture_default_str();
    tl->add_option("--max-len", tl_maxlen, "generation cap, -1 = model max")
        ->capture_default_str();
    tl->add_option("--length-penalty", tl_lp, "score = log P / len^penalty")
        ->capture_default_str();
    tl->add_option("--encoder-keep", tl_keep, "run only the bottom K encoder layers, -1 = all")
        ->capture_default_str();
    tl->add_option("--decoder-groups", tl_groups, "decoder group range a:b, default all");

    // eval-bleu
    auto* ev = app.add_subcommand("eval-bleu", "corpus BLEU-4 of hypothesis vs reference");
    std::string ev_hyp, ev_ref;
    ev->add_option("--hyp", ev_hyp, "hypothesis text")->required();
    ev->add_option("--ref", ev_ref, "reference text")->required();

    // analyze
    auto* an = app.add_subcommand("analyze", "per-layer gradient norms over a data file");
    std::string an_ckpt, an_data, an_out = "-";
    int an_bt = 2048;
    double an_smooth = 0.0;
    std::uint64_t an_seed = 1;
    an->add_option("--ckpt", an_ckpt, "checkpoint path")->required();
    an->add_option("--data", an_data, "TSV data file")->required();
    an->add_option("--output", an_out, "CSV path, - for stdout")->capture_default_str();
    an->add_option("--batch-tokens", an_bt, "padded target tokens per batch")
        ->capture_default_str();
    an->add_option("--smoothing", an_smooth, "label smoothing for the probed loss")
        ->capture_default_str();
    an->add_option("--seed", an_seed, "batching seed")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (gen->parsed())
            return run_gen_data(gen_task, gen_vocab, gen_min, gen_max, gen_n, gen_seed, gen_out);
        if (tr->parsed()) {
            RunConfig rc;
            if (!tr_config.empty()) {
                try {
                    rc = load_run_config(tr_config);
                } catch (const ParseError& e) {
                    throw Exit{kExitUsage, e.what()};
                }
            }
            if (!tr_data.empty()) rc.train_data = tr_data;
            if (!tr_valid.empty()) rc.valid_data = tr_valid;
            if (rc.train_data.empty() || rc.valid_data.empty())
                throw Exit{kExitUsage, "train needs --data and --valid (or config data paths)"};
            if (o_enc_l->count()) rc.model.enc_layers = flag_rc.model.enc_layers;
            if (o_dec_l->count()) rc.model.dec_layers = flag_rc.model.dec_layers;
            if (o_enc_g->count()) rc.model.enc_group_size = flag_rc.model.enc_group_size;
            if (o_dec_g->count()) rc.model.dec_group_size = flag_rc.model.dec_group_size;
            if (o_dim->count()) rc.model.model_dim = flag_rc.model.model_dim;
            if (o_ffn->count()) rc.model.ffn_dim = flag_rc.model.ffn_dim;
            if (o_heads->count()) rc.model.heads = flag_rc.model.heads;
            if (o_drop->count()) rc.model.dropout = flag_rc.model.dropout;
            if (o_norm->count()) {
                if (tr_norm != "post" && tr_norm != "pre")
                    throw Exit{kExitUsage, "--norm-style must be post or pre"};
                rc.model.norm_style = tr_norm == "post" ? NormStyle::post : NormStyle::pre;
            }
            if (o_fuse->count()) rc.model.fusion = tr_fusion;
            if (o_tie->count()) rc.model.tie_embeddings = tr_tie;
            if (o_maxlen->count()) rc.model.max_len = flag_rc.model.max_len;
            if (o_warm->count()) rc.train.warmup_steps = flag_rc.train.warmup_steps;
            if (o_epochs->count()) rc.train.epochs = flag_rc.train.epochs;
            if (o_bt->count()) rc.train.batch_tokens = flag_rc.train.batch_tokens;
            if (o_ls->count()) rc.train.label_smoothing = flag_rc.train.label_smoothing;
            if (o_clip->count()) rc.train.clip_norm = flag_rc.train.clip_norm;
            if (o_seed->count()) rc.train.seed = flag_rc.train.seed;
            return run_train(rc, tr_out_dir);
        }
        if (tl->parsed())
            return run_translate(tl_ckpt, tl_input, tl_output, tl_beam, tl_maxlen, tl_lp, tl_keep,
                                 tl_groups);
        if (ev->parsed()) return run_eval_bleu(ev_hyp, ev_ref);
        if (an->parsed()) return run_analyze(an_ckpt, an_data, an_out, an_bt, an_smooth, an_seed);
    } catch (const Exit& e) {
        std::cerr << "error: " << e.msg << "\n";
        return e.code;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
