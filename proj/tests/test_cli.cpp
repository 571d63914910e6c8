#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

namespace {

namespace fs = std::filesystem;

struct CmdResult {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

fs::path work_dir() {
    static fs::path dir = [] {
        fs::path d = fs::path(testing::TempDir()) / "gtrans_cli_tests";
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

CmdResult run_cli(const std::string& args) {
    static int call = 0;
    const fs::path out = work_dir() / ("out_" + std::to_string(call) + ".txt");
    const fs::path err = work_dir() / ("err_" + std::to_string(call) + ".txt");
    ++call;
    const std::string cmd = std::string(GTRANS_CLI_PATH) + " " + args + " > " + out.string() +
                            " 2> " + err.string();
    const int raw = std::system(cmd.c_str());
    CmdResult r;
    r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

int count_lines(const std::string& s) {
    int n = 0;
    for (char c : s) n += c == '\n';
    return n;
}

// One tiny trained run shared by the translate/eval/analyze tests.
const fs::path& smoke_run() {
    static fs::path dir = [] {
        const fs::path d = work_dir() / "smoke";
        const fs::path train = work_dir() / "train.tsv";
        const fs::path valid = work_dir() / "valid.tsv";
        CmdResult g1 = run_cli("gen-data copy --vocab 12 --min-len 2 --max-len 6 --n 200 --seed 1 --out " +
                               train.string());
        CmdResult g2 = run_cli("gen-data copy --vocab 12 --min-len 2 --max-len 6 --n 30 --seed 2 --out " +
                               valid.string());
        CmdResult t = run_cli(
            "train --data " + train.string() + " --valid " + valid.string() + " --out-dir " +
            d.string() +
            " --enc-layers 2 --dec-layers 2 --enc-group-size 1 --dec-group-size 1"
            " --model-dim 16 --ffn-dim 32 --heads 2 --dropout 0 --warmup 60 --epochs 2"
            " --batch-tokens 256 --label-smoothing 0 --seed 5");
        EXPECT_EQ(g1.code, 0) << g1.err;
        EXPECT_EQ(g2.code, 0) << g2.err;
        EXPECT_EQ(t.code, 0) << t.err;
        return d;
    }();
    return dir;
}

}  // namespace

TEST(GenData, SameFlagsSameBytes) {
    const fs::path a = work_dir() / "gen_a.tsv";
    const fs::path b = work_dir() / "gen_b.tsv";
    ASSERT_EQ(run_cli("gen-data reverse --vocab 9 --min-len 1 --max-len 4 --n 50 --seed 7 --out " +
                      a.string())
                  .code,
              0);
    ASSERT_EQ(run_cli("gen-data reverse --vocab 9 --min-len 1 --max-len 4 --n 50 --seed 7 --out " +
                      b.string())
                  .code,
              0);
    const std::string bytes = slurp(a);
    EXPECT_EQ(bytes, slurp(b));
    EXPECT_EQ(count_lines(bytes), 50);
}

TEST(GenData, UnknownTaskIsAUsageError) {
    CmdResult r = run_cli("gen-data shuffle --out nowhere.tsv");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("copy"), std::string::npos);
    EXPECT_NE(r.err.find("sort"), std::string::npos);
}

TEST(Train, WritesCheckpointsMetricsAndTraces) {
    const fs::path& d = smoke_run();
    EXPECT_TRUE(fs::exists(d / "best.ckpt"));
    EXPECT_TRUE(fs::exists(d / "last.ckpt"));
    EXPECT_TRUE(fs::exists(d / "weight_trace.csv"));
    EXPECT_TRUE(fs::exists(d / "gradient_norms.csv"));

    std::ifstream in(d / "metrics.jsonl");
    std::string line;
    int rows = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        EXPECT_TRUE(j.contains("epoch"));
        EXPECT_TRUE(j.contains("train_loss"));
        EXPECT_TRUE(j.contains("valid_loss"));
        EXPECT_TRUE(j.contains("valid_token_acc"));
        EXPECT_TRUE(j.contains("lr"));
        EXPECT_TRUE(j.at("psi").is_array());
        ++rows;
    }
    EXPECT_EQ(rows, 2);
}

TEST(Train, ConfigFileWorksAndFlagsWin) {
    const fs::path& d = smoke_run();  // builds the data files
    const fs::path cfg = work_dir() / "run_cfg.json";
    {
        std::ofstream out(cfg);
        out << R"({"schema_version":1,
                   "model":{"enc_layers":2,"dec_layers":2,"enc_group_size":1,"dec_group_size":1,
                            "model_dim":16,"ffn_dim":32,"heads":2,"dropout":0.0},
                   "train":{"epochs":1,"warmup_steps":60,"batch_tokens":256,"label_smoothing":0.0,"seed":5},
                   "data":{"train":")"
            << (work_dir() / "train.tsv").string() << R"(","valid":")"
            << (work_dir() / "valid.tsv").string() << R"("}})";
    }
    (void)d;
    const fs::path out_dir = work_dir() / "cfg_run";
    CmdResult r = run_cli("train --config " + cfg.string() + " --out-dir " + out_dir.string() +
                          " --epochs 3");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(count_lines(slurp(out_dir / "metrics.jsonl")), 3);  // flag beat the file's 1
}

TEST(Train, UnknownConfigKeyFailsBeforeAnyCompute) {
    const fs::path cfg = work_dir() / "bad_cfg.json";
    std::ofstream(cfg) << R"({"schema_version":1,"model":{"enc_layerz":2}})";
    const fs::path out_dir = work_dir() / "never_created";
    CmdResult r = run_cli("train --config " + cfg.string() + " --out-dir " + out_dir.string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("enc_layerz"), std::string::npos);
    EXPECT_FALSE(fs::exists(out_dir));
}

TEST(Train, MissingDataPathsAreAUsageError) {
    CmdResult r = run_cli("train --out-dir " + (work_dir() / "no_data").string());
    EXPECT_EQ(r.code, 2);
}

TEST(Translate, PreservesLineCountAndIsReproducible) {
    const fs::path& d = smoke_run();
    const fs::path src = work_dir() / "src.txt";
    std::ofstream(src) << "5 6 7\n\n9 8\n";  // middle line deliberately empty
    const fs::path h1 = work_dir() / "hyp1.txt";
    const fs::path h2 = work_dir() / "hyp2.txt";
    ASSERT_EQ(run_cli("translate --ckpt " + (d / "best.ckpt").string() + " --input " +
                      src.string() + " --output " + h1.string() + " --beam 2")
                  .code,
              0);
    ASSERT_EQ(run_cli("translate --ckpt " + (d / "best.ckpt").string() + " --input " +
                      src.string() + " --output " + h2.string() + " --beam 2")
                  .code,
              0);
    EXPECT_EQ(count_lines(slurp(h1)), 3);
    EXPECT_EQ(slurp(h1), slurp(h2));
}

TEST(Translate, FullGroupRangeFlagChangesNothing) {
    const fs::path& d = smoke_run();
    const fs::path src = work_dir() / "src2.txt";
    std::ofstream(src) << "4 5\n6 7 8\n";
    const fs::path plain = work_dir() / "plain.txt";
    const fs::path ranged = work_dir() / "ranged.txt";
    ASSERT_EQ(run_cli("translate --ckpt " + (d / "best.ckpt").string() + " --input " +
                      src.string() + " --output " + plain.string())
                  .code,
              0);
    ASSERT_EQ(run_cli("translate --ckpt " + (d / "best.ckpt").string() + " --input " +
                      src.string() + " --output " + ranged.string() + " --decoder-groups 1:2")
                  .code,
              0);
    EXPECT_EQ(slurp(plain), slurp(ranged));
}

TEST(Translate, MalformedPruneFlagsAreUsageErrors) {
    const fs::path& d = smoke_run();
    const std::string base = "translate --ckpt " + (d / "best.ckpt").string() + " --input " +
                             (work_dir() / "src.txt").string();
    EXPECT_EQ(run_cli(base + " --decoder-groups 1-2").code, 2);
    EXPECT_EQ(run_cli(base + " --decoder-groups 0:9").code, 2);
    EXPECT_EQ(run_cli(base + " --encoder-keep 7").code, 2);
    EXPECT_EQ(run_cli(base + " --beam 0").code, 2);
}

TEST(Translate, MissingCheckpointUsesTheCheckpointExitCode) {
    CmdResult r = run_cli("translate --ckpt /nonexistent.ckpt --input /nonexistent.txt");
    EXPECT_EQ(r.code, 5);
}

TEST(EvalBleu, IdenticalFilesScoreOneHundred) {
    const fs::path f = work_dir() / "same.txt";
    std::ofstream(f) << "a b c\nd e\n";
    CmdResult r = run_cli("eval-bleu --hyp " + f.string() + " --ref " + f.string());
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = nlohmann::json::parse(r.out);
    EXPECT_DOUBLE_EQ(j.at("bleu").get<double>(), 100.0);
}

TEST(EvalBleu, LineCountMismatchNamesBothCounts) {
    const fs::path h = work_dir() / "h3.txt";
    const fs::path r2 = work_dir() / "r2.txt";
    std::ofstream(h) << "a\nb\nc\n";
    std::ofstream(r2) << "a\nb\n";
    CmdResult r = run_cli("eval-bleu --hyp " + h.string() + " --ref " + r2.string());
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.err.find("3"), std::string::npos);
    EXPECT_NE(r.err.find("2"), std::string::npos);
}

TEST(Analyze, EmitsOneRowPerBatch) {
    const fs::path& d = smoke_run();
    CmdResult r = run_cli("analyze --ckpt " + (d / "best.ckpt").string() + " --data " +
                          (work_dir() / "valid.tsv").string() + " --batch-tokens 8192");
    ASSERT_EQ(r.code, 0) << r.err;
    ASSERT_EQ(count_lines(r.out), 2);  // header plus the single batch
    std::istringstream in(r.out);
    std::string header, row;
    std::getline(in, header);
    EXPECT_EQ(header, "batch,enc_1,enc_2,dec_1,dec_2,other,global");
    std::getline(in, row);
    std::istringstream cells(row);
    std::string cell;
    std::getline(cells, cell, ',');
    EXPECT_EQ(cell, "0");
    while (std::getline(cells, cell, ',')) EXPECT_GT(std::stod(cell), 0.0);
}

TEST(Help, ListsTheHeadlineDefaults) {
    CmdResult tr = run_cli("train --help");
    EXPECT_EQ(tr.code, 0);
    EXPECT_NE(tr.out.find("--enc-group-size"), std::string::npos);
    EXPECT_NE(tr.out.find("3"), std::string::npos);
    EXPECT_NE(tr.out.find("--dec-group-size"), std::string::npos);
    CmdResult tl = run_cli("translate --help");
    EXPECT_EQ(tl.code, 0);
    EXPECT_NE(tl.out.find("--beam"), std::string::npos);
    EXPECT_NE(tl.out.find("8"), std::string::npos);
}
