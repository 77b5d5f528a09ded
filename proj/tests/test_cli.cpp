#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "deeptraverse/data.hpp"

namespace dt {
namespace {

namespace fs = std::filesystem;

struct Result {
    int code = 0;
    std::string out;
    std::string err;
};

Result run_cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    Result r;
    r.code = cli::run(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

class CliTest : public ::testing::Test {
protected:
    fs::path root;

    void SetUp() override {
        root = fs::temp_directory_path() /
               ("dt_test_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(root);
        fs::create_directories(root);
    }
    void TearDown() override { fs::remove_all(root); }

    // A blobs run small enough for a unit test: 8x8 images, 96 samples.
    fs::path small_config(const std::string& extra = "") {
        const fs::path p = root / "small.cfg";
        std::ofstream(p) << "config_version = 1\n"
                            "dataset = blobs\n"
                            "blobs_train = 96\n"
                            "blobs_test = 48\n"
                            "input_channels = 3\n"
                            "input_height = 8\n"
                            "input_width = 8\n"
                            "num_classes = 4\n"
                            "stem_channels = 8\n"
                            "stages = 8x1s1, 16x1s2\n"
                            "reduction = 4\n"
                            "recursion = 2\n"
                            "epochs = 3\n"
                            "batch_size = 16\n"
                            "learning_rate = 0.05\n"
                            "augment = flipcrop\n"
                         << extra;
        return p;
    }
};

TEST_F(CliTest, TrainWritesRunDirectoryWithOneRowPerEpoch) {
    const Result r = run_cli({"train", "--config", small_config().string(), "--out", (root / "run").string(),
                              "--epochs", "1"});
    ASSERT_EQ(r.code, cli::kExitOk) << r.err;
    for (const char* f : {"manifest.txt", "metrics.csv", "cost.csv", "last.ckpt", "best.ckpt"})
        EXPECT_TRUE(fs::exists(root / "run" / f)) << f;
    std::istringstream metrics(read_text(root / "run" / "metrics.csv"));
    std::string line;
    int lines = 0;
    while (std::getline(metrics, line)) ++lines;
    EXPECT_EQ(lines, 2);
    const std::string manifest = read_text(root / "run" / "manifest.txt");
    EXPECT_NE(manifest.find("config_hash"), std::string::npos);
    EXPECT_NE(manifest.find("data.mean"), std::string::npos);
    EXPECT_NE(r.out.find("mean"), std::string::npos);
}

TEST_F(CliTest, TrainIsDeterministicAcrossRunDirectories) {
    const fs::path cfg = small_config();
    ASSERT_EQ(run_cli({"train", "--config", cfg.string(), "--out", (root / "a").string()}).code, 0);
    ASSERT_EQ(run_cli({"train", "--config", cfg.string(), "--out", (root / "b").string()}).code, 0);
    EXPECT_EQ(read_text(root / "a" / "metrics.csv"), read_text(root / "b" / "metrics.csv"));
    const std::vector<std::uint8_t> a = read_file(root / "a" / "last.ckpt");
    const std::vector<std::uint8_t> b = read_file(root / "b" / "last.ckpt");
    EXPECT_EQ(a, b);
}

TEST_F(CliTest, ExistingRunDirectoryIsRefused) {
    fs::create_directories(root / "run");
    const Result r = run_cli({"train", "--config", small_config().string(), "--out", (root / "run").string()});
    EXPECT_EQ(r.code, cli::kExitUsage);
}

TEST_F(CliTest, MissingDataDirectoryNamesPath) {
    const fs::path cfg = root / "mnist.cfg";
    fs::copy_file(fs::path(DT_SOURCE_DIR) / "configs/dt_tiny_mnist.cfg", cfg);
    const std::string missing = (root / "no_such_data").string();
    const Result r =
        run_cli({"train", "--config", cfg.string(), "--data", missing, "--out", (root / "run").string()});
    EXPECT_EQ(r.code, cli::kExitUsage);
    EXPECT_NE(r.err.find(missing), std::string::npos) << r.err;
}

TEST_F(CliTest, MnistSingleEpochFromDataRoot) {
    const char* env = std::getenv("DT_DATA_DIR");
    const fs::path data = env && *env ? fs::path(env) : fs::path("/root/data");
    if (!fs::exists(data / "mnist" / "t10k-images-idx3-ubyte")) GTEST_SKIP() << "no MNIST under " << data;
    const Result r = run_cli({"train", "--config", (fs::path(DT_SOURCE_DIR) / "configs/dt_tiny_mnist.cfg").string(),
                              "--data", data.string(), "--out", (root / "run").string(), "--epochs", "1",
                              "--seed", "1", "--train-limit", "256", "--test-limit", "128"});
    ASSERT_EQ(r.code, 0) << r.err;
    std::istringstream metrics(read_text(root / "run" / "metrics.csv"));
    std::string line;
    int lines = 0;
    while (std::getline(metrics, line)) ++lines;
    EXPECT_EQ(lines, 2);
}

TEST_F(CliTest, EvalReportsAboveChance) {
    ASSERT_EQ(run_cli({"train", "--config", small_config().string(), "--out", (root / "run").string()}).code, 0);
    const Result r = run_cli({"eval", "--checkpoint", (root / "run" / "best.ckpt").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const std::size_t at = r.out.find("RESULT top1=");
    ASSERT_NE(at, std::string::npos) << r.out;
    const double top1 = std::stod(r.out.substr(at + 12));
    EXPECT_GT(top1, 25.0);
}

TEST_F(CliTest, CorruptCheckpointIsFormatError) {
    std::ofstream(root / "bad.ckpt", std::ios::binary) << "DTRVCKPT\x01\x00\x00\x00garbage";
    const Result r = run_cli({"eval", "--checkpoint", (root / "bad.ckpt").string()});
    EXPECT_EQ(r.code, cli::kExitUsage);
    EXPECT_NE(r.err.find("format error"), std::string::npos) << r.err;
}

TEST_F(CliTest, UnknownConfigKeyIsRefused) {
    const Result r = run_cli({"train", "--config", small_config("learning_rte = 0.1\n").string(), "--out",
                              (root / "run").string()});
    EXPECT_EQ(r.code, cli::kExitUsage);
    EXPECT_NE(r.err.find("learning_rte"), std::string::npos) << r.err;
}

TEST_F(CliTest, MultipleThreadsAndFp32AreRefused) {
    const std::string cfg = small_config().string();
    EXPECT_EQ(run_cli({"train", "--config", cfg, "--out", (root / "a").string(), "--threads", "4"}).code,
              cli::kExitUsage);
    EXPECT_EQ(run_cli({"train", "--config", cfg, "--out", (root / "b").string(), "--precision", "fp32"}).code,
              cli::kExitUsage);
    EXPECT_EQ(run_cli({"frobnicate"}).code, cli::kExitUsage);
}

TEST_F(CliTest, CountSharesParametersAcrossRecursion) {
    const Result r1 = run_cli({"count", "--recursion", "1"});
    const Result r5 = run_cli({"count", "--recursion", "5"});
    ASSERT_EQ(r1.code, 0);
    ASSERT_EQ(r5.code, 0);
    auto csv_fields = [](const std::string& out) {
        const std::size_t at = out.find("DT-Tiny,32,32,");
        std::istringstream row(out.substr(at + 14));
        std::int64_t params = 0, flops = 0;
        char comma = 0;
        row >> params >> comma >> flops;
        return std::pair{params, flops};
    };
    const auto [p1, f1] = csv_fields(r1.out);
    const auto [p5, f5] = csv_fields(r5.out);
    EXPECT_EQ(p1, p5);
    EXPECT_LT(f1, f5);
    std::int64_t previous = 0;
    for (int rec = 1; rec <= 5; ++rec) {
        const auto [p, f] = csv_fields(run_cli({"count", "--recursion", std::to_string(rec)}).out);
        EXPECT_EQ(p, p1);
        EXPECT_GT(f, previous);
        previous = f;
    }
}

TEST_F(CliTest, CountOutputGolden) {
    const Result r = run_cli({"count", "--recursion", "5"});
    ASSERT_EQ(r.code, 0);
    const fs::path golden = fs::path(DT_SOURCE_DIR) / "tests/golden/cli_count_r5.txt";
    if (const char* update = std::getenv("DT_UPDATE_GOLDEN"); update && std::string(update) == "1") {
        std::ofstream(golden, std::ios::binary) << r.out;
        return;
    }
    EXPECT_EQ(r.out, read_text(golden));
}

TEST_F(CliTest, GradcheckPassesAndCatchesInjectedFault) {
    const Result ok = run_cli({"gradcheck"});
    EXPECT_EQ(ok.code, cli::kExitOk) << ok.out;
    EXPECT_NE(ok.out.find("RESULT gradcheck=PASS"), std::string::npos);
    const Result bad = run_cli({"gradcheck", "--inject-fault", "relu"});
    EXPECT_EQ(bad.code, cli::kExitCheckFailed);
    EXPECT_NE(bad.out.find("RESULT gradcheck=FAIL"), std::string::npos);
    EXPECT_EQ(run_cli({"gradcheck", "--precision", "fp32"}).code, cli::kExitUsage);
}

TEST(ConfigHash, MatchesGitBlobHash) {
    // Reference values from `git hash-object --stdin`.
    EXPECT_EQ(cli::git_blob_sha1("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
    EXPECT_EQ(cli::git_blob_sha1(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

}  // namespace
}  // namespace dt
