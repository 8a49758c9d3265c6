#include <gtest/gtest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "owps/cli.hpp"
#include "owps/config.hpp"
#include "owps/trainer.hpp"

using namespace owps;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out;
    std::string err;
};

Run run(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::run_command(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        root_ = fs::temp_directory_path() /
                ("owps_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) + "_" +
                 std::to_string(::getpid()));
        fs::remove_all(root_);
        fs::create_directories(root_);
        RunConfig cfg;
        cfg.model.depth = 2;
        cfg.model.base_channels = 8;
        cfg.data.scene.height = cfg.data.scene.width = 32;
        cfg.data.scene.axis_min = 4.0f;
        cfg.data.scene.axis_max = 7.0f;
        cfg.data.train_count = 4;
        cfg.data.test_count = 2;
        cfg.train.epochs = 1;
        std::ofstream(root_ / "config.json") << to_json(cfg);
    }
    void TearDown() override { fs::remove_all(root_); }

    std::string config() const { return (root_ / "config.json").string(); }
    std::string path(const std::string& rel) const { return (root_ / rel).string(); }

    fs::path root_;
};

bool no_staging_left(const fs::path& dir) {
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().filename().string().find(".staging-") != std::string::npos) return false;
    }
    return true;
}

}  // namespace

TEST_F(CliTest, GenDataIsDeterministicAndRecordsManifest) {
    ASSERT_EQ(run({"gen-data", "--config", config(), "--out", path("a"), "--seed", "4"}).code, 0);
    ASSERT_EQ(run({"gen-data", "--config", config(), "--out", path("b"), "--seed", "4"}).code, 0);
    for (const char* rel : {"train/images/0000.png", "train/instance/0003.png", "test/edge/0001.png", "train/manifest.json"}) {
        EXPECT_EQ(slurp(root_ / "a" / rel), slurp(root_ / "b" / rel)) << rel;
    }
    const auto manifest = nlohmann::json::parse(slurp(root_ / "a" / "run_manifest.json"));
    EXPECT_EQ(manifest["command"], "gen-data");
    EXPECT_EQ(manifest["tool_version"], cli::kToolVersion);
    EXPECT_EQ(manifest["seeds"]["train"], 4);
    EXPECT_EQ(manifest["overrides"]["seed"], 4);
    EXPECT_TRUE(manifest.contains("config"));
    EXPECT_TRUE(no_staging_left(root_));
    // Rerunning into an earlier run directory replaces it.
    EXPECT_EQ(run({"gen-data", "--config", config(), "--out", path("a"), "--seed", "5"}).code, 0);
}

TEST_F(CliTest, TrainEvalSegmentChain) {
    ASSERT_EQ(run({"gen-data", "--config", config(), "--out", path("data")}).code, 0);
    const auto tr = run({"train", "--config", config(), "--data", path("data"), "--out", path("run")});
    ASSERT_EQ(tr.code, 0) << tr.err;
    EXPECT_TRUE(fs::exists(root_ / "run" / "model.owps"));
    EXPECT_TRUE(fs::exists(root_ / "run" / "metrics.csv"));
    const auto ev = run({"eval", "--config", config(), "--checkpoint", path("run/model.owps"), "--data", path("data"),
                         "--out", path("eval")});
    ASSERT_EQ(ev.code, 0) << ev.err;
    EXPECT_NE(ev.out.find("count_accuracy"), std::string::npos);
    const auto seg = run({"segment", "--checkpoint", path("run/model.owps"), "--image", path("data/test/images/0000.png"),
                          "--out", path("seg")});
    ASSERT_EQ(seg.code, 0) << seg.err;
    EXPECT_EQ(seg.out.rfind("0000 count ", 0), 0u);
    for (const char* f : {"0000_region.png", "0000_edge.png", "0000_instances.png", "run_manifest.json"}) {
        EXPECT_TRUE(fs::exists(root_ / "seg" / f)) << f;
    }
}

TEST_F(CliTest, SegmentFromOracleProbabilities) {
    BinaryMask region(32, 32), edge(32, 32);
    for (int y = 4; y < 14; ++y)
        for (int x = 4; x < 28; ++x) region.at(y, x) = 1;
    for (int y = 4; y < 14; ++y) edge.at(y, 15) = edge.at(y, 16) = 1;
    for (int y = 20; y < 28; ++y)
        for (int x = 10; x < 18; ++x) region.at(y, x) = 1;
    png::write_mask(root_ / "region.png", region);
    png::write_mask(root_ / "edge.png", edge);
    const auto r = run({"segment", "--region-prob", path("region.png"), "--edge-prob", path("edge.png"), "--out", path("seg")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.out, "segment count 3\n");
    EXPECT_EQ(png::read_instances(root_ / "seg" / "segment_instances.png").count, 3);
    const auto merged = run({"segment", "--region-prob", path("region.png"), "--out", path("seg2")});
    EXPECT_EQ(merged.out, "segment count 2\n");
}

TEST_F(CliTest, LossCurvesCommand) {
    ASSERT_EQ(run({"plot-loss-curves", "--out", path("curves")}).code, 0);
    const auto text = slurp(root_ / "curves" / "loss_curves.csv");
    EXPECT_EQ(text.rfind("p,", 0), 0u);
    EXPECT_GT(std::count(text.begin(), text.end(), '\n'), 50);
}

TEST_F(CliTest, BadInputsFailCleanly) {
    std::ofstream(root_ / "bad.json") << R"({"model":{"depth":3,"bogus":1}})";
    auto r = run({"gen-data", "--config", path("bad.json"), "--out", path("x")});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("bogus"), std::string::npos);
    EXPECT_FALSE(fs::exists(root_ / "x"));

    std::ofstream(root_ / "broken.json") << "{";
    EXPECT_NE(run({"gen-data", "--config", path("broken.json"), "--out", path("x")}).code, 0);
    EXPECT_NE(run({"train", "--out", path("x")}).code, 0);
    EXPECT_NE(run({"nonsense"}).code, 0);
    EXPECT_NE(run({"train", "--config", config(), "--data", path("."), "--out", path("x"), "--loss-edge", "nope"}).code, 0);

    // Failure after staging began leaves nothing behind.
    fs::create_directories(root_ / "emptydata");
    r = run({"train", "--config", config(), "--data", path("emptydata"), "--out", path("y")});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("manifest"), std::string::npos);
    EXPECT_FALSE(fs::exists(root_ / "y"));
    EXPECT_TRUE(no_staging_left(root_));

    // An unrelated non-empty directory is never overwritten.
    fs::create_directories(root_ / "keep");
    std::ofstream(root_ / "keep" / "notes.txt") << "mine";
    r = run({"plot-loss-curves", "--out", path("keep")});
    EXPECT_EQ(r.code, 2);
    EXPECT_EQ(slurp(root_ / "keep" / "notes.txt"), "mine");
}
