#include <gtest/gtest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "owps/config.hpp"
#include "owps/trainer.hpp"
#include "support.hpp"

using namespace owps;
using namespace owps::train;
using testing_support::Gen;

namespace fs = std::filesystem;

namespace {

RunConfig tiny_config() {
    RunConfig cfg;
    cfg.model.depth = 2;
    cfg.model.base_channels = 8;
    cfg.model.norm.variant = norm::Variant::IN_BN;
    cfg.data.scene.height = 32;
    cfg.data.scene.width = 32;
    cfg.data.scene.axis_min = 4.0f;
    cfg.data.scene.axis_max = 7.0f;
    cfg.data.scene.k_max = 3;
    cfg.train.epochs = 3;
    cfg.train.batch = 2;
    cfg.train.lr = 3e-3f;
    cfg.train.eval_every = 1;
    cfg.train.seed = 5;
    return cfg;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path temp_path(const std::string& name) {
    return fs::temp_directory_path() / ("owps_test_" + name + "_" + std::to_string(::getpid()));
}

ProbMap as_prob(const BinaryMask& m) {
    ProbMap p(m.height, m.width);
    for (std::size_t i = 0; i < m.data.size(); ++i) p.data[i] = m.data[i] ? 1.0f : 0.0f;
    return p;
}

}  // namespace

TEST(Adam, FirstTwoStepsByHand) {
    net::ParamStore store;
    store.add("w", Tensor::from_data({3}, {1.0f, -2.0f, 0.5f}));
    store.add("running", Tensor::from_data({1}, {7.0f}), false);
    Tensor w = store.get("w");
    const double g1[3] = {0.1, -0.4, 2.0}, g2[3] = {-0.3, 0.2, 1.0};
    const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    double expect[3] = {1.0, -2.0, 0.5}, m[3] = {}, v[3] = {};
    AdamState state;
    for (int t = 1; t <= 2; ++t) {
        const double* g = t == 1 ? g1 : g2;
        auto grad = w.mutable_grad();
        for (int i = 0; i < 3; ++i) grad[i] = static_cast<float>(g[i]);
        adam_step(store, state, lr);
        for (int i = 0; i < 3; ++i) {
            const double gi = static_cast<float>(g[i]);
            m[i] = b1 * m[i] + (1 - b1) * gi;
            v[i] = b2 * v[i] + (1 - b2) * gi * gi;
            const double mh = m[i] / (1 - std::pow(b1, t)), vh = v[i] / (1 - std::pow(b2, t));
            expect[i] -= lr * mh / (std::sqrt(vh) + eps);
            EXPECT_NEAR(w.data()[i], expect[i], 1e-7) << "t=" << t << " i=" << i;
        }
        store.zero_grad();
    }
    // First step moves each coordinate by about lr regardless of scale.
    EXPECT_EQ(state.step, 2);
    EXPECT_EQ(store.get("running").data()[0], 7.0f);
}

TEST(Adam, ZeroGradientLeavesParametersAndMissingGradientNamesParameter) {
    net::ParamStore store;
    Tensor w = store.add("enc1.conv_a.weight", Tensor::from_data({2}, {0.3f, -0.7f}));
    AdamState state;
    w.mutable_grad();
    adam_step(store, state, 0.1);
    EXPECT_EQ(w.data()[0], 0.3f);
    EXPECT_EQ(w.data()[1], -0.7f);
    w.clear_grad();
    try {
        adam_step(store, state, 0.1);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::State);
        EXPECT_NE(std::string(e.what()).find("enc1.conv_a.weight"), std::string::npos);
    }
}

TEST(Metrics, DicePerCaseMatchesBruteForce) {
    Gen g(3);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = g.integer(1, 5);
        std::vector<BinaryMask> p, t;
        double expect = 0.0;
        for (int i = 0; i < n; ++i) {
            p.push_back(g.mask(8, 9, g.real(0.0, 0.6)));
            t.push_back(g.mask(8, 9, g.real(0.0, 0.6)));
            expect += testing_support::brute_dice(p.back(), t.back());
        }
        EXPECT_NEAR(dice_per_case(p, t), expect / n, 1e-12);
    }
}

TEST(Metrics, DiceIsPerCaseNotPooled) {
    BinaryMask a(4, 4), b(4, 4), c(4, 4), d(4, 4);
    for (int i = 0; i < 8; ++i) a.data[i] = b.data[i] = 1;
    for (int i = 0; i < 8; ++i) c.data[i] = 1;
    for (int i = 4; i < 12; ++i) d.data[i] = 1;
    EXPECT_NEAR(dice_per_case({a, c}, {b, d}), 0.75, 1e-6);
    // Two empty masks agree perfectly.
    EXPECT_NEAR(dice_coefficient(BinaryMask(3, 3), BinaryMask(3, 3)), 1.0, 1e-12);
    EXPECT_THROW(dice_per_case({}, {}), Error);
    EXPECT_THROW(dice_per_case({a}, {}), Error);
}

TEST(Evaluate, OraclePredictionsScorePerfectly) {
    const auto samples = data::generate_dataset(data::SyntheticSceneConfig{}, 8, 21);
    std::vector<Prediction> oracle, blank;
    for (const auto& s : samples) {
        oracle.push_back({as_prob(s.region_mask), as_prob(s.edge_mask)});
        blank.push_back({ProbMap(64, 64), ProbMap(64, 64)});
    }
    const auto good = evaluate_predictions(oracle, samples, {});
    EXPECT_NEAR(good.boundary_dice, 1.0, 1e-9);
    EXPECT_NEAR(good.particle_dice, 1.0, 1e-9);
    EXPECT_EQ(good.count_accuracy, 1.0);
    ASSERT_EQ(good.per_image.size(), samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) EXPECT_EQ(good.per_image[i].predicted_count, samples[i].true_count);

    const auto bad = evaluate_predictions(blank, samples, {});
    EXPECT_LT(bad.particle_dice, 1e-6);
    EXPECT_LT(bad.boundary_dice, 1e-6);
    EXPECT_EQ(bad.count_accuracy, 0.0);
}

TEST(Evaluate, CsvHasOneRowPerImage) {
    const auto samples = data::generate_dataset(data::SyntheticSceneConfig{}, 3, 2);
    std::vector<Prediction> oracle;
    for (const auto& s : samples) oracle.push_back({as_prob(s.region_mask), as_prob(s.edge_mask)});
    const auto path = temp_path("eval.csv");
    write_eval_csv(path, evaluate_predictions(oracle, samples, {}));
    std::ifstream in(path);
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) ++lines;
    EXPECT_GE(lines, 4);
    fs::remove(path);
}

class TrainerFixture : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        cfg_ = tiny_config();
        train_ = data::generate_dataset(cfg_.data.scene, 8, 100);
        test_ = data::generate_dataset(cfg_.data.scene, 4, 200);
        result_ = std::make_unique<TrainResult>(train::train(cfg_, train_, test_));
    }
    static void TearDownTestSuite() { result_.reset(); }

    static RunConfig cfg_;
    static std::vector<data::Sample> train_, test_;
    static std::unique_ptr<TrainResult> result_;
};

RunConfig TrainerFixture::cfg_;
std::vector<data::Sample> TrainerFixture::train_, TrainerFixture::test_;
std::unique_ptr<TrainResult> TrainerFixture::result_;

TEST_F(TrainerFixture, LossDecreasesAndLogIsComplete) {
    const auto& log = result_->log;
    ASSERT_EQ(log.size(), 3u);
    for (std::size_t i = 0; i < log.size(); ++i) {
        EXPECT_EQ(log[i].epoch, static_cast<int>(i) + 1);
        EXPECT_TRUE(log[i].evaluated);
        EXPECT_TRUE(std::isfinite(log[i].train_loss));
        EXPECT_NEAR(log[i].train_loss, log[i].region_loss + log[i].edge_loss, 1e-5);
    }
    EXPECT_LT(log.back().train_loss, log.front().train_loss);
}

TEST_F(TrainerFixture, TrainingIsDeterministic) {
    const auto again = train::train(cfg_, train_, test_);
    ASSERT_EQ(again.log.size(), result_->log.size());
    for (std::size_t i = 0; i < again.log.size(); ++i) {
        EXPECT_EQ(again.log[i].train_loss, result_->log[i].train_loss);
        EXPECT_EQ(again.log[i].boundary_dice, result_->log[i].boundary_dice);
    }
    const auto& a = again.model.params.entries();
    const auto& b = result_->model.params.entries();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_TRUE(std::equal(a[i].tensor.data().begin(), a[i].tensor.data().end(), b[i].tensor.data().begin()))
            << a[i].name;
    }
}

TEST_F(TrainerFixture, CheckpointRoundTrip) {
    const auto path = temp_path("model.owps"), again = temp_path("model2.owps");
    save_checkpoint(path, result_->model);
    auto loaded = load_checkpoint(path);
    save_checkpoint(again, loaded);
    EXPECT_EQ(slurp(path), slurp(again));
    EXPECT_EQ(loaded.cfg.display_name(), result_->model.cfg.display_name());

    const auto before = evaluate(result_->model, test_, cfg_.postprocess);
    const auto after = evaluate(loaded, test_, cfg_.postprocess);
    EXPECT_EQ(before.boundary_dice, after.boundary_dice);
    EXPECT_EQ(before.particle_dice, after.particle_dice);
    EXPECT_EQ(before.count_accuracy, after.count_accuracy);
    const auto p1 = predict(result_->model, test_[0].image), p2 = predict(loaded, test_[0].image);
    EXPECT_EQ(p1.region.data, p2.region.data);
    EXPECT_EQ(p1.edge.data, p2.edge.data);

    const auto bytes = slurp(path);
    {
        std::ofstream(again, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    }
    try {
        load_checkpoint(again);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Corrupt);
    }
    {
        std::ofstream(again, std::ios::binary) << "XXXX" << bytes.substr(4);
    }
    try {
        load_checkpoint(again);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Incompatible);
    }
    {
        std::ofstream(again, std::ios::binary) << bytes << "extra";
    }
    EXPECT_THROW(load_checkpoint(again), Error);
    EXPECT_THROW(load_checkpoint(temp_path("does_not_exist")), Error);
    fs::remove(path);
    fs::remove(again);
}

TEST_F(TrainerFixture, MetricsCsv) {
    const auto path = temp_path("metrics.csv");
    write_metrics_csv(path, result_->log);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header, "epoch,train_loss,region_loss,edge_loss,boundary_dice,particle_dice,count_acc");
    int rows = 0;
    for (std::string line; std::getline(in, line);) ++rows;
    EXPECT_EQ(rows, 3);
    fs::remove(path);
}

TEST(Train, FiftyEpochSmokeRunLowersTheLoss) {
    RunConfig cfg;
    cfg.model.depth = 2;
    cfg.model.base_channels = 8;
    cfg.train.epochs = 50;
    cfg.train.eval_every = 50;
    const auto samples = data::generate_dataset(cfg.data.scene, 8, 31);
    const auto result = train::train(cfg, samples);
    ASSERT_EQ(result.log.size(), 50u);
    EXPECT_LT(result.log.back().train_loss, result.log.front().train_loss);
    for (std::size_t i = 1; i < result.log.size(); ++i) EXPECT_GT(result.log[i].epoch, result.log[i - 1].epoch);
}

TEST(Train, RejectsBadSettings) {
    auto cfg = tiny_config();
    const auto samples = data::generate_dataset(cfg.data.scene, 2, 1);
    cfg.train.epochs = 0;
    EXPECT_THROW(train::train(cfg, samples), Error);
    cfg = tiny_config();
    cfg.train.batch = 3;
    EXPECT_THROW(train::train(cfg, samples), Error);
    cfg = tiny_config();
    EXPECT_THROW(train::train(cfg, {}), Error);
}

TEST(Train, DivergenceIsReported) {
    auto cfg = tiny_config();
    cfg.train.epochs = 1;
    cfg.train.lr = std::numeric_limits<float>::infinity();
    cfg.train.augment = false;
    const auto samples = data::generate_dataset(cfg.data.scene, 4, 1);
    try {
        train::train(cfg, samples);
        FAIL() << "expected divergence";
    } catch (const Error& e) {
        EXPECT_TRUE(e.kind() == ErrorKind::Diverged || e.kind() == ErrorKind::InvalidConfig) << e.what();
    }
}

TEST(Grid, CardinalityAndParsing) {
    const auto g = parse_grid(R"({"models":["OWSNet-IN-BN","OWSNet-BN"],"losses":["CE",["CE","dice"],"square-dice"],"batches":[1,2]})");
    const auto cells = g.cells();
    EXPECT_EQ(cells.size(), 12u);
    EXPECT_EQ(cells[0].model, "OWSNet-IN-BN");
    // Batch varies fastest, then the loss pair.
    EXPECT_EQ(cells[1].batch, 2);
    EXPECT_EQ(cells[2].loss_region, losses::Kind::CE);
    EXPECT_EQ(cells[2].loss_edge, losses::Kind::Dice);
    EXPECT_EQ(cells[6].model, "OWSNet-BN");
    EXPECT_THROW(parse_grid(R"({"models":["NoSuchNet"],"losses":["CE"]})"), Error);
    EXPECT_THROW(parse_grid(R"({"models":["U_Net"],"losses":["CE"],"bogus":1})"), Error);
    EXPECT_THROW(parse_grid(R"({"models":[],"losses":["CE"]})"), Error);
    EXPECT_THROW(parse_grid("[1,2"), Error);
}

TEST(Grid, ReferenceTablesAreComplete) {
    const auto& rows = reference_rows();
    EXPECT_EQ(rows.size(), 25u);
    int unet = 0;
    for (const auto& r : rows) {
        if (r.model == "U_Net") {
            ++unet;
            EXPECT_LT(r.boundary, 0.0);
            EXPECT_NEAR(r.particle, 0.9009, 1e-9);
        } else {
            EXPECT_GT(r.boundary, 0.0);
        }
    }
    EXPECT_EQ(unet, 1);
}

TEST(Grid, RunsEveryCellAndWritesReferenceRows) {
    auto cfg = tiny_config();
    cfg.train.epochs = 1;
    const auto train_set = data::generate_dataset(cfg.data.scene, 4, 7);
    const auto test_set = data::generate_dataset(cfg.data.scene, 2, 8);
    const auto grid = parse_grid(R"({"models":["U_Net","OWSNet-IN-BN"],"losses":["square-dice"],"batches":[2]})");
    const auto path = temp_path("grid.csv");
    const auto rows = run_grid(grid, cfg, train_set, test_set, path);
    ASSERT_EQ(rows.size(), 2u);
    for (const auto& r : rows) EXPECT_TRUE(r.ok) << r.error;

    std::ifstream in(path);
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    int references = 0, data_rows = 0;
    bool header = false;
    for (const auto& l : lines) {
        if (l.rfind("# reference,model,", 0) == 0) {
            continue;
        } else if (l.rfind("# reference,", 0) == 0) {
            ++references;
        } else if (l.rfind("model,", 0) == 0) {
            header = true;
        } else if (!l.empty() && l[0] != '#') {
            ++data_rows;
        }
    }
    EXPECT_TRUE(header);
    EXPECT_EQ(references, 2);
    EXPECT_EQ(data_rows, 2);
    bool unet_na = false;
    for (const auto& l : lines) {
        if (l.rfind("U_Net,", 0) == 0) unet_na = l.find(",NA,") != std::string::npos;
    }
    EXPECT_TRUE(unet_na);

    const auto again = run_grid(grid, cfg, train_set, test_set, path);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(again[i].report.particle_dice, rows[i].report.particle_dice);
        EXPECT_EQ(again[i].report.boundary_dice, rows[i].report.boundary_dice);
    }
    fs::remove(path);
}
