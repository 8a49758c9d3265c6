#include "owps/cli.hpp"

#include <unistd.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "owps/config.hpp"
#include "owps/data.hpp"
#include "owps/error.hpp"
#include "owps/losses.hpp"
#include "owps/trainer.hpp"

namespace owps::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct Options {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<int> batch;
    std::optional<int> epochs;
    std::optional<std::string> loss_edge;
    std::optional<std::string> loss_region;
    std::optional<std::string> norm;
    bool no_refine = false;
    std::optional<float> threshold;
    std::string data;
    std::string checkpoint;
    std::vector<std::string> images;
    std::string region_prob;
    std::string edge_prob;
    std::string grid;
};

std::string timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Output directory written under a temporary name and renamed on commit.
class Staging {
public:
    explicit Staging(const fs::path& target) : target_(fs::absolute(target).lexically_normal()) {
        if (target_.filename().empty()) target_ = target_.parent_path();
        if (fs::exists(target_) && !fs::is_directory(target_)) {
            throw Error(ErrorKind::Io, target_.string() + " exists and is not a directory");
        }
        if (fs::is_directory(target_) && !fs::is_empty(target_) && !fs::exists(target_ / "run_manifest.json")) {
            throw Error(ErrorKind::Io, target_.string() + " is not empty and holds no earlier run; refusing to replace it");
        }
        fs::create_directories(target_.parent_path());
        dir_ = target_.parent_path() / ("." + target_.filename().string() + ".staging-" + std::to_string(::getpid()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    ~Staging() {
        if (!committed_) {
            std::error_code ec;
            fs::remove_all(dir_, ec);
        }
    }
    Staging(const Staging&) = delete;
    Staging& operator=(const Staging&) = delete;

    const fs::path& dir() const { return dir_; }
    const fs::path& target() const { return target_; }

    void commit(const std::vector<fs::path>& declared) {
        for (const auto& rel : declared) {
            if (!fs::exists(dir_ / rel)) throw Error(ErrorKind::Io, "declared output " + rel.string() + " was not produced");
        }
        if (fs::exists(target_)) fs::remove_all(target_);
        fs::rename(dir_, target_);
        committed_ = true;
    }

private:
    fs::path target_;
    fs::path dir_;
    bool committed_ = false;
};

class Manifest {
public:
    Manifest(std::string command, const std::vector<std::string>& args) {
        j_["command"] = std::move(command);
        j_["tool_version"] = kToolVersion;
        j_["argv"] = args;
        j_["started"] = timestamp();
        start_ = std::chrono::steady_clock::now();
    }
    ordered_json& operator[](const char* key) { return j_[key]; }

    void write(const fs::path& dir, const fs::path& final_dir) {
        j_["output_dir"] = final_dir.string();
        j_["finished"] = timestamp();
        j_["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        std::ofstream out(dir / "run_manifest.json");
        out << j_.dump(2) << '\n';
        if (!out) throw Error(ErrorKind::Io, "cannot write run manifest");
    }

private:
    ordered_json j_;
    std::chrono::steady_clock::time_point start_;
};

RunConfig resolve_config(const Options& o, Manifest& manifest, bool seed_is_data) {
    RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
    ordered_json overrides = ordered_json::object();
    try {
        if (o.seed) {
            (seed_is_data ? cfg.data.seed : cfg.train.seed) = *o.seed;
            overrides["seed"] = *o.seed;
        }
        if (o.batch) {
            cfg.train.batch = *o.batch;
            overrides["batch"] = *o.batch;
        }
        if (o.epochs) {
            cfg.train.epochs = *o.epochs;
            overrides["epochs"] = *o.epochs;
        }
        if (o.loss_edge) {
            cfg.loss.edge_kind = losses::parse_kind(*o.loss_edge);
            overrides["loss_edge"] = *o.loss_edge;
        }
        if (o.loss_region) {
            cfg.loss.region_kind = losses::parse_kind(*o.loss_region);
            overrides["loss_region"] = *o.loss_region;
        }
        if (o.norm) {
            cfg.model.norm.variant = norm::parse_variant(*o.norm);
            overrides["norm"] = *o.norm;
        }
        if (o.no_refine) {
            cfg.model.refine_enabled = false;
            overrides["no_refine"] = true;
        }
        if (o.threshold) {
            cfg.postprocess.threshold = *o.threshold;
            overrides["threshold"] = *o.threshold;
        }
    } catch (const Error& e) {
        throw Error(ErrorKind::InvalidConfig, std::string("override: ") + e.what());
    }
    cfg.validate();
    manifest["config_path"] = o.config;
    manifest["overrides"] = overrides;
    manifest["config"] = ordered_json::parse(to_json(cfg));
    return cfg;
}

// Accepts either a split directory (with manifest.json) or a dataset root
// holding `<split>/manifest.json`.
fs::path split_dir(const fs::path& root, const char* split) {
    if (fs::exists(root / "manifest.json")) return root;
    return root / split;
}

ordered_json report_json(const train::EvalReport& r) {
    return {{"boundary_dice", r.boundary_dice}, {"particle_dice", r.particle_dice}, {"count_accuracy", r.count_accuracy}};
}

int cmd_gen_data(const Options& o, Manifest& m, std::ostream& out) {
    RunConfig cfg = resolve_config(o, m, true);
    Staging stage(o.out);
    const std::uint64_t test_seed = cfg.data.seed ^ 0x5DEECE66DULL;
    const std::string scene = scene_to_json(cfg.data.scene);
    data::write_dataset(stage.dir() / "train", data::generate_dataset(cfg.data.scene, cfg.data.train_count, cfg.data.seed),
                        scene, cfg.data.seed);
    data::write_dataset(stage.dir() / "test", data::generate_dataset(cfg.data.scene, cfg.data.test_count, test_seed), scene,
                        test_seed);
    // Validate by reading both splits back.
    const auto train_n = data::read_dataset(stage.dir() / "train").samples.size();
    const auto test_n = data::read_dataset(stage.dir() / "test").samples.size();
    m["seeds"] = {{"train", cfg.data.seed}, {"test", test_seed}};
    m["outputs"] = {"train/manifest.json", "test/manifest.json"};
    m.write(stage.dir(), stage.target());
    stage.commit({"train/manifest.json", "test/manifest.json", "run_manifest.json"});
    out << "wrote " << train_n << " train and " << test_n << " test samples to " << stage.target().string() << '\n';
    return 0;
}

int cmd_train(const Options& o, Manifest& m, std::ostream& out, std::ostream& err) {
    RunConfig cfg = resolve_config(o, m, false);
    const fs::path train_dir = split_dir(o.data, "train");
    const auto train_set = data::read_dataset(train_dir).samples;
    std::vector<data::Sample> eval_set;
    const fs::path test_dir = fs::path(o.data) / "test";
    if (!fs::exists(fs::path(o.data) / "manifest.json") && fs::exists(test_dir / "manifest.json")) {
        eval_set = data::read_dataset(test_dir).samples;
        m["inputs"]["eval"] = test_dir.string();
    }
    m["inputs"]["train"] = train_dir.string();
    Staging stage(o.out);
    auto result = train::train(cfg, train_set, eval_set, [&](const train::MetricsRow& r) {
        err << "epoch " << r.epoch << " loss " << r.train_loss;
        if (r.evaluated) err << " boundary " << r.boundary_dice << " particle " << r.particle_dice << " count " << r.count_accuracy;
        err << '\n';
    });
    train::save_checkpoint(stage.dir() / "model.owps", result.model);
    train::write_metrics_csv(stage.dir() / "metrics.csv", result.log);
    train::load_checkpoint(stage.dir() / "model.owps");
    m["seeds"] = {{"train", cfg.train.seed}};
    m["outputs"] = {"model.owps", "metrics.csv"};
    m.write(stage.dir(), stage.target());
    stage.commit({"model.owps", "metrics.csv", "run_manifest.json"});
    out << "final train loss " << result.log.back().train_loss << '\n';
    return 0;
}

int cmd_eval(const Options& o, Manifest& m, std::ostream& out) {
    RunConfig cfg = resolve_config(o, m, false);
    if (o.checkpoint.empty()) throw Error(ErrorKind::InvalidConfig, "--checkpoint is required");
    auto model = train::load_checkpoint(o.checkpoint);
    const fs::path test_dir = split_dir(o.data, "test");
    const auto test_set = data::read_dataset(test_dir).samples;
    m["inputs"] = {{"checkpoint", o.checkpoint}, {"data", test_dir.string()}};
    Staging stage(o.out);
    const auto report = train::evaluate(model, test_set, cfg.postprocess);
    train::write_eval_csv(stage.dir() / "eval.csv", report);
    m["report"] = report_json(report);
    m["outputs"] = {"eval.csv"};
    m.write(stage.dir(), stage.target());
    stage.commit({"eval.csv", "run_manifest.json"});
    out << "boundary_dice " << report.boundary_dice << "\nparticle_dice " << report.particle_dice << "\ncount_accuracy "
        << report.count_accuracy << '\n';
    return 0;
}

int cmd_segment(const Options& o, Manifest& m, std::ostream& out) {
    RunConfig cfg = resolve_config(o, m, false);
    struct Job {
        std::string stem;
        train::Prediction pred;
    };
    std::vector<Job> jobs;
    if (!o.region_prob.empty() || !o.edge_prob.empty()) {
        if (o.region_prob.empty()) throw Error(ErrorKind::InvalidConfig, "--region-prob is required with --edge-prob");
        Job job{"segment", {png::read_prob(o.region_prob), {}}};
        job.pred.edge = o.edge_prob.empty() ? ProbMap(job.pred.region.height, job.pred.region.width) : png::read_prob(o.edge_prob);
        jobs.push_back(std::move(job));
        m["inputs"] = {{"region_prob", o.region_prob}, {"edge_prob", o.edge_prob}};
    } else {
        if (o.checkpoint.empty() || o.images.empty()) {
            throw Error(ErrorKind::InvalidConfig, "segment needs --checkpoint with --image, or --region-prob");
        }
        auto model = train::load_checkpoint(o.checkpoint);
        for (const auto& path : o.images) jobs.push_back({fs::path(path).stem().string(), train::predict(model, png::read_rgb8(path))});
        m["inputs"] = {{"checkpoint", o.checkpoint}, {"images", o.images}};
    }
    Staging stage(o.out);
    std::vector<fs::path> declared{"run_manifest.json"};
    ordered_json counts = ordered_json::object();
    std::ostringstream lines;
    for (const auto& job : jobs) {
        const auto seg = post::segment_pipeline(job.pred.region, job.pred.edge, cfg.postprocess);
        for (const auto& [suffix, write] : std::vector<std::pair<std::string, std::function<void(const fs::path&)>>>{
                 {"_region.png", [&](const fs::path& p) { png::write_prob(p, job.pred.region); }},
                 {"_edge.png", [&](const fs::path& p) { png::write_prob(p, job.pred.edge); }},
                 {"_instances.png", [&](const fs::path& p) { png::write_instances(p, seg.instances); }}}) {
            write(stage.dir() / (job.stem + suffix));
            declared.emplace_back(job.stem + suffix);
        }
        counts[job.stem] = seg.count;
        lines << job.stem << " count " << seg.count << '\n';
    }
    m["counts"] = counts;
    m.write(stage.dir(), stage.target());
    stage.commit(declared);
    out << lines.str();
    return 0;
}

int cmd_grid(const Options& o, Manifest& m, std::ostream& out, std::ostream& err) {
    RunConfig cfg = resolve_config(o, m, false);
    if (o.grid.empty()) throw Error(ErrorKind::InvalidConfig, "--grid is required");
    const auto grid = train::parse_grid(read_text(o.grid));
    const auto train_set = data::read_dataset(fs::path(o.data) / "train").samples;
    const auto test_set = data::read_dataset(fs::path(o.data) / "test").samples;
    m["inputs"] = {{"grid", o.grid}, {"data", o.data}};
    Staging stage(o.out);
    const auto rows = train::run_grid(grid, cfg, train_set, test_set, stage.dir() / "grid.csv", [&](const train::GridRow& r) {
        err << r.cell.model << ' ' << losses::to_string(r.cell.loss_region) << '/' << losses::to_string(r.cell.loss_edge)
            << " batch " << r.cell.batch << (r.ok ? " done" : " failed: " + r.error) << '\n';
    });
    std::size_t failed = 0;
    for (const auto& r : rows) failed += r.ok ? 0 : 1;
    m["cells"] = rows.size();
    m["failed_cells"] = failed;
    m["outputs"] = {"grid.csv"};
    m.write(stage.dir(), stage.target());
    stage.commit({"grid.csv", "run_manifest.json"});
    out << "grid finished: " << rows.size() - failed << " of " << rows.size() << " cells succeeded\n";
    return 0;
}

int cmd_loss_curves(const Options& o, Manifest& m, std::ostream& out) {
    RunConfig cfg = resolve_config(o, m, false);
    Staging stage(o.out);
    losses::emit_loss_curves(stage.dir() / "loss_curves.csv", cfg.loss.gamma, cfg.loss.smooth_eps);
    m["outputs"] = {"loss_curves.csv"};
    m.write(stage.dir(), stage.target());
    stage.commit({"loss_curves.csv", "run_manifest.json"});
    out << "wrote " << (stage.target() / "loss_curves.csv").string() << '\n';
    return 0;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Overlapping wear-particle segmentation toolkit", "owps"};
    app.require_subcommand(1, 1);
    app.set_version_flag("--version", kToolVersion);
    Options o;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
        sub->add_option("--out", o.out, "output directory")->required();
        sub->add_option("--seed", o.seed, "seed override");
        sub->add_option("--threshold", o.threshold, "binarization threshold override");
    };
    auto training = [&](CLI::App* sub) {
        sub->add_option("--batch", o.batch, "batch size override");
        sub->add_option("--epochs", o.epochs, "epoch count override");
        sub->add_option("--loss-edge", o.loss_edge, "edge loss override");
        sub->add_option("--loss-region", o.loss_region, "region loss override");
        sub->add_option("--norm", o.norm, "normalization override");
        sub->add_flag("--no-refine", o.no_refine, "disable the feature refine module");
    };

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic train/test dataset");
    common(gen);
    auto* tr = app.add_subcommand("train", "train a model");
    common(tr);
    training(tr);
    tr->add_option("--data", o.data, "dataset root or train split")->required()->check(CLI::ExistingDirectory);
    auto* ev = app.add_subcommand("eval", "score a checkpoint on a test split");
    common(ev);
    ev->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
    ev->add_option("--data", o.data, "dataset root or test split")->required()->check(CLI::ExistingDirectory);
    auto* seg = app.add_subcommand("segment", "segment images and count particles");
    common(seg);
    seg->add_option("--checkpoint", o.checkpoint, "checkpoint file")->check(CLI::ExistingFile);
    seg->add_option("--image", o.images, "input PNG (repeatable)")->check(CLI::ExistingFile);
    seg->add_option("--region-prob", o.region_prob, "precomputed region probability PNG")->check(CLI::ExistingFile);
    seg->add_option("--edge-prob", o.edge_prob, "precomputed edge probability PNG")->check(CLI::ExistingFile);
    auto* grid = app.add_subcommand("grid", "run an experiment grid");
    common(grid);
    training(grid);
    grid->add_option("--grid", o.grid, "grid specification JSON")->required()->check(CLI::ExistingFile);
    grid->add_option("--data", o.data, "dataset root with train/ and test/")->required()->check(CLI::ExistingDirectory);
    auto* curves = app.add_subcommand("plot-loss-curves", "write single-pixel loss curves");
    common(curves);

    std::vector<const char*> argv{"owps"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    CLI::App* chosen = app.get_subcommands().front();
    Manifest manifest(chosen->get_name(), args);
    try {
        if (chosen == gen) return cmd_gen_data(o, manifest, out);
        if (chosen == tr) return cmd_train(o, manifest, out, err);
        if (chosen == ev) return cmd_eval(o, manifest, out);
        if (chosen == seg) return cmd_segment(o, manifest, out);
        if (chosen == grid) return cmd_grid(o, manifest, out, err);
        return cmd_loss_curves(o, manifest, out);
    } catch (const Error& e) {
        Tape::current().clear();
        err << "owps " << chosen->get_name() << ": " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        Tape::current().clear();
        err << "owps " << chosen->get_name() << ": " << e.what() << '\n';
        return 3;
    }
}

int run_command(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run_command(args, std::cout, std::cerr);
}

}  // namespace owps::cli
