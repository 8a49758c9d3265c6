#include "owps/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "owps/error.hpp"

namespace owps {

using nlohmann::ordered_json;

namespace {

[[noreturn]] void bad(const std::string& field, const std::string& why) {
    throw Error(ErrorKind::InvalidConfig, field + ": " + why);
}

// Walks one JSON object, handing out typed fields and remembering which keys
// were consumed so leftovers can be reported.
class Section {
public:
    Section(const ordered_json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) bad(path_, "expected an object");
    }

    template <typename T>
    void read(const char* key, T& out) {
        auto it = j_.find(key);
        if (it == j_.end()) return;
        used_.insert(key);
        try {
            out = it->template get<T>();
        } catch (const nlohmann::json::exception&) {
            bad(field(key), "has the wrong type");
        }
    }

    void read_pair(const char* key, std::array<float, 2>& out) {
        auto it = j_.find(key);
        if (it == j_.end()) return;
        used_.insert(key);
        if (!it->is_array() || it->size() != 2 || !(*it)[0].is_number() || !(*it)[1].is_number()) {
            bad(field(key), "expected a two-number array");
        }
        out = {(*it)[0].get<float>(), (*it)[1].get<float>()};
    }

    template <typename F>
    void read_string(const char* key, F&& parse) {
        auto it = j_.find(key);
        if (it == j_.end()) return;
        used_.insert(key);
        if (!it->is_string()) bad(field(key), "expected a string");
        try {
            parse(it->template get<std::string>());
        } catch (const Error& e) {
            bad(field(key), e.what());
        }
    }

    const ordered_json* child(const char* key) {
        auto it = j_.find(key);
        if (it == j_.end()) return nullptr;
        used_.insert(key);
        return &*it;
    }

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!used_.count(it.key())) bad(field(it.key()), "unknown key");
        }
    }

private:
    const ordered_json& j_;
    std::string path_;
    std::set<std::string> used_;
};

}  // namespace

void TrainConfig::validate() const {
    if (!(lr > 0.0f)) bad("train.lr", "must be > 0");
    if (epochs < 1) bad("train.epochs", "must be >= 1");
    if (batch < 1) bad("train.batch", "must be >= 1");
    if (eval_every < 1) bad("train.eval_every", "must be >= 1");
    if (!(augmentation.noise_max >= 0.0f)) bad("train.noise_max", "must be >= 0");
    if (!(augmentation.contrast_lo > 0.0f && augmentation.contrast_lo <= augmentation.contrast_hi)) {
        bad("train.contrast", "must be an ordered positive pair");
    }
}

void DataConfig::validate() const {
    scene.validate();
    if (train_count < 1) bad("data.train_count", "must be >= 1");
    if (test_count < 1) bad("data.test_count", "must be >= 1");
}

void RunConfig::validate() const {
    model.validate();
    loss.validate();
    train.validate();
    data.validate();
    postprocess.validate();
    const int stride = 1 << model.depth;
    if (data.scene.height % stride || data.scene.width % stride) {
        bad("data.size", "image extents must be divisible by 2^model.depth = " + std::to_string(stride));
    }
}

RunConfig parse_config(const std::string& json_text) {
    ordered_json root;
    try {
        root = ordered_json::parse(json_text);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorKind::InvalidConfig, std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig cfg;
    Section top(root, "");
    if (const auto* j = top.child("model")) {
        Section s(*j, "model");
        s.read("depth", cfg.model.depth);
        s.read("base_channels", cfg.model.base_channels);
        s.read("refine", cfg.model.refine_enabled);
        s.read("edge_branch", cfg.model.edge_branch);
        s.read("input_channels", cfg.model.input_channels);
        s.read_string("norm", [&](const std::string& v) { cfg.model.norm.variant = norm::parse_variant(v); });
        s.read("norm_eps", cfg.model.norm.eps);
        s.read("norm_momentum", cfg.model.norm.momentum);
        s.read_string("variant", [&](const std::string& v) { cfg.model = model_variant(v, cfg.model); });
        s.finish();
    }
    if (const auto* j = top.child("loss")) {
        Section s(*j, "loss");
        s.read_string("region", [&](const std::string& v) { cfg.loss.region_kind = losses::parse_kind(v); });
        s.read_string("edge", [&](const std::string& v) { cfg.loss.edge_kind = losses::parse_kind(v); });
        s.read("gamma", cfg.loss.gamma);
        s.read("smooth_eps", cfg.loss.smooth_eps);
        s.finish();
    }
    if (const auto* j = top.child("train")) {
        Section s(*j, "train");
        s.read("lr", cfg.train.lr);
        s.read("epochs", cfg.train.epochs);
        s.read("batch", cfg.train.batch);
        s.read("seed", cfg.train.seed);
        s.read("augment", cfg.train.augment);
        s.read("eval_every", cfg.train.eval_every);
        s.read("flips", cfg.train.augmentation.flips);
        s.read("rotations", cfg.train.augmentation.rotations);
        s.read("noise_max", cfg.train.augmentation.noise_max);
        std::array<float, 2> contrast{cfg.train.augmentation.contrast_lo, cfg.train.augmentation.contrast_hi};
        s.read_pair("contrast", contrast);
        cfg.train.augmentation.contrast_lo = contrast[0];
        cfg.train.augmentation.contrast_hi = contrast[1];
        s.finish();
    }
    if (const auto* j = top.child("data")) {
        Section s(*j, "data");
        auto& sc = cfg.data.scene;
        if (const auto* size = s.child("size")) {
            if (!size->is_array() || size->size() != 2 || !(*size)[0].is_number_integer() || !(*size)[1].is_number_integer()) {
                bad("data.size", "expected [height, width]");
            }
            sc.height = (*size)[0].get<int>();
            sc.width = (*size)[1].get<int>();
        }
        s.read("k_min", sc.k_min);
        s.read("k_max", sc.k_max);
        s.read("axis_min", sc.axis_min);
        s.read("axis_max", sc.axis_max);
        s.read("overlap_prob", sc.overlap_prob);
        s.read("min_visible", sc.min_visible);
        s.read_pair("background_range", sc.background_range);
        s.read("gradient_max", sc.gradient_max);
        s.read_pair("foreground_scale", sc.foreground_scale);
        s.read("color_jitter", sc.color_jitter);
        s.read("rim_darkening", sc.rim_darkening);
        s.read("noise", sc.noise);
        s.read("edge_width", sc.edge_width);
        s.read("train_count", cfg.data.train_count);
        s.read("test_count", cfg.data.test_count);
        s.read("seed", cfg.data.seed);
        s.finish();
    }
    if (const auto* j = top.child("postprocess")) {
        Section s(*j, "postprocess");
        s.read("threshold", cfg.postprocess.threshold);
        s.read("se_size", cfg.postprocess.se_size);
        s.finish();
    }
    top.finish();
    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

namespace {

// Settings are single precision; print each as the shortest decimal that
// reads back to the same float instead of its widened double expansion.
void tidy_floats(ordered_json& j) {
    if (j.is_number_float()) {
        char buf[32];
        const auto r = std::to_chars(buf, buf + sizeof buf, static_cast<float>(j.get<double>()));
        j = std::strtod(std::string(buf, r.ptr).c_str(), nullptr);
    } else if (j.is_structured()) {
        for (auto& v : j) tidy_floats(v);
    }
}

ordered_json scene_json(const data::SyntheticSceneConfig& sc) {
    ordered_json j;
    j["size"] = {sc.height, sc.width};
    j["k_min"] = sc.k_min;
    j["k_max"] = sc.k_max;
    j["axis_min"] = sc.axis_min;
    j["axis_max"] = sc.axis_max;
    j["overlap_prob"] = sc.overlap_prob;
    j["min_visible"] = sc.min_visible;
    j["background_range"] = {sc.background_range[0], sc.background_range[1]};
    j["gradient_max"] = sc.gradient_max;
    j["foreground_scale"] = {sc.foreground_scale[0], sc.foreground_scale[1]};
    j["color_jitter"] = sc.color_jitter;
    j["rim_darkening"] = sc.rim_darkening;
    j["noise"] = sc.noise;
    j["edge_width"] = sc.edge_width;
    return j;
}

}  // namespace

std::string scene_to_json(const data::SyntheticSceneConfig& cfg) {
    ordered_json j = scene_json(cfg);
    tidy_floats(j);
    return j.dump();
}

std::string to_json(const RunConfig& cfg, int indent) {
    ordered_json j;
    j["model"] = {{"depth", cfg.model.depth},
                  {"base_channels", cfg.model.base_channels},
                  {"norm", norm::to_string(cfg.model.norm.variant)},
                  {"norm_eps", cfg.model.norm.eps},
                  {"norm_momentum", cfg.model.norm.momentum},
                  {"refine", cfg.model.refine_enabled},
                  {"edge_branch", cfg.model.edge_branch},
                  {"input_channels", cfg.model.input_channels}};
    j["loss"] = {{"region", losses::to_string(cfg.loss.region_kind)},
                 {"edge", losses::to_string(cfg.loss.edge_kind)},
                 {"gamma", cfg.loss.gamma},
                 {"smooth_eps", cfg.loss.smooth_eps}};
    j["train"] = {{"lr", cfg.train.lr},
                  {"epochs", cfg.train.epochs},
                  {"batch", cfg.train.batch},
                  {"seed", cfg.train.seed},
                  {"augment", cfg.train.augment},
                  {"eval_every", cfg.train.eval_every},
                  {"flips", cfg.train.augmentation.flips},
                  {"rotations", cfg.train.augmentation.rotations},
                  {"noise_max", cfg.train.augmentation.noise_max},
                  {"contrast", {cfg.train.augmentation.contrast_lo, cfg.train.augmentation.contrast_hi}}};
    ordered_json data = scene_json(cfg.data.scene);
    data["train_count"] = cfg.data.train_count;
    data["test_count"] = cfg.data.test_count;
    data["seed"] = cfg.data.seed;
    j["data"] = data;
    j["postprocess"] = {{"threshold", cfg.postprocess.threshold}, {"se_size", cfg.postprocess.se_size}};
    tidy_floats(j);
    return j.dump(indent);
}

net::ModelConfig model_variant(const std::string& name, const net::ModelConfig& base) {
    net::ModelConfig cfg = base;
    if (name == "U_Net") {
        // Region-only baseline with batch normalization added.
        cfg.edge_branch = false;
        cfg.refine_enabled = false;
        cfg.norm.variant = norm::Variant::BN;
    } else if (name == "OWSNet-without-refine") {
        cfg.edge_branch = true;
        cfg.refine_enabled = false;
    } else if (name == "OWSNet") {
        cfg.edge_branch = true;
        cfg.refine_enabled = true;
        cfg.norm.variant = norm::Variant::None;
    } else if (name.rfind("OWSNet-", 0) == 0) {
        cfg.edge_branch = true;
        cfg.refine_enabled = true;
        cfg.norm.variant = norm::parse_variant(name.substr(7));
    } else {
        throw Error(ErrorKind::InvalidConfig, "unknown model variant '" + name + "'");
    }
    return cfg;
}

}  // namespace owps
