#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "owps/data.hpp"
#include "owps/losses.hpp"
#include "owps/network.hpp"
#include "owps/postprocess.hpp"

namespace owps {

struct TrainConfig {
    float lr = 1e-3f;
    int epochs = 100;
    int batch = 2;
    std::uint64_t seed = 0;
    bool augment = true;
    int eval_every = 10;
    data::AugmentConfig augmentation;

    void validate() const;
};

struct DataConfig {
    data::SyntheticSceneConfig scene;
    int train_count = 200;
    int test_count = 50;
    std::uint64_t seed = 0;

    void validate() const;
};

// Everything a command needs; the JSON form has the top-level sections
// model, loss, train, data and postprocess. Missing keys keep defaults,
// unknown keys are rejected.
struct RunConfig {
    net::ModelConfig model;
    losses::LossConfig loss;
    TrainConfig train;
    DataConfig data;
    post::PostprocessConfig postprocess;

    void validate() const;
};

RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::filesystem::path& path);
std::string to_json(const RunConfig& cfg, int indent = 2);
std::string scene_to_json(const data::SyntheticSceneConfig& cfg);

// Display names: "U_Net", "OWSNet-without-refine", "OWSNet-<norm>".
net::ModelConfig model_variant(const std::string& name, const net::ModelConfig& base);

}  // namespace owps
