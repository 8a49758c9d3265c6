#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "owps/config.hpp"
#include "owps/data.hpp"
#include "owps/network.hpp"
#include "owps/postprocess.hpp"

namespace owps::train {

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step = 0;
    std::vector<std::vector<double>> m;  // one array per trainable entry, store order
    std::vector<std::vector<double>> v;
};

// One bias-corrected Adam update over every trainable entry of `params`.
// Throws naming the first trainable parameter without a gradient.
void adam_step(net::ParamStore& params, AdamState& state, double lr);

// Mean over images of (2|P & T| + 1e-6) / (|P| + |T| + 1e-6).
double dice_coefficient(const BinaryMask& pred, const BinaryMask& label);
double dice_per_case(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& labels);

struct ImageEval {
    double boundary_dice = 0.0;
    double particle_dice = 0.0;
    int predicted_count = 0;
    int true_count = 0;
};

struct EvalReport {
    double boundary_dice = 0.0;
    double particle_dice = 0.0;
    double count_accuracy = 0.0;
    std::vector<ImageEval> per_image;
};

struct Prediction {
    ProbMap region;
    ProbMap edge;  // all zeros for region-only models
};

Tensor images_to_tensor(const std::vector<const Image*>& images);
// Eval-mode inference on one image, without recording a tape.
Prediction predict(net::Model& model, const Image& image);

// Scores precomputed probability maps against the samples.
EvalReport evaluate_predictions(const std::vector<Prediction>& predictions, const std::vector<data::Sample>& samples,
                                const post::PostprocessConfig& cfg);
EvalReport evaluate(net::Model& model, const std::vector<data::Sample>& samples, const post::PostprocessConfig& cfg);
void write_eval_csv(const std::filesystem::path& path, const EvalReport& report);

struct MetricsRow {
    int epoch = 0;
    double train_loss = 0.0;
    double region_loss = 0.0;
    double edge_loss = 0.0;
    bool evaluated = false;
    double boundary_dice = 0.0;
    double particle_dice = 0.0;
    double count_accuracy = 0.0;
};

struct TrainResult {
    net::Model model;
    std::vector<MetricsRow> log;
};

using ProgressFn = std::function<void(const MetricsRow&)>;

// Seeded shuffle, optional online augmentation, forward, region + edge loss,
// backward and Adam each step. The last partial batch is dropped. When
// `eval_set` is non-empty it is scored every eval_every epochs and after the
// final one.
TrainResult train(const RunConfig& cfg, const std::vector<data::Sample>& train_set,
                  const std::vector<data::Sample>& eval_set = {}, const ProgressFn& progress = {});

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& log);

// Binary checkpoint: "OWPS", u16 version, u32 entry count, then per entry
// u32 name length, name bytes, u32 rank, u32 extents, float32 LE values.
// The model configuration travels as the entry "meta.model_config".
void save_checkpoint(const std::filesystem::path& path, const net::Model& model);
net::Model load_checkpoint(const std::filesystem::path& path);

struct GridCell {
    std::string model;  // display name, see model_variant
    losses::Kind loss_region = losses::Kind::SquareDice;
    losses::Kind loss_edge = losses::Kind::SquareDice;
    int batch = 2;
};

struct GridSpec {
    std::vector<std::string> models;
    std::vector<std::pair<losses::Kind, losses::Kind>> losses;
    std::vector<int> batches;

    std::vector<GridCell> cells() const;
};

GridSpec parse_grid(const std::string& json_text);

struct GridRow {
    GridCell cell;
    bool ok = false;
    std::string error;
    EvalReport report;
    int epochs = 0;
    std::uint64_t seed = 0;
};

// Reference scores for a cell, when known.
struct ReferenceRow {
    std::string model;
    losses::Kind loss_region;
    losses::Kind loss_edge;
    int batch;
    double boundary;  // negative when there is no reference value
    double particle;
};
const std::vector<ReferenceRow>& reference_rows();

// Trains and scores every cell with the shared base seed. A failing cell is
// reported in its row and the grid continues.
std::vector<GridRow> run_grid(const GridSpec& grid, const RunConfig& base, const std::vector<data::Sample>& train_set,
                              const std::vector<data::Sample>& test_set, const std::filesystem::path& csv_path,
                              const std::function<void(const GridRow&)>& progress = {});

}  // namespace owps::train
