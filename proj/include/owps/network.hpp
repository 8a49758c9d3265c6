#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "owps/norm.hpp"
#include "owps/tensor.hpp"

namespace owps::net {

using norm::Mode;

struct ModelConfig {
    int depth = 4;                 // encoder levels; a bottleneck sits below the last one
    int base_channels = 16;        // channels at level 1, doubling per level
    norm::NormConfig norm;
    bool refine_enabled = true;    // feature refine module in front of both heads
    bool edge_branch = true;       // false: region-only U-Net baseline
    int input_channels = 3;

    void validate() const;
    // Encoder channel sequence, one entry per level (bottleneck excluded).
    std::vector<int> encoder_channels() const;
    // Display name, e.g. "OWSNet-IN-BN", "OWSNet-without-refine", "U_Net".
    std::string display_name() const;
};

// Ordered, uniquely named tensors. Trainable parameters and buffers (running
// statistics) live side by side; order is the checkpoint order.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor tensor;
        bool trainable = true;
    };

    Tensor& add(const std::string& name, Tensor tensor, bool trainable = true);
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }
    std::size_t trainable_count() const;  // number of scalar trainable values

    void zero_grad();
    ParamStore deep_copy() const;

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct Model {
    ModelConfig cfg;
    ParamStore params;
};

// He-style scaled-uniform initialization, deterministic in `seed`.
Model build_model(const ModelConfig& cfg, std::uint64_t seed);

struct ForwardResult {
    Tensor region_prob;  // N x 1 x H x W
    Tensor edge_prob;    // N x 1 x H x W; undefined when the edge branch is off
};

// Observation hooks for tests: attention gates can be overridden and the
// softmax affinity matrices captured.
struct ForwardProbe {
    Tensor spatial_affinity;  // N x HW x HW
    Tensor channel_affinity;  // N x C x C
    Tensor refine_mixed;      // conv(concat) output before attention
    Tensor refine_out;
};

ForwardResult forward(Model& model, const Tensor& image, Mode mode, ForwardProbe* probe = nullptr);

// Position attention: 1x1 query/key (C/8 channels) and value projections,
// softmax over all H*W positions, gated residual output gamma * attended + f.
Tensor spatial_attention(const Tensor& f, const Tensor& w_query, const Tensor& w_key, const Tensor& w_value,
                         const Tensor& b_value, const Tensor& gamma, Tensor* affinity = nullptr);
// Channel attention: C x C Gram affinity, softmax over channels, gated
// residual output gamma * attended + f.
Tensor channel_attention(const Tensor& f, const Tensor& gamma, Tensor* affinity = nullptr);

// Concatenates the level-1 encoder map with the final decoder map, mixes with
// conv3x3 + norm + relu, then averages the spatial and channel attention
// outputs. Parameters are read from `params` under the "refine." prefix.
Tensor feature_refine(ParamStore& params, const ModelConfig& cfg, const Tensor& enc_first, const Tensor& dec_last,
                      Mode mode, ForwardProbe* probe = nullptr);

}  // namespace owps::net
