#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "owps/image.hpp"

namespace owps::data {

struct SyntheticSceneConfig {
    int height = 64;
    int width = 64;
    int k_min = 2;
    int k_max = 4;
    float axis_min = 7.0f;   // semi-axis range in pixels
    float axis_max = 13.0f;
    float overlap_prob = 1.0f;  // chance a particle is chained onto an earlier one
    float min_visible = 0.45f;  // smallest visible fraction of an occluded particle
    std::array<float, 2> background_range{0.45f, 0.9f};  // per-channel background level
    float gradient_max = 0.15f;   // peak illumination ramp amplitude
    std::array<float, 2> foreground_scale{0.2f, 0.5f};   // particle colour relative to background
    float color_jitter = 0.08f;   // per-particle colour offset
    float rim_darkening = 0.5f;   // shading toward the ellipse rim
    float noise = 0.02f;          // Gaussian pixel noise sigma
    int edge_width = 1;

    void validate() const;
};

struct Sample {
    Image image;
    BinaryMask region_mask;
    BinaryMask edge_mask;
    InstanceMap instance_map;
    int true_count = 0;
};

// Edge iff within Chebyshev distance width-1 of a labelled pixel that has a
// 4-neighbour with a different label.
BinaryMask derive_edge_labels(const InstanceMap& instances, int width);
BinaryMask region_from_instances(const InstanceMap& instances);

// Later particles occlude earlier ones. Scenes whose particles end up
// fragmented, mostly hidden, or not separable by the ground-truth pipeline
// are redrawn from the same random stream.
Sample generate_scene(const SyntheticSceneConfig& cfg, std::uint64_t seed);
std::vector<Sample> generate_dataset(const SyntheticSceneConfig& cfg, int count, std::uint64_t seed);

struct AugmentConfig {
    bool flips = true;
    bool rotations = true;
    float noise_max = 0.03f;   // noise sigma drawn from [0, noise_max]
    float contrast_lo = 0.7f;
    float contrast_hi = 1.3f;
};

// Geometric part only: optional flips, then k counter-clockwise quarter turns.
Sample apply_geometry(const Sample& sample, bool flip_h, bool flip_v, int quarter_turns);
// Photometric part: contrast about the per-channel mean, then noise, clamped.
Image apply_photometric(const Image& image, float contrast, float noise_sigma, std::uint64_t noise_seed);
Sample augment(const Sample& sample, std::uint64_t seed, const AugmentConfig& cfg = {});

struct Dataset {
    std::vector<Sample> samples;
    std::string manifest_text;  // raw manifest, for provenance
};

// images/NNNN.png, region/, edge/, instance/ plus manifest.json; `cfg_json`
// is echoed into the manifest verbatim.
void write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples,
                   const std::string& cfg_json, std::uint64_t seed);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace owps::data
