#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace owps {

// 3 x H x W planar RGB, values in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> data;

    Image() = default;
    Image(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(3 * h * w), 0.0f) {}
    float& at(int c, int y, int x) { return data[static_cast<std::size_t>((c * height + y) * width + x)]; }
    float at(int c, int y, int x) const { return data[static_cast<std::size_t>((c * height + y) * width + x)]; }
};

// Single-channel real map (probabilities).
struct ProbMap {
    int height = 0;
    int width = 0;
    std::vector<float> data;

    ProbMap() = default;
    ProbMap(int h, int w, float fill = 0.0f) : height(h), width(w), data(static_cast<std::size_t>(h * w), fill) {}
    float at(int y, int x) const { return data[static_cast<std::size_t>(y * width + x)]; }
};

struct BinaryMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;  // 0 or 1

    BinaryMask() = default;
    BinaryMask(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h * w), 0) {}
    std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y * width + x)]; }
    std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y * width + x)]; }
    std::size_t popcount() const;
    bool operator==(const BinaryMask&) const = default;
};

// Labels 0 (background) and 1..count.
struct InstanceMap {
    int height = 0;
    int width = 0;
    std::vector<std::uint16_t> labels;
    int count = 0;

    InstanceMap() = default;
    InstanceMap(int h, int w) : height(h), width(w), labels(static_cast<std::size_t>(h * w), 0) {}
    std::uint16_t& at(int y, int x) { return labels[static_cast<std::size_t>(y * width + x)]; }
    std::uint16_t at(int y, int x) const { return labels[static_cast<std::size_t>(y * width + x)]; }
    bool operator==(const InstanceMap&) const = default;
};

namespace png {

void write_rgb8(const std::filesystem::path& path, const Image& image);
Image read_rgb8(const std::filesystem::path& path);

// Mask stored as 0/255.
void write_mask(const std::filesystem::path& path, const BinaryMask& mask);
BinaryMask read_mask(const std::filesystem::path& path);

// Probability scaled to 0..255.
void write_prob(const std::filesystem::path& path, const ProbMap& map);
ProbMap read_prob(const std::filesystem::path& path);

// 16-bit gray, label values as stored; `count` is recomputed as the number
// of distinct positive labels.
void write_instances(const std::filesystem::path& path, const InstanceMap& map);
InstanceMap read_instances(const std::filesystem::path& path);

}  // namespace png

}  // namespace owps
