#include "owps/postprocess.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "owps/error.hpp"

namespace owps::post {

namespace {

void check_same(int h1, int w1, int h2, int w2, const char* what) {
    if (h1 != h2 || w1 != w2) {
        throw Error(ErrorKind::ShapeMismatch, std::string(what) + ": " + std::to_string(h1) + "x" + std::to_string(w1) +
                                                  " vs " + std::to_string(h2) + "x" + std::to_string(w2));
    }
}

void check_se(int se_size) {
    if (se_size < 1 || se_size % 2 == 0) {
        throw Error(ErrorKind::InvalidConfig, "structuring element size must be odd and positive, got " + std::to_string(se_size));
    }
}

// Separable min/max filter over the in-bounds part of the window.
BinaryMask rank_filter(const BinaryMask& mask, int se_size, bool take_min) {
    check_se(se_size);
    const int r = se_size / 2;
    const int h = mask.height, w = mask.width;
    BinaryMask rows(h, w), out(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            std::uint8_t v = take_min ? 1 : 0;
            for (int dx = std::max(0, x - r); dx <= std::min(w - 1, x + r); ++dx) {
                v = take_min ? std::min(v, mask.at(y, dx)) : std::max(v, mask.at(y, dx));
            }
            rows.at(y, x) = v;
        }
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            std::uint8_t v = take_min ? 1 : 0;
            for (int dy = std::max(0, y - r); dy <= std::min(h - 1, y + r); ++dy) {
                v = take_min ? std::min(v, rows.at(dy, x)) : std::max(v, rows.at(dy, x));
            }
            out.at(y, x) = v;
        }
    }
    return out;
}

}  // namespace

void PostprocessConfig::validate() const {
    if (!(threshold >= 0.0f && threshold <= 1.0f)) {
        throw Error(ErrorKind::InvalidConfig, "postprocess.threshold must lie in [0, 1]");
    }
    check_se(se_size);
}

BinaryMask binarize(const ProbMap& prob, float threshold) {
    BinaryMask mask(prob.height, prob.width);
    for (std::size_t i = 0; i < prob.data.size(); ++i) mask.data[i] = prob.data[i] >= threshold ? 1 : 0;
    return mask;
}

BinaryMask subtract_edge(const BinaryMask& region, const BinaryMask& edge) {
    check_same(region.height, region.width, edge.height, edge.width, "subtract_edge");
    BinaryMask out(region.height, region.width);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = (region.data[i] && !edge.data[i]) ? 1 : 0;
    return out;
}

BinaryMask erode(const BinaryMask& mask, int se_size) { return rank_filter(mask, se_size, true); }
BinaryMask dilate(const BinaryMask& mask, int se_size) { return rank_filter(mask, se_size, false); }
BinaryMask morph_open(const BinaryMask& mask, int se_size) { return dilate(erode(mask, se_size), se_size); }

// Two-pass union-find; the final relabel walks pixels in raster order so
// labels follow discovery order.
InstanceMap connected_components(const BinaryMask& mask) {
    const int h = mask.height, w = mask.width;
    std::vector<int> provisional(static_cast<std::size_t>(h * w), 0);
    std::vector<int> parent{0};
    auto find = [&](int a) {
        while (parent[static_cast<std::size_t>(a)] != a) {
            parent[static_cast<std::size_t>(a)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(a)])];
            a = parent[static_cast<std::size_t>(a)];
        }
        return a;
    };
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (!mask.at(y, x)) continue;
            const int up = y > 0 ? provisional[static_cast<std::size_t>((y - 1) * w + x)] : 0;
            const int left = x > 0 ? provisional[static_cast<std::size_t>(y * w + x - 1)] : 0;
            int label;
            if (!up && !left) {
                label = static_cast<int>(parent.size());
                parent.push_back(label);
            } else if (up && left) {
                const int a = find(up), b = find(left);
                label = std::min(a, b);
                parent[static_cast<std::size_t>(std::max(a, b))] = label;
            } else {
                label = up ? up : left;
            }
            provisional[static_cast<std::size_t>(y * w + x)] = label;
        }
    }
    InstanceMap out(h, w);
    std::vector<int> final_label(parent.size(), 0);
    int next = 0;
    for (std::size_t i = 0; i < provisional.size(); ++i) {
        if (!provisional[i]) continue;
        const int root = find(provisional[i]);
        if (!final_label[static_cast<std::size_t>(root)]) final_label[static_cast<std::size_t>(root)] = ++next;
        if (next > 65535) throw Error(ErrorKind::Domain, "more than 65535 components");
        out.labels[i] = static_cast<std::uint16_t>(final_label[static_cast<std::size_t>(root)]);
    }
    out.count = next;
    return out;
}

SegmentationResult segment_pipeline(const ProbMap& region_prob, const ProbMap& edge_prob, const PostprocessConfig& cfg) {
    cfg.validate();
    check_same(region_prob.height, region_prob.width, edge_prob.height, edge_prob.width, "segment_pipeline");
    SegmentationResult r;
    r.region_prob = region_prob;
    r.edge_prob = edge_prob;
    r.region_mask = binarize(region_prob, cfg.threshold);
    r.edge_mask = binarize(edge_prob, cfg.threshold);
    r.separated = subtract_edge(r.region_mask, r.edge_mask);
    r.opened = morph_open(r.separated, cfg.se_size);
    r.instances = connected_components(r.opened);
    r.count = r.instances.count;
    return r;
}

}  // namespace owps::post
