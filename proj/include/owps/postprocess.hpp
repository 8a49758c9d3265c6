#pragma once

#include "owps/image.hpp"

namespace owps::post {

struct PostprocessConfig {
    float threshold = 0.5f;
    int se_size = 3;  // odd side of the square structuring element

    void validate() const;
};

// 1 where value >= threshold.
BinaryMask binarize(const ProbMap& prob, float threshold = 0.5f);
// region AND NOT edge.
BinaryMask subtract_edge(const BinaryMask& region, const BinaryMask& edge);

// Square structuring element of odd side `se_size`; pixels outside the image
// are ignored by both passes.
BinaryMask erode(const BinaryMask& mask, int se_size = 3);
BinaryMask dilate(const BinaryMask& mask, int se_size = 3);
BinaryMask morph_open(const BinaryMask& mask, int se_size = 3);

// 4-connected labelling, labels in raster-scan discovery order.
InstanceMap connected_components(const BinaryMask& mask);

struct SegmentationResult {
    ProbMap region_prob;
    ProbMap edge_prob;
    BinaryMask region_mask;
    BinaryMask edge_mask;
    BinaryMask separated;  // region minus edge
    BinaryMask opened;
    InstanceMap instances;
    int count = 0;
};

SegmentationResult segment_pipeline(const ProbMap& region_prob, const ProbMap& edge_prob,
                                    const PostprocessConfig& cfg = {});

}  // namespace owps::post
