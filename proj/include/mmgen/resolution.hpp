#pragma once

#include <vector>

#include "mmgen/image.hpp"

namespace mmgen {

struct AspectRange {
    double min_ratio = 0.0;  // width / height, inclusive
    double max_ratio = 0.0;
};

struct ResolutionBucket {
    int width_px = 0;
    int height_px = 0;

    bool operator==(const ResolutionBucket&) const = default;
};

// One progressive-finetuning stage: candidate resolutions whose area
// approximates target_area within area_tolerance.
struct Stage {
    double target_area = 0.0;     // pixels^2
    double area_tolerance = 0.0;  // fraction of target_area
    AspectRange aspect;
    std::vector<ResolutionBucket> buckets;
};

struct StagePlan {
    std::vector<Stage> stages;  // strictly increasing target_area
};

// Exactly the set of (w, h), both multiples of patch_px with sides in
// [patch_px, max_side*patch_px], satisfying |w*h - target_area| <=
// tolerance*target_area and w/h within aspect (inclusive). Sorted by (w, h).
// Throws if the set is empty.
std::vector<ResolutionBucket> gen_buckets(double target_area, int patch_px, double tolerance,
                                          AspectRange aspect, int max_side);

// The bucket minimizing |ln(w_b/h_b) - ln(w_img/h_img)|; ties break toward
// larger area, then lexicographically smallest (w, h).
ResolutionBucket match_bucket(int image_w, int image_h, const std::vector<ResolutionBucket>& buckets);

// Uniformly scales the image so it covers the bucket, then center-crops to
// exactly (width_px, height_px). Bilinear resampling; an image already at the
// bucket size passes through unchanged.
RasterImage fit_image(const RasterImage& image, const ResolutionBucket& bucket);

StagePlan make_stage_plan(const std::vector<double>& target_areas, int patch_px, double tolerance,
                          AspectRange aspect, int max_side);

}  // namespace mmgen
