#include "mmgen/resolution.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace mmgen {

std::vector<ResolutionBucket> gen_buckets(double target_area, int patch_px, double tolerance,
                                          AspectRange aspect, int max_side) {
    if (!(tolerance > 0.0) || !(tolerance < 1.0)) {
        throw std::invalid_argument("gen_buckets: tolerance must lie in (0, 1)");
    }
    if (!(aspect.min_ratio > 0.0) || aspect.max_ratio < aspect.min_ratio) {
        throw std::invalid_argument("gen_buckets: invalid aspect range");
    }
    if (patch_px < 1 || max_side < 1 || !(target_area > 0.0)) {
        throw std::invalid_argument("gen_buckets: patch_px, max_side and target_area must be positive");
    }

    std::vector<ResolutionBucket> out;
    const double band = tolerance * target_area;
    for (int w = patch_px; w <= max_side * patch_px; w += patch_px) {
        for (int h = patch_px; h <= max_side * patch_px; h += patch_px) {
            const double area = static_cast<double>(w) * h;
            if (std::abs(area - target_area) > band) {
                continue;
            }
            const double ratio = static_cast<double>(w) / h;
            if (ratio < aspect.min_ratio || ratio > aspect.max_ratio) {
                continue;
            }
            out.push_back(ResolutionBucket{w, h});
        }
    }
    std::sort(out.begin(), out.end(), [](const ResolutionBucket& a, const ResolutionBucket& b) {
        return a.width_px != b.width_px ? a.width_px < b.width_px : a.height_px < b.height_px;
    });
    if (out.empty()) {
        throw std::runtime_error("gen_buckets: no resolution satisfies area " +
                                 std::to_string(target_area) + " within the aspect band");
    }
    return out;
}

ResolutionBucket match_bucket(int image_w, int image_h,
                              const std::vector<ResolutionBucket>& buckets) {
    if (buckets.empty()) {
        throw std::invalid_argument("match_bucket: bucket list is empty");
    }
    if (image_w < 1 || image_h < 1) {
        throw std::invalid_argument("match_bucket: image dimensions must be >= 1");
    }
    const double target = std::log(static_cast<double>(image_w) / image_h);
    const ResolutionBucket* best = nullptr;
    double best_dist = 0.0;
    for (const auto& b : buckets) {
        const double dist = std::abs(std::log(static_cast<double>(b.width_px) / b.height_px) - target);
        if (best == nullptr) {
            best = &b;
            best_dist = dist;
            continue;
        }
        if (dist < best_dist) {
            best = &b;
            best_dist = dist;
        } else if (dist == best_dist) {
            const long area_b = static_cast<long>(b.width_px) * b.height_px;
            const long area_best = static_cast<long>(best->width_px) * best->height_px;
            if (area_b > area_best ||
                (area_b == area_best &&
                 (b.width_px < best->width_px ||
                  (b.width_px == best->width_px && b.height_px < best->height_px)))) {
                best = &b;
            }
        }
    }
    return *best;
}

namespace {

// bilinear sample with pixel-center alignment; clamps at the borders
void sample_bilinear(const RasterImage& src, double x, double y, double out[3]) {
    const double fx = std::clamp(x, 0.0, static_cast<double>(src.width - 1));
    const double fy = std::clamp(y, 0.0, static_cast<double>(src.height - 1));
    const int x0 = static_cast<int>(std::floor(fx));
    const int y0 = static_cast<int>(std::floor(fy));
    const int x1 = std::min(x0 + 1, src.width - 1);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double tx = fx - x0;
    const double ty = fy - y0;
    const double* p00 = src.at(x0, y0);
    const double* p10 = src.at(x1, y0);
    const double* p01 = src.at(x0, y1);
    const double* p11 = src.at(x1, y1);
    for (int c = 0; c < 3; ++c) {
        const double top = p00[c] * (1.0 - tx) + p10[c] * tx;
        const double bot = p01[c] * (1.0 - tx) + p11[c] * tx;
        out[c] = top * (1.0 - ty) + bot * ty;
    }
}

}  // namespace

RasterImage fit_image(const RasterImage& image, const ResolutionBucket& bucket) {
    if (image.width < 1 || image.height < 1) {
        throw std::invalid_argument("fit_image: degenerate input image");
    }
    if (bucket.width_px < 1 || bucket.height_px < 1) {
        throw std::invalid_argument("fit_image: degenerate bucket");
    }
    if (image.width == bucket.width_px && image.height == bucket.height_px) {
        return image;
    }

    const double scale = std::max(static_cast<double>(bucket.width_px) / image.width,
                                  static_cast<double>(bucket.height_px) / image.height);
    const int scaled_w = std::max(bucket.width_px, static_cast<int>(std::lround(image.width * scale)));
    const int scaled_h = std::max(bucket.height_px, static_cast<int>(std::lround(image.height * scale)));
    const double off_x = (scaled_w - bucket.width_px) / 2.0;
    const double off_y = (scaled_h - bucket.height_px) / 2.0;

    RasterImage out = make_image(bucket.width_px, bucket.height_px);
    const double inv_scale_x = static_cast<double>(image.width) / scaled_w;
    const double inv_scale_y = static_cast<double>(image.height) / scaled_h;
    for (int y = 0; y < bucket.height_px; ++y) {
        for (int x = 0; x < bucket.width_px; ++x) {
            // position in the scaled image, then back into source coordinates
            const double sx = (x + off_x + 0.5) * inv_scale_x - 0.5;
            const double sy = (y + off_y + 0.5) * inv_scale_y - 0.5;
            sample_bilinear(image, sx, sy, out.at(x, y));
        }
    }
    return out;
}

StagePlan make_stage_plan(const std::vector<double>& target_areas, int patch_px, double tolerance,
                          AspectRange aspect, int max_side) {
    if (target_areas.empty()) {
        throw std::invalid_argument("make_stage_plan: need at least one stage");
    }
    StagePlan plan;
    double prev = 0.0;
    for (double area : target_areas) {
        if (area <= prev) {
            throw std::invalid_argument("make_stage_plan: target areas must be strictly increasing");
        }
        prev = area;
        Stage stage;
        stage.target_area = area;
        stage.area_tolerance = tolerance;
        stage.aspect = aspect;
        stage.buckets = gen_buckets(area, patch_px, tolerance, aspect, max_side);
        plan.stages.push_back(std::move(stage));
    }
    return plan;
}

}  // namespace mmgen
