#include "doctest.h"

#include <stdexcept>

#include <algorithm>
#include <cmath>
#include <set>

#include "mmgen/resolution.hpp"
#include "mmgen/rng.hpp"

using namespace mmgen;

namespace {

// independent lattice-filter oracle
std::vector<ResolutionBucket> brute_force_buckets(double area, int patch, double tol,
                                                  AspectRange aspect, int max_side) {
    std::vector<ResolutionBucket> out;
    for (int w = patch; w <= max_side * patch; w += patch) {
        for (int h = patch; h <= max_side * patch; h += patch) {
            const double a = static_cast<double>(w) * h;
            const double r = static_cast<double>(w) / h;
            if (std::abs(a - area) <= tol * area && r >= aspect.min_ratio && r <= aspect.max_ratio) {
                out.push_back({w, h});
            }
        }
    }
    std::sort(out.begin(), out.end(), [](auto& a, auto& b) {
        return a.width_px != b.width_px ? a.width_px < b.width_px : a.height_px < b.height_px;
    });
    return out;
}

}  // namespace

TEST_CASE("gen_buckets worked example") {
    const auto buckets = gen_buckets(4096, 16, 0.15, {0.5, 2.0}, 6);
    const std::vector<ResolutionBucket> expect{{48, 80}, {48, 96}, {64, 64}, {80, 48}, {96, 48}};
    CHECK(buckets == expect);
    // a wider lattice adds no candidates inside this aspect band
    CHECK(gen_buckets(4096, 16, 0.15, {0.5, 2.0}, 16) == expect);
}

TEST_CASE("gen_buckets equals the brute-force lattice filter") {
    Rng rng(19);
    for (int trial = 0; trial < 30; ++trial) {
        const double area = 1024 + static_cast<double>(rng.next_below(20000));
        const int patch = 8 + 8 * static_cast<int>(rng.next_below(3));
        const double tol = 0.05 + 0.3 * rng.next_unit();
        const AspectRange aspect{0.3 + 0.4 * rng.next_unit(), 1.2 + 2.0 * rng.next_unit()};
        const int max_side = 8 + static_cast<int>(rng.next_below(16));
        const auto oracle = brute_force_buckets(area, patch, tol, aspect, max_side);
        if (oracle.empty()) {
            CHECK_THROWS(gen_buckets(area, patch, tol, aspect, max_side));
        } else {
            CHECK(gen_buckets(area, patch, tol, aspect, max_side) == oracle);
        }
    }
}

TEST_CASE("gen_buckets unique square and infeasible band") {
    const auto buckets = gen_buckets(256, 16, 0.01, {1.0, 1.0}, 16);
    REQUIRE(buckets.size() == 1);
    CHECK(buckets[0] == ResolutionBucket{16, 16});
    // sides reach only 96, so no (w, h) attains ratio 10 at this area
    CHECK_THROWS_AS(gen_buckets(4096, 16, 0.15, {10.0, 20.0}, 6), std::runtime_error);
    CHECK_THROWS_AS(gen_buckets(4096, 16, 0.0, {0.5, 2.0}, 16), std::invalid_argument);
}

TEST_CASE("generated grids always fit max_side") {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const int max_side = 4 + static_cast<int>(rng.next_below(20));
        const int patch = 8;
        const double area = std::pow(patch * (1 + rng.next_below(max_side)), 2.0);
        std::vector<ResolutionBucket> buckets;
        try {
            buckets = gen_buckets(area, patch, 0.2, {0.5, 2.0}, max_side);
        } catch (const std::runtime_error&) {
            continue;
        }
        for (const auto& b : buckets) {
            CHECK(b.width_px / patch <= max_side);
            CHECK(b.height_px / patch <= max_side);
            CHECK(b.width_px % patch == 0);
            CHECK(b.height_px % patch == 0);
        }
    }
}

TEST_CASE("match_bucket picks the closest log-aspect") {
    const std::vector<ResolutionBucket> buckets{{64, 64}, {96, 48}, {48, 96}};
    CHECK(match_bucket(1000, 500, buckets) == ResolutionBucket{96, 48});
    CHECK(match_bucket(300, 300, buckets) == ResolutionBucket{64, 64});
}

TEST_CASE("match_bucket tie-breaks by area then lexicographic") {
    // both distances equal |ln 2|, equal areas; (48,96) < (96,48)
    const std::vector<ResolutionBucket> equal_area{{96, 48}, {48, 96}};
    CHECK(match_bucket(100, 100, equal_area) == ResolutionBucket{48, 96});

    // same aspect distance, different areas: larger area wins
    const std::vector<ResolutionBucket> by_area{{32, 64}, {64, 128}};
    CHECK(match_bucket(50, 100, by_area) == ResolutionBucket{64, 128});

    CHECK_THROWS_AS(match_bucket(10, 10, {}), std::invalid_argument);
}

TEST_CASE("match_bucket is scale invariant") {
    const std::vector<ResolutionBucket> buckets{{64, 64}, {96, 48}, {48, 96}, {80, 64}};
    Rng rng(13);
    for (int trial = 0; trial < 50; ++trial) {
        const int w = 1 + static_cast<int>(rng.next_below(2000));
        const int h = 1 + static_cast<int>(rng.next_below(2000));
        const int k = 2 + static_cast<int>(rng.next_below(9));
        CHECK(match_bucket(w, h, buckets) == match_bucket(k * w, k * h, buckets));
    }
}

TEST_CASE("fit_image covers and center-crops") {
    SUBCASE("pure downscale") {
        RasterImage img = make_image(128, 128, 0.25, 0.5, 0.75);
        const RasterImage out = fit_image(img, {64, 64});
        CHECK(out.width == 64);
        CHECK(out.height == 64);
        for (size_t i = 0; i < out.pixels.size(); i += 3) {
            CHECK(out.pixels[i] == doctest::Approx(0.25));
            CHECK(out.pixels[i + 1] == doctest::Approx(0.5));
        }
    }
    SUBCASE("center-crop at unit scale is an exact pixel copy") {
        RasterImage img = make_image(128, 64);
        Rng rng(21);
        for (double& v : img.pixels) {
            v = rng.next_unit();
        }
        const RasterImage out = fit_image(img, {64, 64});
        REQUIRE(out.width == 64);
        REQUIRE(out.height == 64);
        for (int y = 0; y < 64; ++y) {
            for (int x = 0; x < 64; ++x) {
                CHECK(out.at(x, y)[0] == img.at(x + 32, y)[0]);
                CHECK(out.at(x, y)[2] == img.at(x + 32, y)[2]);
            }
        }
    }
    SUBCASE("identity on an image already at bucket size") {
        RasterImage img = make_image(48, 32);
        Rng rng(6);
        for (double& v : img.pixels) {
            v = rng.next_unit();
        }
        CHECK(fit_image(img, {48, 32}) == img);
    }
    SUBCASE("degenerate input rejected") {
        RasterImage bad;
        CHECK_THROWS_AS(fit_image(bad, {8, 8}), std::invalid_argument);
    }
}

TEST_CASE("stage plans require strictly increasing areas") {
    const StagePlan plan = make_stage_plan({64.0 * 64, 96.0 * 96, 128.0 * 128}, 8, 0.15,
                                           {0.5, 2.0}, 16);
    REQUIRE(plan.stages.size() == 3);
    CHECK(plan.stages[0].target_area < plan.stages[1].target_area);
    for (const auto& stage : plan.stages) {
        CHECK_FALSE(stage.buckets.empty());
    }
    CHECK_THROWS_AS(make_stage_plan({4096, 4096}, 8, 0.15, {0.5, 2.0}, 16), std::invalid_argument);
    CHECK_THROWS_AS(make_stage_plan({}, 8, 0.15, {0.5, 2.0}, 16), std::invalid_argument);
}
