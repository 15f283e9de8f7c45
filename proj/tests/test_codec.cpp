#include "doctest.h"

#include <stdexcept>

#include <cmath>
#include <cstdio>
#include <limits>

#include "mmgen/codec.hpp"
#include "mmgen/rng.hpp"

using namespace mmgen;

namespace {

RasterImage random_image(int w, int h, Rng& rng) {
    RasterImage img = make_image(w, h);
    for (double& v : img.pixels) {
        v = rng.next_unit();
    }
    return img;
}

// independent per-patch nearest-entry oracle
int brute_force_code(const RasterImage& img, const Codebook& cb, int row, int col) {
    const auto patch = extract_patch(img, cb.patch_px, row, col);
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int e = 0; e < cb.size(); ++e) {
        double d = 0.0;
        for (size_t i = 0; i < patch.size(); ++i) {
            const double diff = patch[i] - cb.entries[e][i];
            d += diff * diff;
        }
        if (d < best_d) {
            best_d = d;
            best = e;
        }
    }
    return best;
}

}  // namespace

TEST_CASE("two-cluster codebook recovers black and white") {
    const std::vector<RasterImage> images{make_image(16, 16, 0, 0, 0), make_image(16, 16, 1, 1, 1)};
    const Codebook cb = build_codebook(images, 2, 8, 42);
    REQUIRE(cb.size() == 2);
    // each centroid is within 1e-6 per channel of one pole, and both poles appear
    int black = -1, white = -1;
    for (int e = 0; e < 2; ++e) {
        bool all0 = true, all1 = true;
        for (double v : cb.entries[e]) {
            all0 = all0 && std::abs(v) <= 1e-6;
            all1 = all1 && std::abs(v - 1.0) <= 1e-6;
        }
        if (all0) black = e;
        if (all1) white = e;
    }
    CHECK(black >= 0);
    CHECK(white >= 0);
    CHECK(black != white);
}

TEST_CASE("k=1 yields the global patch mean") {
    Rng rng(9);
    const std::vector<RasterImage> images{random_image(16, 8, rng), random_image(8, 8, rng)};
    const Codebook cb = build_codebook(images, 1, 8, 1);
    REQUIRE(cb.size() == 1);
    // oracle: fixed-order mean over all patches
    std::vector<double> mean(3 * 8 * 8, 0.0);
    size_t count = 0;
    for (const auto& img : images) {
        for (int r = 0; r < img.height / 8; ++r) {
            for (int c = 0; c < img.width / 8; ++c) {
                const auto patch = extract_patch(img, 8, r, c);
                for (size_t i = 0; i < patch.size(); ++i) {
                    mean[i] += patch[i];
                }
                ++count;
            }
        }
    }
    for (size_t i = 0; i < mean.size(); ++i) {
        CHECK(cb.entries[0][i] == doctest::Approx(mean[i] / count).epsilon(1e-12));
    }
}

TEST_CASE("codebook construction is deterministic") {
    Rng rng(17);
    const std::vector<RasterImage> images{random_image(32, 32, rng)};
    const Codebook a = build_codebook(images, 4, 8, 123);
    const Codebook b = build_codebook(images, 4, 8, 123);
    CHECK(a.entries == b.entries);
}

TEST_CASE("build_codebook rejects bad inputs") {
    const std::vector<RasterImage> one{make_image(8, 8)};
    CHECK_THROWS_AS(build_codebook(one, 2, 8, 0), std::invalid_argument);  // 1 patch < size 2
    const std::vector<RasterImage> odd{make_image(12, 8)};
    CHECK_THROWS_AS(build_codebook(odd, 1, 8, 0), std::invalid_argument);  // 12 % 8 != 0
}

TEST_CASE("encode maps patches to nearest entries") {
    Codebook cb;
    cb.patch_px = 8;
    cb.entries.push_back(std::vector<double>(192, 1.0));  // entry 0: white
    cb.entries.push_back(std::vector<double>(192, 0.0));  // entry 1: black

    SUBCASE("uniform white image") {
        const ImageTokenGrid grid = encode_image(make_image(16, 16, 1, 1, 1), cb, 16);
        CHECK(grid.height == 2);
        CHECK(grid.width == 2);
        CHECK(grid.codes == std::vector<int>{0, 0, 0, 0});
    }
    SUBCASE("tiling of entries matches exactly") {
        RasterImage img = make_image(16, 8);
        for (int y = 0; y < 8; ++y) {
            for (int x = 0; x < 8; ++x) {
                img.at(x, y)[0] = img.at(x, y)[1] = img.at(x, y)[2] = 1.0;  // left patch white
            }
        }
        const ImageTokenGrid grid = encode_image(img, cb, 16);
        CHECK(grid.codes == std::vector<int>{0, 1});
    }
    SUBCASE("equidistant patch breaks toward the lower index") {
        const ImageTokenGrid grid = encode_image(make_image(8, 8, 0.5, 0.5, 0.5), cb, 16);
        CHECK(grid.codes == std::vector<int>{0});
    }
    SUBCASE("oversized grid rejected") {
        CHECK_THROWS_AS(encode_image(make_image(32, 8), cb, 3), std::invalid_argument);
    }
}

TEST_CASE("decode replaces codes with prototypes") {
    Rng rng(5);
    const std::vector<RasterImage> images{random_image(32, 32, rng)};
    const Codebook cb = build_codebook(images, 4, 8, 7);

    SUBCASE("1x1 grid equals its entry") {
        const RasterImage img = decode_grid(ImageTokenGrid{1, 1, {2}}, cb);
        CHECK(extract_patch(img, 8, 0, 0) == cb.entries[2]);
    }
    SUBCASE("code out of range") {
        CHECK_THROWS_AS(decode_grid(ImageTokenGrid{1, 1, {4}}, cb), std::out_of_range);
    }
    SUBCASE("decode of encode is a fixed point on codebook tilings") {
        const RasterImage tiling = decode_grid(ImageTokenGrid{2, 2, {0, 3, 1, 2}}, cb);
        const ImageTokenGrid grid = encode_image(tiling, cb, 16);
        CHECK(grid.codes == std::vector<int>{0, 3, 1, 2});
        CHECK(decode_grid(grid, cb) == tiling);
    }
}

TEST_CASE("encode-decode-encode is idempotent and optimal") {
    Rng rng(77);
    const std::vector<RasterImage> train{random_image(32, 32, rng), random_image(32, 32, rng)};
    const Codebook cb = build_codebook(train, 6, 8, 3);
    const RasterImage img = random_image(24, 16, rng);
    const ImageTokenGrid once = encode_image(img, cb, 16);
    const ImageTokenGrid twice = encode_image(decode_grid(once, cb), cb, 16);
    CHECK(once == twice);

    // quantization optimality against the brute-force oracle
    for (int r = 0; r < once.height; ++r) {
        for (int c = 0; c < once.width; ++c) {
            CHECK(once.codes[r * once.width + c] == brute_force_code(img, cb, r, c));
        }
    }

    // reconstruction error per patch never beats the nearest-entry distance
    const RasterImage recon = decode_grid(once, cb);
    for (int r = 0; r < once.height; ++r) {
        for (int c = 0; c < once.width; ++c) {
            const auto orig = extract_patch(img, 8, r, c);
            const auto rec = extract_patch(recon, 8, r, c);
            const double err = patch_sq_distance(orig, rec);
            const double nearest = patch_sq_distance(orig, cb.entries[once.codes[r * once.width + c]]);
            CHECK(err == doctest::Approx(nearest).epsilon(1e-12));
        }
    }
}

TEST_CASE("codebook file round-trips") {
    Rng rng(2);
    const std::vector<RasterImage> images{random_image(16, 16, rng)};
    const Codebook cb = build_codebook(images, 3, 8, 1);
    const std::string path = "test_codebook.json";
    save_codebook(cb, path);
    const Codebook loaded = load_codebook(path);
    CHECK(loaded.patch_px == cb.patch_px);
    CHECK(loaded.entries == cb.entries);
    std::remove(path.c_str());
}

TEST_CASE("ppm round-trips at byte precision") {
    RasterImage img = make_image(5, 3);
    Rng rng(8);
    for (double& v : img.pixels) {
        // quantized values survive the byte format exactly
        v = static_cast<double>(rng.next_below(256)) / 255.0;
    }
    const std::string path = "test_image.ppm";
    save_ppm(img, path);
    const RasterImage loaded = load_ppm(path);
    CHECK(loaded.width == img.width);
    CHECK(loaded.height == img.height);
    for (size_t i = 0; i < img.pixels.size(); ++i) {
        CHECK(loaded.pixels[i] == doctest::Approx(img.pixels[i]).epsilon(1e-12));
    }
    std::remove(path.c_str());
}

TEST_CASE("synth image references") {
    const RasterImage solid = load_image("synth:solid:red:16x8");
    CHECK(solid.width == 16);
    CHECK(solid.height == 8);
    CHECK(solid.at(3, 2)[0] == 1.0);
    CHECK(solid.at(3, 2)[1] == 0.0);

    const RasterImage stripes = load_image("synth:stripes:white:black:4:16x8");
    CHECK(stripes.at(0, 0)[0] == 1.0);
    CHECK(stripes.at(4, 0)[0] == 0.0);
    CHECK(stripes.at(8, 0)[0] == 1.0);

    const RasterImage custom = load_image("synth:solid:0.25,0.5,0.75:8x8");
    CHECK(custom.at(0, 0)[1] == 0.5);

    CHECK_THROWS(load_image("synth:nonsense:1x1"));
}
