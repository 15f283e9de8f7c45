#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmgen/image.hpp"
#include "mmgen/sequence.hpp"

namespace mmgen {

inline constexpr int kCodebookFormatVersion = 1;

// Fixed set of prototype patches; entry index == image-code token index.
struct Codebook {
    int patch_px = 0;
    std::vector<std::vector<double>> entries;  // each 3 * patch_px * patch_px, channels in [0,1]

    int size() const { return static_cast<int>(entries.size()); }
};

// k-means over all patches of the input images (row-major patch order per
// image, images in input order). Deterministic for fixed inputs and seed:
// centroid accumulation is fixed-order, ties in assignment break toward the
// lowest entry index, and empty clusters are reseeded from the patch farthest
// from its assigned centroid. At most 50 Lloyd iterations.
Codebook build_codebook(const std::vector<RasterImage>& images, int size, int patch_px,
                        uint64_t seed);

// Nearest entry per patch by squared Euclidean distance, ties toward the
// lowest entry index. Grid shape is (height/patch_px, width/patch_px).
ImageTokenGrid encode_image(const RasterImage& image, const Codebook& codebook, int max_side);

// Replaces each code with its prototype patch.
RasterImage decode_grid(const ImageTokenGrid& grid, const Codebook& codebook);

// Patch extraction shared with tests: patch (row, col) of the image, length
// 3 * patch_px * patch_px, pixel rows concatenated.
std::vector<double> extract_patch(const RasterImage& image, int patch_px, int row, int col);

double patch_sq_distance(const std::vector<double>& a, const std::vector<double>& b);

void save_codebook(const Codebook& codebook, const std::string& path);
Codebook load_codebook(const std::string& path);

}  // namespace mmgen
