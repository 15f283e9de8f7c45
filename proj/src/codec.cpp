#include "mmgen/codec.hpp"

#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "mmgen/rng.hpp"

namespace mmgen {

std::vector<double> extract_patch(const RasterImage& image, int patch_px, int row, int col) {
    std::vector<double> patch(3 * static_cast<size_t>(patch_px) * patch_px);
    size_t k = 0;
    for (int y = 0; y < patch_px; ++y) {
        const double* src = image.at(col * patch_px, row * patch_px + y);
        for (int i = 0; i < 3 * patch_px; ++i) {
            patch[k++] = src[i];
        }
    }
    return patch;
}

double patch_sq_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        d += diff * diff;
    }
    return d;
}

namespace {

void check_dims(const RasterImage& image, int patch_px) {
    if (image.width < 1 || image.height < 1) {
        throw std::invalid_argument("image has degenerate dimensions");
    }
    if (image.width % patch_px != 0 || image.height % patch_px != 0) {
        throw std::invalid_argument("image " + std::to_string(image.width) + "x" +
                                    std::to_string(image.height) +
                                    " is not a multiple of patch_px=" + std::to_string(patch_px));
    }
}

std::vector<std::vector<double>> collect_patches(const std::vector<RasterImage>& images,
                                                 int patch_px) {
    std::vector<std::vector<double>> patches;
    for (const auto& img : images) {
        check_dims(img, patch_px);
        const int rows = img.height / patch_px;
        const int cols = img.width / patch_px;
        for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < cols; ++c) {
                patches.push_back(extract_patch(img, patch_px, r, c));
            }
        }
    }
    return patches;
}

size_t nearest_entry(const std::vector<double>& patch,
                     const std::vector<std::vector<double>>& entries) {
    size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t e = 0; e < entries.size(); ++e) {
        const double d = patch_sq_distance(patch, entries[e]);
        if (d < best_d) {
            best_d = d;
            best = e;
        }
    }
    return best;
}

}  // namespace

Codebook build_codebook(const std::vector<RasterImage>& images, int size, int patch_px,
                        uint64_t seed) {
    if (size < 1 || patch_px < 1) {
        throw std::invalid_argument("build_codebook: size and patch_px must be >= 1");
    }
    const auto patches = collect_patches(images, patch_px);
    if (patches.size() < static_cast<size_t>(size)) {
        throw std::invalid_argument("build_codebook: " + std::to_string(patches.size()) +
                                    " patches available, need >= " + std::to_string(size));
    }

    // init: k distinct patch indices via seeded Fisher-Yates prefix
    Rng rng(derive_seed(seed, "codebook-init"));
    std::vector<size_t> order(patches.size());
    for (size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    for (size_t i = 0; i < static_cast<size_t>(size); ++i) {
        const size_t j = i + rng.next_below(order.size() - i);
        std::swap(order[i], order[j]);
    }

    std::vector<std::vector<double>> centroids(size);
    for (int e = 0; e < size; ++e) {
        centroids[e] = patches[order[e]];
    }

    constexpr int kMaxIterations = 50;
    std::vector<size_t> assign(patches.size(), 0);
    for (int iter = 0; iter < kMaxIterations; ++iter) {
        bool changed = (iter == 0);
        for (size_t p = 0; p < patches.size(); ++p) {
            const size_t e = nearest_entry(patches[p], centroids);
            if (e != assign[p]) {
                assign[p] = e;
                changed = true;
            }
        }
        if (!changed) {
            break;
        }

        std::vector<std::vector<double>> sums(size,
                                              std::vector<double>(patches[0].size(), 0.0));
        std::vector<size_t> counts(size, 0);
        for (size_t p = 0; p < patches.size(); ++p) {
            auto& sum = sums[assign[p]];
            const auto& patch = patches[p];
            for (size_t i = 0; i < patch.size(); ++i) {
                sum[i] += patch[i];
            }
            ++counts[assign[p]];
        }
        bool reseed_exhausted = false;
        for (int e = 0; e < size; ++e) {
            if (counts[e] == 0) {
                if (reseed_exhausted) {
                    continue;
                }
                // reseed from the patch farthest from its assigned centroid
                size_t far = 0;
                double far_d = -1.0;
                for (size_t p = 0; p < patches.size(); ++p) {
                    const double d = patch_sq_distance(patches[p], centroids[assign[p]]);
                    if (d > far_d) {
                        far_d = d;
                        far = p;
                    }
                }
                if (far_d <= 0.0) {
                    // every patch already sits on a centroid; further clusters
                    // would stay empty no matter the seed
                    reseed_exhausted = true;
                    continue;
                }
                centroids[e] = patches[far];
                assign[far] = static_cast<size_t>(e);
            } else {
                for (size_t i = 0; i < sums[e].size(); ++i) {
                    centroids[e][i] = sums[e][i] / static_cast<double>(counts[e]);
                }
            }
        }
    }

    Codebook cb;
    cb.patch_px = patch_px;
    cb.entries = std::move(centroids);
    return cb;
}

ImageTokenGrid encode_image(const RasterImage& image, const Codebook& codebook, int max_side) {
    check_dims(image, codebook.patch_px);
    const int rows = image.height / codebook.patch_px;
    const int cols = image.width / codebook.patch_px;
    if (rows > max_side || cols > max_side) {
        throw std::invalid_argument("encode_image: grid " + std::to_string(rows) + "x" +
                                    std::to_string(cols) + " exceeds max_side=" +
                                    std::to_string(max_side));
    }
    ImageTokenGrid grid{rows, cols, {}};
    grid.codes.reserve(static_cast<size_t>(rows) * cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            const auto patch = extract_patch(image, codebook.patch_px, r, c);
            grid.codes.push_back(static_cast<int>(nearest_entry(patch, codebook.entries)));
        }
    }
    return grid;
}

RasterImage decode_grid(const ImageTokenGrid& grid, const Codebook& codebook) {
    if (grid.height < 1 || grid.width < 1 ||
        grid.codes.size() != static_cast<size_t>(grid.height) * grid.width) {
        throw std::invalid_argument("decode_grid: malformed grid");
    }
    const int pp = codebook.patch_px;
    RasterImage img = make_image(grid.width * pp, grid.height * pp);
    for (int r = 0; r < grid.height; ++r) {
        for (int c = 0; c < grid.width; ++c) {
            const int code = grid.codes[static_cast<size_t>(r) * grid.width + c];
            if (code < 0 || code >= codebook.size()) {
                throw std::out_of_range("decode_grid: code " + std::to_string(code) +
                                        " outside codebook of size " +
                                        std::to_string(codebook.size()));
            }
            const auto& entry = codebook.entries[code];
            for (int y = 0; y < pp; ++y) {
                double* dst = img.at(c * pp, r * pp + y);
                const double* src = entry.data() + static_cast<size_t>(y) * 3 * pp;
                for (int i = 0; i < 3 * pp; ++i) {
                    dst[i] = src[i];
                }
            }
        }
    }
    return img;
}

void save_codebook(const Codebook& codebook, const std::string& path) {
    nlohmann::json j;
    j["format_version"] = kCodebookFormatVersion;
    j["patch_px"] = codebook.patch_px;
    j["entries"] = codebook.entries;
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write codebook file: " + path);
    }
    out << j.dump() << "\n";
}

Codebook load_codebook(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot read codebook file: " + path);
    }
    nlohmann::json j;
    in >> j;
    const int version = j.at("format_version").get<int>();
    if (version != kCodebookFormatVersion) {
        throw std::runtime_error("unsupported codebook format_version " + std::to_string(version));
    }
    Codebook cb;
    cb.patch_px = j.at("patch_px").get<int>();
    cb.entries = j.at("entries").get<std::vector<std::vector<double>>>();
    if (cb.patch_px < 1) {
        throw std::runtime_error("codebook file has invalid patch_px");
    }
    for (const auto& e : cb.entries) {
        if (e.size() != 3 * static_cast<size_t>(cb.patch_px) * cb.patch_px) {
            throw std::runtime_error("codebook entry has wrong length");
        }
    }
    return cb;
}

}  // namespace mmgen
