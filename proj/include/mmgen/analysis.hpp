#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmgen/codec.hpp"
#include "mmgen/decoding.hpp"
#include "mmgen/model.hpp"
#include "mmgen/training.hpp"
#include "mmgen/sequence.hpp"

namespace mmgen {

struct RoleSummaryRow {
    RoleKind kind = RoleKind::Text;
    size_t count = 0;
    double mean_score = 0.0;
};

struct AttnReport {
    size_t query_position = 0;
    std::vector<double> scores;   // layer/head-averaged attention, one per position
    std::vector<TokenRole> roles;
    // one row each for SOI, EOL, HeightInd, WidthInd, ImageCode, Text
    std::vector<RoleSummaryRow> role_summary;
    AttentionProbe probe;  // full per-layer/per-head data

    std::string to_text() const;
};

// Probes attention at the last image-code token of the sequence's final
// complete image span.
AttnReport attn_report(const ModelParams& params, const VocabManifest& manifest,
                       const std::vector<TokenId>& tokens);

struct SweepSpec {
    std::string prompt;
    std::vector<double> temperatures;
    std::vector<int> top_ks;
    std::vector<double> cfg_scales;
    std::vector<uint64_t> seeds;  // one generation per (T, k, cfg, seed) cell
};

struct SweepRow {
    double temperature = 0.0;
    int top_k = 0;
    double cfg_scale = 0.0;
    uint64_t seed = 0;
    bool ok = false;
    std::string error;           // failure recorded, sweep continues
    int grid_h = 0, grid_w = 0;
    int distinct_codes = 0;
    double mean_abs_logit = 0.0;  // |conditional logit| at sampled tokens
    std::string image_path;
};

struct SweepReport {
    std::vector<SweepRow> rows;

    std::string to_text() const;
};

// One constrained generation per cell from "<query tokens> SOI" so every cell
// yields exactly one image span; decoded images are written under out_dir.
SweepReport sweep(const ModelParams& params, const VocabManifest& manifest,
                  const Codebook& codebook, const SweepSpec& spec, const std::string& out_dir);

struct LogitMagnitudeReport {
    size_t steps = 0;  // aligned length (the shorter stream)
    bool length_mismatch = false;
    size_t final_window = 0;  // last min(100, steps) steps
    double final_mean_zloss_a = 0.0;
    double final_mean_zloss_b = 0.0;
    double final_mean_maxlogit_a = 0.0;
    double final_mean_maxlogit_b = 0.0;
    double zloss_ratio_a_over_b = 0.0;

    std::string to_text() const;
};

// Compares the (log Z)^2 and max|logit| trajectories of two training runs
// (e.g. with and without z-loss), aligned by step index.
LogitMagnitudeReport logit_magnitude_report(const std::vector<StepMetrics>& a,
                                            const std::vector<StepMetrics>& b);

}  // namespace mmgen
