#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmgen/decoding.hpp"
#include "mmgen/model.hpp"
#include "mmgen/resolution.hpp"
#include "mmgen/training.hpp"
#include "mmgen/vocab.hpp"

namespace mmgen {

inline constexpr int kConfigFormatVersion = 1;

// One run configuration for the whole pipeline. Defaults carry the reference
// training constants (lr 2e-5, wd 0.1, betas (0.9, 0.95), z-loss 1e-5,
// context drop 10%, dropout 0.05, text top-k 5, image T=1.0/top-k 2000/CFG 4)
// with stage areas scaled down to desk size; every field can be overridden in
// the config file.
struct RunConfig {
    uint64_t seed = 0;

    // vocabulary / tokenizer; the codebook default keeps the image top-k
    // default (2000) inside the vocabulary
    int text_size = 256;
    int codebook_size = 2048;
    int max_side = 16;
    int patch_px = 8;
    std::string codebook_path = "codebook.json";

    // progressive resolution stages
    std::vector<double> stage_areas = {64.0 * 64.0, 96.0 * 96.0, 128.0 * 128.0};
    double area_tolerance = 0.15;
    double aspect_min = 0.5;
    double aspect_max = 2.0;

    // model
    int layers = 4;
    int heads = 4;
    int model_dim = 64;
    int max_seq = 512;
    double rope_base = 10000.0;
    double dropout_p = 0.05;

    // training
    double lr = 2e-5;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double z_weight = 1e-5;
    double context_drop_p = 0.1;
    int batch_size = 8;
    std::vector<int> steps_per_stage = {200, 200, 200};

    // decoding defaults
    DecodeParams text_decode{1.0, 5, 0.0};
    DecodeParams image_decode{1.0, 2000, 4.0};
    int max_tokens = 400;
    bool constrained = true;

    VocabManifest manifest() const;
    ModelConfig model_config() const;
    StagePlan stage_plan() const;
    TrainHyper train_hyper(int steps) const;

    // every violated constraint, empty when the config is consistent
    std::vector<std::string> violations() const;
};

std::string config_to_json(const RunConfig& config);
RunConfig config_from_json(const std::string& text);
RunConfig load_config(const std::string& path);
void save_config(const RunConfig& config, const std::string& path);

// FNV-1a over the canonical JSON form; names the run directory.
uint64_t config_hash(const RunConfig& config);

}  // namespace mmgen
