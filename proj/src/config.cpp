#include "mmgen/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace mmgen {

using nlohmann::json;

VocabManifest RunConfig::manifest() const {
    return build_vocab(text_size, codebook_size, max_side, patch_px);
}

ModelConfig RunConfig::model_config() const {
    ModelConfig config;
    config.layers = layers;
    config.heads = heads;
    config.model_dim = model_dim;
    config.vocab_total = manifest().total();
    config.max_seq = max_seq;
    config.rope_base = rope_base;
    config.dropout_p = dropout_p;
    config.seed = seed;
    return config;
}

StagePlan RunConfig::stage_plan() const {
    return make_stage_plan(stage_areas, patch_px, area_tolerance, AspectRange{aspect_min, aspect_max},
                           max_side);
}

TrainHyper RunConfig::train_hyper(int steps) const {
    TrainHyper hyper;
    hyper.lr = lr;
    hyper.weight_decay = weight_decay;
    hyper.beta1 = beta1;
    hyper.beta2 = beta2;
    hyper.z_weight = z_weight;
    hyper.context_drop_p = context_drop_p;
    hyper.batch_size = batch_size;
    hyper.steps = steps;
    hyper.seed = seed;
    return hyper;
}

std::vector<std::string> RunConfig::violations() const {
    std::vector<std::string> out;
    if (text_size < 1 || codebook_size < 1 || max_side < 1 || patch_px < 1) {
        out.push_back("vocab: text_size, codebook_size, max_side and patch_px must be >= 1");
    }
    int vocab_total = 0;
    if (out.empty()) {
        vocab_total = manifest().total();
    }
    try {
        model_config().validate();
    } catch (const std::exception& e) {
        out.push_back(std::string("model: ") + e.what());
    }
    try {
        stage_plan();
    } catch (const std::exception& e) {
        out.push_back(std::string("stages: ") + e.what());
    }
    if (steps_per_stage.size() != stage_areas.size()) {
        out.push_back("training: steps_per_stage must list one entry per stage");
    }
    for (int steps : steps_per_stage) {
        if (steps < 0) {
            out.push_back("training: steps_per_stage entries must be >= 0");
            break;
        }
    }
    if (!(lr >= 0.0) || !(weight_decay >= 0.0)) {
        out.push_back("training: lr and weight_decay must be >= 0");
    }
    if (!(beta1 >= 0.0) || beta1 >= 1.0 || !(beta2 >= 0.0) || beta2 >= 1.0) {
        out.push_back("training: betas must lie in [0, 1)");
    }
    if (!(z_weight >= 0.0)) {
        out.push_back("training: z_weight must be >= 0");
    }
    if (context_drop_p < 0.0 || context_drop_p > 1.0) {
        out.push_back("training: context_drop_p must lie in [0, 1]");
    }
    if (batch_size < 1) {
        out.push_back("training: batch_size must be >= 1");
    }
    if (vocab_total > 0) {
        try {
            text_decode.validate(vocab_total);
        } catch (const std::exception& e) {
            out.push_back(std::string("decode.text: ") + e.what());
        }
        try {
            image_decode.validate(vocab_total);
        } catch (const std::exception& e) {
            out.push_back(std::string("decode.image: ") + e.what());
        }
    }
    if (max_tokens < 1 || max_tokens > max_seq) {
        out.push_back("decode: max_tokens must lie in [1, max_seq]");
    }
    return out;
}

namespace {

json decode_to_json(const DecodeParams& p) {
    return json{{"temperature", p.temperature}, {"top_k", p.top_k}, {"cfg_scale", p.cfg_scale}};
}

DecodeParams decode_from_json(const json& j, const DecodeParams& defaults) {
    DecodeParams p = defaults;
    p.temperature = j.value("temperature", p.temperature);
    p.top_k = j.value("top_k", p.top_k);
    p.cfg_scale = j.value("cfg_scale", p.cfg_scale);
    return p;
}

}  // namespace

std::string config_to_json(const RunConfig& c) {
    json j;
    j["format_version"] = kConfigFormatVersion;
    j["seed"] = c.seed;
    j["vocab"] = {{"text_size", c.text_size},
                  {"codebook_size", c.codebook_size},
                  {"max_side", c.max_side},
                  {"patch_px", c.patch_px}};
    j["codebook_path"] = c.codebook_path;
    j["stages"] = {{"target_areas", c.stage_areas},
                   {"area_tolerance", c.area_tolerance},
                   {"aspect_min", c.aspect_min},
                   {"aspect_max", c.aspect_max}};
    j["model"] = {{"layers", c.layers},     {"heads", c.heads},
                  {"model_dim", c.model_dim}, {"max_seq", c.max_seq},
                  {"rope_base", c.rope_base}, {"dropout_p", c.dropout_p}};
    j["training"] = {{"lr", c.lr},
                     {"weight_decay", c.weight_decay},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"z_weight", c.z_weight},
                     {"context_drop_p", c.context_drop_p},
                     {"batch_size", c.batch_size},
                     {"steps_per_stage", c.steps_per_stage}};
    j["decode"] = {{"text", decode_to_json(c.text_decode)},
                   {"image", decode_to_json(c.image_decode)},
                   {"max_tokens", c.max_tokens},
                   {"constrained", c.constrained}};
    return j.dump(2) + "\n";
}

RunConfig config_from_json(const std::string& text) {
    const json j = json::parse(text);
    const int version = j.value("format_version", kConfigFormatVersion);
    if (version != kConfigFormatVersion) {
        throw std::runtime_error("unsupported config format_version " + std::to_string(version));
    }
    RunConfig c;
    c.seed = j.value("seed", c.seed);
    if (j.contains("vocab")) {
        const auto& v = j.at("vocab");
        c.text_size = v.value("text_size", c.text_size);
        c.codebook_size = v.value("codebook_size", c.codebook_size);
        c.max_side = v.value("max_side", c.max_side);
        c.patch_px = v.value("patch_px", c.patch_px);
    }
    c.codebook_path = j.value("codebook_path", c.codebook_path);
    if (j.contains("stages")) {
        const auto& s = j.at("stages");
        c.stage_areas = s.value("target_areas", c.stage_areas);
        c.area_tolerance = s.value("area_tolerance", c.area_tolerance);
        c.aspect_min = s.value("aspect_min", c.aspect_min);
        c.aspect_max = s.value("aspect_max", c.aspect_max);
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        c.layers = m.value("layers", c.layers);
        c.heads = m.value("heads", c.heads);
        c.model_dim = m.value("model_dim", c.model_dim);
        c.max_seq = m.value("max_seq", c.max_seq);
        c.rope_base = m.value("rope_base", c.rope_base);
        c.dropout_p = m.value("dropout_p", c.dropout_p);
    }
    if (j.contains("training")) {
        const auto& t = j.at("training");
        c.lr = t.value("lr", c.lr);
        c.weight_decay = t.value("weight_decay", c.weight_decay);
        c.beta1 = t.value("beta1", c.beta1);
        c.beta2 = t.value("beta2", c.beta2);
        c.z_weight = t.value("z_weight", c.z_weight);
        c.context_drop_p = t.value("context_drop_p", c.context_drop_p);
        c.batch_size = t.value("batch_size", c.batch_size);
        c.steps_per_stage = t.value("steps_per_stage", c.steps_per_stage);
    }
    if (j.contains("decode")) {
        const auto& d = j.at("decode");
        if (d.contains("text")) {
            c.text_decode = decode_from_json(d.at("text"), c.text_decode);
        }
        if (d.contains("image")) {
            c.image_decode = decode_from_json(d.at("image"), c.image_decode);
        }
        c.max_tokens = d.value("max_tokens", c.max_tokens);
        c.constrained = d.value("constrained", c.constrained);
    }
    return c;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot read config file: " + path);
    }
    std::stringstream buf;
    buf << in.rdbuf();
    return config_from_json(buf.str());
}

void save_config(const RunConfig& config, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write config file: " + path);
    }
    out << config_to_json(config);
}

uint64_t config_hash(const RunConfig& config) {
    const std::string text = config_to_json(config);
    uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace mmgen
