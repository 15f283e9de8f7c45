// Command-line entry point for the whole pipeline: vocabulary and codebook
// construction, dataset tokenization, staged training, generation, sequence
// validation, decoding sweeps, and attention reports.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "mmgen/analysis.hpp"
#include "mmgen/codec.hpp"
#include "mmgen/config.hpp"
#include "mmgen/decoding.hpp"
#include "mmgen/model.hpp"
#include "mmgen/training.hpp"
#include "mmgen/sequence.hpp"
#include "mmgen/vocab.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mmgen;

namespace {

struct ConfigError : std::runtime_error {
    explicit ConfigError(std::vector<std::string> list)
        : std::runtime_error("invalid config"), violations(std::move(list)) {}
    std::vector<std::string> violations;
};

struct Context {
    RunConfig config;
    fs::path out;
};

Context make_context(const std::string& config_path, std::string out_dir, int64_t seed_override) {
    Context ctx;
    ctx.config = load_config(config_path);
    if (seed_override >= 0) {
        ctx.config.seed = static_cast<uint64_t>(seed_override);
    }
    const auto violations = ctx.config.violations();
    if (!violations.empty()) {
        throw ConfigError(violations);
    }
    if (out_dir.empty()) {
        char name[32];
        std::snprintf(name, sizeof(name), "run-%016" PRIx64, config_hash(ctx.config));
        out_dir = (fs::path("runs") / name).string();
    }
    ctx.out = out_dir;
    fs::create_directories(ctx.out);
    return ctx;
}

void write_token_lines(const fs::path& path, const std::vector<std::vector<TokenId>>& lines) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    for (const auto& line : lines) {
        for (size_t i = 0; i < line.size(); ++i) {
            out << (i ? " " : "") << line[i];
        }
        out << "\n";
    }
}

std::vector<std::vector<TokenId>> read_token_lines(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot read " + path.string());
    }
    std::vector<std::vector<TokenId>> lines;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<TokenId> ids;
        std::istringstream ss(line);
        TokenId id;
        while (ss >> id) {
            ids.push_back(id);
        }
        lines.push_back(std::move(ids));
    }
    return lines;
}

Codebook load_codebook_for(const Context& ctx, const std::string& override_path) {
    const std::string path = override_path.empty() ? ctx.config.codebook_path : override_path;
    const Codebook cb = load_codebook(path);
    if (cb.patch_px != ctx.config.patch_px) {
        throw std::runtime_error("codebook patch_px " + std::to_string(cb.patch_px) +
                                 " does not match config patch_px " +
                                 std::to_string(ctx.config.patch_px));
    }
    if (cb.size() != ctx.config.codebook_size) {
        throw std::runtime_error("codebook has " + std::to_string(cb.size()) +
                                 " entries, config expects " +
                                 std::to_string(ctx.config.codebook_size));
    }
    return cb;
}

ModelParams load_model_for(const Context& ctx, const std::string& ckpt_path) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    if (ckpt.manifest_hash != manifest_hash(ctx.config.manifest())) {
        throw std::runtime_error("checkpoint was trained against a different vocabulary manifest");
    }
    return std::move(ckpt.params);
}

json decode_params_json(const DecodeParams& p) {
    return json{{"temperature", p.temperature}, {"top_k", p.top_k}, {"cfg_scale", p.cfg_scale}};
}

int run_cli(int argc, char** argv) {
    CLI::App app{"desk-scale multimodal autoregressive generation pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    int64_t seed_override = -1;
    app.add_option("--config", config_path, "run configuration file (JSON)")->required();
    app.add_option("--out", out_dir, "output directory (default runs/run-<config hash>)");
    app.add_option("--seed", seed_override, "override the config seed");

    // vocab-build
    auto* cmd_vocab = app.add_subcommand("vocab-build", "write the vocabulary manifest");

    // codebook-build
    auto* cmd_codebook = app.add_subcommand("codebook-build", "k-means codebook from images");
    std::string cb_dataset;
    std::vector<std::string> cb_images;
    std::string codebook_override;
    cmd_codebook->add_option("--dataset", cb_dataset, "dataset manifest supplying image refs");
    cmd_codebook->add_option("--image", cb_images, "extra image refs (path or synth: URI)");
    cmd_codebook->add_option("--codebook", codebook_override, "output path override");

    // tokenize
    auto* cmd_tokenize = app.add_subcommand("tokenize", "format a dataset into token sequences");
    std::string tok_dataset;
    int tok_stage = 0;
    std::string tok_codebook;
    cmd_tokenize->add_option("--dataset", tok_dataset, "dataset manifest (JSON lines)")->required();
    cmd_tokenize->add_option("--stage", tok_stage, "stage index whose buckets apply (default 0)");
    cmd_tokenize->add_option("--codebook", tok_codebook, "codebook path override");

    // train
    auto* cmd_train = app.add_subcommand("train", "run every progressive stage");
    std::string train_dataset;
    std::string train_codebook;
    cmd_train->add_option("--dataset", train_dataset, "dataset manifest (JSON lines)")->required();
    cmd_train->add_option("--codebook", train_codebook, "codebook path override");

    // generate
    auto* cmd_generate = app.add_subcommand("generate", "sample from a checkpoint");
    std::string gen_ckpt, gen_prompt;
    int gen_width = 0, gen_height = 0, gen_max_tokens = -1;
    bool gen_raw = false, gen_unconstrained = false;
    double gen_cfg = -1.0, gen_image_temp = -1.0, gen_text_temp = -1.0;
    int gen_image_topk = -1, gen_text_topk = -1;
    cmd_generate->add_option("--ckpt", gen_ckpt, "checkpoint file")->required();
    cmd_generate->add_option("--prompt", gen_prompt, "prompt text")->required();
    cmd_generate->add_option("--width", gen_width, "target width in pixels (t2i template)");
    cmd_generate->add_option("--height", gen_height, "target height in pixels (t2i template)");
    cmd_generate->add_flag("--raw", gen_raw, "feed prompt bytes after BOS without the dialog template");
    cmd_generate->add_flag("--unconstrained", gen_unconstrained, "disable the grammar mask");
    bool gen_stop_after_image = false;
    cmd_generate->add_flag("--stop-after-image", gen_stop_after_image,
                           "halt as soon as one image span completes");
    cmd_generate->add_option("--cfg", gen_cfg, "image-mode guidance scale");
    cmd_generate->add_option("--image-temp", gen_image_temp, "image-mode temperature");
    cmd_generate->add_option("--image-top-k", gen_image_topk, "image-mode top-k");
    cmd_generate->add_option("--text-temp", gen_text_temp, "text-mode temperature");
    cmd_generate->add_option("--text-top-k", gen_text_topk, "text-mode top-k");
    cmd_generate->add_option("--max-tokens", gen_max_tokens, "generation budget");
    std::string gen_codebook;
    cmd_generate->add_option("--codebook", gen_codebook, "codebook path override");

    // parse
    auto* cmd_parse = app.add_subcommand("parse", "validate token sequence files");
    std::string parse_tokens;
    cmd_parse->add_option("--tokens", parse_tokens, "token sequence file (one per line)")->required();

    // sweep
    auto* cmd_sweep = app.add_subcommand("sweep", "decoding hyperparameter sweep");
    std::string sweep_ckpt, sweep_prompt, sweep_codebook;
    std::vector<double> sweep_temps, sweep_cfgs;
    std::vector<int> sweep_topks;
    std::vector<uint64_t> sweep_seeds;
    cmd_sweep->add_option("--ckpt", sweep_ckpt, "checkpoint file")->required();
    cmd_sweep->add_option("--prompt", sweep_prompt, "prompt text")->required();
    cmd_sweep->add_option("--temps", sweep_temps, "temperatures");
    cmd_sweep->add_option("--top-ks", sweep_topks, "top-k values");
    cmd_sweep->add_option("--cfgs", sweep_cfgs, "guidance scales");
    cmd_sweep->add_option("--seeds", sweep_seeds, "seeds per cell");
    cmd_sweep->add_option("--codebook", sweep_codebook, "codebook path override");

    // attn
    auto* cmd_attn = app.add_subcommand("attn", "attention report at the last image token");
    std::string attn_ckpt, attn_tokens;
    int attn_line = 0;
    cmd_attn->add_option("--ckpt", attn_ckpt, "checkpoint file")->required();
    cmd_attn->add_option("--tokens", attn_tokens, "token sequence file")->required();
    cmd_attn->add_option("--line", attn_line, "line index in the token file (default 0)");

    CLI11_PARSE(app, argc, argv);

    const Context ctx = make_context(config_path, out_dir, seed_override);
    const VocabManifest manifest = ctx.config.manifest();

    if (cmd_vocab->parsed()) {
        const fs::path path = ctx.out / "vocab.json";
        save_manifest(manifest, path.string());
        std::cout << "wrote " << path.string() << " (total ids: " << manifest.total() << ")\n";
        return 0;
    }

    if (cmd_codebook->parsed()) {
        std::vector<std::string> refs = cb_images;
        if (!cb_dataset.empty()) {
            const auto records = load_dataset(cb_dataset);
            const auto dataset_refs = dataset_image_refs(records);
            refs.insert(refs.end(), dataset_refs.begin(), dataset_refs.end());
        }
        if (refs.empty()) {
            throw std::runtime_error("codebook-build needs --dataset and/or --image refs");
        }
        std::vector<RasterImage> images;
        images.reserve(refs.size());
        for (const auto& ref : refs) {
            images.push_back(load_image(ref));
        }
        const Codebook cb = build_codebook(images, ctx.config.codebook_size, ctx.config.patch_px,
                                           derive_seed(ctx.config.seed, "codebook"));
        const std::string path =
            codebook_override.empty() ? ctx.config.codebook_path : codebook_override;
        if (const fs::path parent = fs::path(path).parent_path(); !parent.empty()) {
            fs::create_directories(parent);
        }
        save_codebook(cb, path);
        std::cout << "wrote " << path << " (" << cb.size() << " entries from " << images.size()
                  << " images)\n";
        return 0;
    }

    if (cmd_tokenize->parsed()) {
        const StagePlan plan = ctx.config.stage_plan();
        if (tok_stage < 0 || tok_stage >= static_cast<int>(plan.stages.size())) {
            throw std::runtime_error("stage index outside the plan");
        }
        const Codebook cb = load_codebook_for(ctx, tok_codebook);
        const auto records = load_dataset(tok_dataset);
        std::vector<std::vector<TokenId>> token_lines;
        std::vector<std::vector<TokenId>> mask_lines;
        for (const auto& record : records) {
            const MultimodalSequence seq =
                format_dialog(manifest, record, cb, plan.stages[tok_stage].buckets);
            token_lines.push_back(seq.tokens);
            std::vector<TokenId> mask(seq.loss_mask.begin(), seq.loss_mask.end());
            mask_lines.push_back(std::move(mask));
        }
        write_token_lines(ctx.out / "tokens.txt", token_lines);
        write_token_lines(ctx.out / "tokens.mask.txt", mask_lines);
        std::cout << "wrote " << (ctx.out / "tokens.txt").string() << " (" << token_lines.size()
                  << " sequences, stage " << tok_stage << ")\n";
        return 0;
    }

    if (cmd_train->parsed()) {
        const Codebook cb = load_codebook_for(ctx, train_codebook);
        const auto records = load_dataset(train_dataset);
        const StagePlan plan = ctx.config.stage_plan();
        if (ctx.config.steps_per_stage.size() != plan.stages.size()) {
            throw std::runtime_error("steps_per_stage does not match the stage count");
        }

        save_config(ctx.config, (ctx.out / "config.json").string());
        ModelParams params = init_params(ctx.config.model_config());
        const uint64_t mhash = manifest_hash(manifest);

        std::ofstream metrics_out(ctx.out / "metrics.jsonl");
        std::vector<StepMetrics> all_metrics;
        for (size_t s = 0; s < plan.stages.size(); ++s) {
            OptState opt = make_opt_state(params.config);
            const TrainHyper hyper = ctx.config.train_hyper(ctx.config.steps_per_stage[s]);
            const auto metrics = run_stage(params, opt, records, manifest, cb, plan.stages[s],
                                           hyper, static_cast<int>(s));
            for (const auto& m : metrics) {
                json j{{"stage", m.stage},
                       {"step", m.step},
                       {"ce", m.ce},
                       {"zloss", m.zloss},
                       {"mean_abs_logz", m.mean_abs_logz},
                       {"max_abs_logit", m.max_abs_logit},
                       {"batch_sequences", m.batch_sequences}};
                metrics_out << j.dump() << "\n";
            }
            all_metrics.insert(all_metrics.end(), metrics.begin(), metrics.end());
            const fs::path ckpt = ctx.out / ("stage" + std::to_string(s) + ".ckpt");
            save_checkpoint(ckpt.string(), params, &opt, mhash);
            const double last_ce = metrics.empty() ? 0.0 : metrics.back().ce;
            std::cout << "stage " << s << ": " << metrics.size() << " steps, final ce " << last_ce
                      << ", wrote " << ckpt.string() << "\n";
        }
        return 0;
    }

    if (cmd_generate->parsed()) {
        const ModelParams params = load_model_for(ctx, gen_ckpt);
        const Codebook cb = load_codebook_for(ctx, gen_codebook);

        std::string text = gen_prompt;
        if (gen_width > 0 || gen_height > 0) {
            text = build_t2i_prompt(gen_width, gen_height, gen_prompt, ctx.config.patch_px);
        }
        std::vector<TokenId> prompt;
        if (gen_raw) {
            prompt.push_back(kBos);
            const auto bytes = encode_text(manifest, text);
            prompt.insert(prompt.end(), bytes.begin(), bytes.end());
        } else {
            prompt = make_query_tokens(manifest, text);
        }

        DecodeParams text_params = ctx.config.text_decode;
        DecodeParams image_params = ctx.config.image_decode;
        if (gen_cfg >= 0.0) image_params.cfg_scale = gen_cfg;
        if (gen_image_temp > 0.0) image_params.temperature = gen_image_temp;
        if (gen_image_topk > 0) image_params.top_k = gen_image_topk;
        if (gen_text_temp > 0.0) text_params.temperature = gen_text_temp;
        if (gen_text_topk > 0) text_params.top_k = gen_text_topk;

        GenerateOptions options;
        options.max_tokens = gen_max_tokens > 0 ? gen_max_tokens : ctx.config.max_tokens;
        options.constrained = !gen_unconstrained && ctx.config.constrained;
        options.stop_after_first_image = gen_stop_after_image;

        const GenerationResult result = generate(params, manifest, prompt, text_params,
                                                 image_params, ctx.config.seed, options);
        const auto full = result.full();
        write_token_lines(ctx.out / "generation.tokens.txt", {full});

        const ValidateReport report = validate(manifest, full);
        int image_index = 0;
        json images = json::array();
        for (const auto& span : report.spans) {
            if (!span.ok) {
                continue;
            }
            const ParsedImage parsed = parse_image(manifest, full, span.start);
            const fs::path path =
                ctx.out / ("gen_image" + std::to_string(image_index++) + ".ppm");
            save_ppm(decode_grid(parsed.grid, cb), path.string());
            images.push_back({{"path", path.string()},
                              {"height_patches", parsed.grid.height},
                              {"width_patches", parsed.grid.width}});
        }

        json record{{"prompt_text", text},
                    {"seed", result.seed},
                    {"constrained", result.constrained},
                    {"text_params", decode_params_json(text_params)},
                    {"image_params", decode_params_json(image_params)},
                    {"generated_tokens", result.tokens.size()},
                    {"ended_on_eos", result.ended_on_eos},
                    {"truncated_mid_image", result.truncated_mid_image},
                    {"well_formed", report.well_formed()},
                    {"images", images}};
        json trace = json::array();
        for (const auto& step : result.trace) {
            trace.push_back({{"token", step.token},
                             {"mode", step.mode == DecodeMode::Image ? "image" : "text"},
                             {"temperature", step.temperature},
                             {"top_k", step.top_k},
                             {"cfg_scale", step.cfg_scale}});
        }
        record["trace"] = trace;
        std::ofstream(ctx.out / "generation.json") << record.dump(2) << "\n";
        std::cout << "generated " << result.tokens.size() << " tokens, " << image_index
                  << " images under " << ctx.out.string() << "\n";
        return 0;
    }

    if (cmd_parse->parsed()) {
        const auto lines = read_token_lines(parse_tokens);
        bool all_ok = true;
        for (size_t i = 0; i < lines.size(); ++i) {
            const ValidateReport report = validate(manifest, lines[i]);
            std::cout << "line " << i << ": " << report.spans.size() << " spans";
            for (const auto& span : report.spans) {
                if (span.ok) {
                    std::cout << " [" << span.start << ".." << span.end << ") OK";
                } else {
                    std::cout << " [" << span.start << "] " << parse_error_name(span.error)
                              << " at " << span.end;
                    all_ok = false;
                }
            }
            std::cout << (report.well_formed() ? " OK" : " MALFORMED") << "\n";
        }
        if (!all_ok) {
            throw std::runtime_error("malformed sequences found");
        }
        return 0;
    }

    if (cmd_sweep->parsed()) {
        const ModelParams params = load_model_for(ctx, sweep_ckpt);
        const Codebook cb = load_codebook_for(ctx, sweep_codebook);
        SweepSpec spec;
        spec.prompt = sweep_prompt;
        spec.temperatures =
            sweep_temps.empty() ? std::vector<double>{ctx.config.image_decode.temperature}
                                : sweep_temps;
        spec.top_ks = sweep_topks.empty() ? std::vector<int>{ctx.config.image_decode.top_k}
                                          : sweep_topks;
        spec.cfg_scales = sweep_cfgs.empty()
                              ? std::vector<double>{ctx.config.image_decode.cfg_scale}
                              : sweep_cfgs;
        spec.seeds = sweep_seeds.empty() ? std::vector<uint64_t>{ctx.config.seed} : sweep_seeds;

        const SweepReport report = sweep(params, manifest, cb, spec, ctx.out.string());
        std::ofstream(ctx.out / "sweep.txt") << report.to_text();
        std::cout << report.to_text();
        return 0;
    }

    if (cmd_attn->parsed()) {
        const ModelParams params = load_model_for(ctx, attn_ckpt);
        const auto lines = read_token_lines(attn_tokens);
        if (attn_line < 0 || attn_line >= static_cast<int>(lines.size())) {
            throw std::runtime_error("line index outside the token file");
        }
        const AttnReport report = attn_report(params, manifest, lines[attn_line]);
        std::ofstream(ctx.out / "attn.txt") << report.to_text();
        std::cout << report.to_text();
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const ConfigError& e) {
        json err{{"error", "invalid config"}, {"violations", e.violations}};
        std::cerr << err.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        json err{{"error", e.what()}};
        std::cerr << err.dump() << "\n";
        return 1;
    }
}
