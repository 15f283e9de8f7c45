#include "doctest.h"

#include <stdexcept>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mmgen/analysis.hpp"

using namespace mmgen;

namespace {

const VocabManifest kManifest = build_vocab(256, 8, 4, 8);

ModelConfig probe_config() {
    ModelConfig config;
    config.layers = 2;
    config.heads = 2;
    config.model_dim = 16;
    config.vocab_total = kManifest.total();
    config.max_seq = 128;
    config.seed = 3;
    return config;
}

Codebook tiny_codebook() {
    std::vector<RasterImage> images{load_image("synth:solid:red:32x32"),
                                    load_image("synth:solid:blue:32x32")};
    return build_codebook(images, 8, 8, 2);
}

std::vector<TokenId> sequence_with_span() {
    std::vector<TokenId> tokens{kBos, kUserMark};
    for (TokenId id : encode_text(kManifest, "a cat")) {
        tokens.push_back(id);
    }
    tokens.push_back(kEndOfTurn);
    tokens.push_back(kAssistantMark);
    ImageTokenGrid grid{2, 2, {0, 1, 2, 3}};
    for (TokenId id : encode_grid(kManifest, grid)) {
        tokens.push_back(id);
    }
    tokens.push_back(kEndOfTurn);
    return tokens;
}

}  // namespace

TEST_CASE("attn_report structure") {
    const ModelParams params = init_params(probe_config());
    const auto tokens = sequence_with_span();
    const AttnReport report = attn_report(params, kManifest, tokens);

    // query sits on the last image code of the final span
    CHECK(report.roles.back().kind == RoleKind::ImageCode);
    CHECK(report.scores.size() == report.query_position + 1);
    CHECK(report.roles.size() == report.scores.size());

    // per-head rows sum to one
    for (int l = 0; l < report.probe.layers; ++l) {
        for (int h = 0; h < report.probe.heads; ++h) {
            double sum = 0.0;
            for (size_t j = 0; j < report.probe.positions; ++j) {
                sum += report.probe.head_row(l, h, j);
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
        }
    }

    // one summary row per role, each present in this sequence
    REQUIRE(report.role_summary.size() == 6);
    const RoleKind expect[] = {RoleKind::Soi,      RoleKind::Eol,       RoleKind::HeightInd,
                               RoleKind::WidthInd, RoleKind::ImageCode, RoleKind::Text};
    for (size_t i = 0; i < 6; ++i) {
        CHECK(report.role_summary[i].kind == expect[i]);
        CHECK(report.role_summary[i].count > 0);
        CHECK(report.role_summary[i].mean_score >= 0.0);
    }

    const std::string text = report.to_text();
    CHECK(text.find("SOI") != std::string::npos);
    CHECK(text.find("role summary") != std::string::npos);

    CHECK_THROWS_AS(attn_report(params, kManifest, {kBos, kUserMark}), std::invalid_argument);
}

TEST_CASE("attn reports are byte-identical across runs") {
    const ModelParams params = init_params(probe_config());
    const auto tokens = sequence_with_span();
    CHECK(attn_report(params, kManifest, tokens).to_text() ==
          attn_report(params, kManifest, tokens).to_text());
}

TEST_CASE("sweep runs every cell and is reproducible") {
    const ModelParams params = init_params(probe_config());
    const Codebook cb = tiny_codebook();
    SweepSpec spec;
    spec.prompt = "x";
    spec.temperatures = {0.8, 1.0};
    spec.top_ks = {2, 8};
    spec.cfg_scales = {0.0};
    spec.seeds = {5};

    namespace fs = std::filesystem;
    fs::create_directories("sweep_a");
    fs::create_directories("sweep_b");
    const SweepReport a = sweep(params, kManifest, cb, spec, "sweep_a");
    const SweepReport b = sweep(params, kManifest, cb, spec, "sweep_b");
    REQUIRE(a.rows.size() == 4);
    REQUIRE(b.rows.size() == 4);
    for (size_t i = 0; i < 4; ++i) {
        CHECK(a.rows[i].ok);
        CHECK(a.rows[i].grid_h >= 1);
        CHECK(a.rows[i].distinct_codes >= 1);
        CHECK(a.rows[i].distinct_codes == b.rows[i].distinct_codes);
        CHECK(a.rows[i].mean_abs_logit == b.rows[i].mean_abs_logit);
        // identical cells with identical seeds produce identical images
        std::ifstream fa(a.rows[i].image_path, std::ios::binary);
        std::ifstream fb(b.rows[i].image_path, std::ios::binary);
        const std::string bytes_a((std::istreambuf_iterator<char>(fa)), {});
        const std::string bytes_b((std::istreambuf_iterator<char>(fb)), {});
        CHECK(bytes_a == bytes_b);
        CHECK_FALSE(bytes_a.empty());
    }

    // an invalid cell is recorded, not fatal
    SweepSpec bad = spec;
    bad.top_ks = {100000};
    const SweepReport c = sweep(params, kManifest, cb, bad, "sweep_a");
    REQUIRE(c.rows.size() == 2);
    CHECK_FALSE(c.rows[0].ok);
    CHECK_FALSE(c.rows[0].error.empty());

    fs::remove_all("sweep_a");
    fs::remove_all("sweep_b");
}

TEST_CASE("logit magnitude comparison") {
    std::vector<StepMetrics> a, b;
    for (int i = 0; i < 150; ++i) {
        StepMetrics m;
        m.step = i;
        m.zloss = 4.0;
        m.max_abs_logit = 2.0;
        a.push_back(m);
        b.push_back(m);
    }

    SUBCASE("identical streams give ratio 1.0") {
        const auto report = logit_magnitude_report(a, b);
        CHECK(report.steps == 150);
        CHECK(report.final_window == 100);
        CHECK_FALSE(report.length_mismatch);
        CHECK(report.zloss_ratio_a_over_b == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("length mismatch aligns to the shorter stream") {
        b.resize(90);
        const auto report = logit_magnitude_report(a, b);
        CHECK(report.steps == 90);
        CHECK(report.final_window == 90);
        CHECK(report.length_mismatch);
        CHECK(report.to_text().find("warning") != std::string::npos);
    }
    SUBCASE("separated streams") {
        for (auto& m : b) {
            m.zloss = 1.0;
        }
        const auto report = logit_magnitude_report(a, b);
        CHECK(report.final_mean_zloss_a == doctest::Approx(4.0));
        CHECK(report.final_mean_zloss_b == doctest::Approx(1.0));
        CHECK(report.zloss_ratio_a_over_b == doctest::Approx(4.0));
    }
    SUBCASE("empty stream rejected") {
        CHECK_THROWS_AS(logit_magnitude_report({}, b), std::invalid_argument);
    }
}
