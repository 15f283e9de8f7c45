#include "mmgen/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <stdexcept>

namespace mmgen {

namespace {

std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

}  // namespace

AttnReport attn_report(const ModelParams& params, const VocabManifest& manifest,
                       const std::vector<TokenId>& tokens) {
    const ValidateReport spans = validate(manifest, tokens);
    const SpanReport* last_ok = nullptr;
    for (const auto& span : spans.spans) {
        if (span.ok) {
            last_ok = &span;
        }
    }
    if (!last_ok) {
        throw std::invalid_argument("attn_report: sequence has no complete image span");
    }
    // span layout [..., last code, EOL, EOI]; probe from the last image code
    const size_t query = last_ok->end - 3;

    AttnReport report;
    report.probe = attention_probe(params, tokens, query, manifest);
    report.query_position = query;
    report.scores = report.probe.average;
    report.roles = report.probe.roles;

    const RoleKind summary_roles[] = {RoleKind::Soi,      RoleKind::Eol,       RoleKind::HeightInd,
                                      RoleKind::WidthInd, RoleKind::ImageCode, RoleKind::Text};
    for (RoleKind kind : summary_roles) {
        RoleSummaryRow row;
        row.kind = kind;
        double sum = 0.0;
        for (size_t i = 0; i < report.roles.size(); ++i) {
            if (report.roles[i].kind == kind) {
                sum += report.scores[i];
                ++row.count;
            }
        }
        row.mean_score = row.count > 0 ? sum / static_cast<double>(row.count) : 0.0;
        report.role_summary.push_back(row);
    }
    return report;
}

std::string AttnReport::to_text() const {
    std::string out;
    out += "attention report, query position " + std::to_string(query_position) + "\n";
    out += "pos  role           value  avg_score\n";
    for (size_t i = 0; i < scores.size(); ++i) {
        char line[96];
        std::snprintf(line, sizeof(line), "%-4zu %-14s %-6d %s\n", i, role_name(roles[i].kind),
                      roles[i].value, fmt(scores[i]).c_str());
        out += line;
    }
    out += "\nrole summary\n";
    out += "role           count  mean_score\n";
    for (const auto& row : role_summary) {
        char line[96];
        std::snprintf(line, sizeof(line), "%-14s %-6zu %s\n", role_name(row.kind), row.count,
                      fmt(row.mean_score).c_str());
        out += line;
    }
    return out;
}

SweepReport sweep(const ModelParams& params, const VocabManifest& manifest,
                  const Codebook& codebook, const SweepSpec& spec, const std::string& out_dir) {
    if (spec.temperatures.empty() || spec.top_ks.empty() || spec.cfg_scales.empty() ||
        spec.seeds.empty()) {
        throw std::invalid_argument("sweep: every parameter list must be non-empty");
    }

    std::vector<TokenId> prompt = make_query_tokens(manifest, spec.prompt);
    prompt.push_back(kSoi);  // force image mode from the first sampled token

    const int span_budget = 3 + manifest.max_side * (manifest.max_side + 1) + 1;

    SweepReport report;
    int cell = 0;
    for (double temperature : spec.temperatures) {
        for (int top_k : spec.top_ks) {
            for (double cfg_scale : spec.cfg_scales) {
                for (uint64_t seed : spec.seeds) {
                    SweepRow row;
                    row.temperature = temperature;
                    row.top_k = top_k;
                    row.cfg_scale = cfg_scale;
                    row.seed = seed;
                    try {
                        const DecodeParams text{1.0, 1, 0.0};
                        const DecodeParams image{temperature, top_k, cfg_scale};
                        GenerateOptions options;
                        options.max_tokens = span_budget;
                        options.constrained = true;
                        options.stop_after_first_image = true;
                        const GenerationResult gen =
                            generate(params, manifest, prompt, text, image, seed, options);
                        const auto full = gen.full();
                        const ParsedImage parsed = parse_image(manifest, full, prompt.size() - 1);
                        row.grid_h = parsed.grid.height;
                        row.grid_w = parsed.grid.width;
                        row.distinct_codes = static_cast<int>(
                            std::set<int>(parsed.grid.codes.begin(), parsed.grid.codes.end())
                                .size());
                        double abs_sum = 0.0;
                        for (const auto& step : gen.trace) {
                            abs_sum += std::abs(step.cond_logit);
                        }
                        row.mean_abs_logit =
                            gen.trace.empty() ? 0.0
                                              : abs_sum / static_cast<double>(gen.trace.size());
                        const RasterImage img = decode_grid(parsed.grid, codebook);
                        char name[96];
                        std::snprintf(name, sizeof(name), "cell%03d_T%.2f_k%d_cfg%.2f_s%llu.ppm",
                                      cell, temperature, top_k, cfg_scale,
                                      static_cast<unsigned long long>(seed));
                        row.image_path = out_dir + "/" + name;
                        save_ppm(img, row.image_path);
                        row.ok = true;
                    } catch (const std::exception& e) {
                        row.ok = false;
                        row.error = e.what();
                    }
                    report.rows.push_back(std::move(row));
                    ++cell;
                }
            }
        }
    }
    return report;
}

std::string SweepReport::to_text() const {
    std::string out = "temp   top_k  cfg    seed  ok  grid   codes  mean|logit|  image\n";
    for (const auto& row : rows) {
        char line[512];
        if (row.ok) {
            std::snprintf(line, sizeof(line), "%-6.2f %-6d %-6.2f %-5llu ok  %2dx%-3d %-6d %-12s %s\n",
                          row.temperature, row.top_k, row.cfg_scale,
                          static_cast<unsigned long long>(row.seed), row.grid_h, row.grid_w,
                          row.distinct_codes, fmt(row.mean_abs_logit).c_str(),
                          row.image_path.c_str());
        } else {
            std::snprintf(line, sizeof(line), "%-6.2f %-6d %-6.2f %-5llu ERR %s\n", row.temperature,
                          row.top_k, row.cfg_scale, static_cast<unsigned long long>(row.seed),
                          row.error.c_str());
        }
        out += line;
    }
    return out;
}

LogitMagnitudeReport logit_magnitude_report(const std::vector<StepMetrics>& a,
                                            const std::vector<StepMetrics>& b) {
    if (a.empty() || b.empty()) {
        throw std::invalid_argument("logit_magnitude_report: empty metric stream");
    }
    LogitMagnitudeReport report;
    report.steps = std::min(a.size(), b.size());
    report.length_mismatch = a.size() != b.size();
    report.final_window = std::min<size_t>(100, report.steps);

    const auto mean_over_tail = [&](const std::vector<StepMetrics>& m, bool zloss) {
        double sum = 0.0;
        for (size_t i = report.steps - report.final_window; i < report.steps; ++i) {
            sum += zloss ? m[i].zloss : m[i].max_abs_logit;
        }
        return sum / static_cast<double>(report.final_window);
    };
    report.final_mean_zloss_a = mean_over_tail(a, true);
    report.final_mean_zloss_b = mean_over_tail(b, true);
    report.final_mean_maxlogit_a = mean_over_tail(a, false);
    report.final_mean_maxlogit_b = mean_over_tail(b, false);
    report.zloss_ratio_a_over_b = report.final_mean_zloss_b != 0.0
                                      ? report.final_mean_zloss_a / report.final_mean_zloss_b
                                      : (report.final_mean_zloss_a == 0.0 ? 1.0 : INFINITY);
    return report;
}

std::string LogitMagnitudeReport::to_text() const {
    std::string out;
    out += "logit magnitude comparison over " + std::to_string(steps) + " aligned steps";
    if (length_mismatch) {
        out += " (warning: streams differ in length, aligned to the shorter)";
    }
    out += "\nfinal-" + std::to_string(final_window) + "-step means:\n";
    out += "  mean (log Z)^2   A: " + fmt(final_mean_zloss_a) + "  B: " + fmt(final_mean_zloss_b) +
           "  ratio A/B: " + fmt(zloss_ratio_a_over_b) + "\n";
    out += "  mean max|logit|  A: " + fmt(final_mean_maxlogit_a) +
           "  B: " + fmt(final_mean_maxlogit_b) + "\n";
    return out;
}

}  // namespace mmgen
