#include "mmgen/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mmgen {

void DecodeParams::validate(int vocab_total) const {
    if (!(temperature > 0.0)) {
        throw std::invalid_argument("decode params: temperature must be > 0");
    }
    if (top_k < 1 || top_k > vocab_total) {
        throw std::invalid_argument("decode params: top_k must lie in [1, vocab_total]");
    }
    if (!(cfg_scale >= 0.0)) {
        throw std::invalid_argument("decode params: cfg_scale must be >= 0");
    }
}

void DecodeState::advance(const VocabManifest& manifest, TokenId token) {
    const TokenRole role = classify(manifest, token);
    if (mode == DecodeMode::Text) {
        if (role.kind == RoleKind::Soi) {
            mode = DecodeMode::Image;
            expected = Expected::HInd;
            declared_h = declared_w = 0;
            row = col = 0;
            span_dirty = false;
        }
        return;
    }

    // image mode; EOI always closes the span
    if (role.kind == RoleKind::Eoi) {
        if (expected != Expected::Eoi) {
            span_dirty = true;
        }
        mode = DecodeMode::Text;
        expected = Expected::Free;
        return;
    }
    switch (expected) {
        case Expected::HInd:
            if (role.kind == RoleKind::HeightInd) {
                declared_h = role.value;
                expected = Expected::WInd;
                return;
            }
            break;
        case Expected::WInd:
            if (role.kind == RoleKind::WidthInd) {
                declared_w = role.value;
                expected = Expected::Code;
                return;
            }
            break;
        case Expected::Code:
            if (role.kind == RoleKind::ImageCode) {
                ++col;
                if (col == declared_w) {
                    expected = Expected::Eol;
                }
                return;
            }
            break;
        case Expected::Eol:
            if (role.kind == RoleKind::Eol) {
                ++row;
                col = 0;
                expected = (row == declared_h) ? Expected::Eoi : Expected::Code;
                return;
            }
            break;
        case Expected::Eoi:
        case Expected::Free:
            break;
    }
    span_dirty = true;
}

std::vector<double> cfg_combine(const std::vector<double>& l_cond,
                                const std::vector<double>& l_uncond, double s) {
    if (l_cond.size() != l_uncond.size()) {
        throw std::invalid_argument("cfg_combine: logit vectors differ in length");
    }
    std::vector<double> out(l_cond.size());
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = l_cond[i] + s * (l_cond[i] - l_uncond[i]);
    }
    return out;
}

std::vector<TokenId> constraint_mask(const DecodeState& state, const VocabManifest& manifest) {
    if (state.span_dirty) {
        throw std::invalid_argument("constraint_mask: state is inconsistent (dirty span)");
    }
    std::vector<TokenId> allowed;
    switch (state.mode == DecodeMode::Text ? Expected::Free : state.expected) {
        case Expected::Free: {
            // everything except image-internal tokens: codes, EOL, indicators, EOI
            allowed = {kPad, kBos, kEos, kSoi, kUserMark, kAssistantMark, kEndOfTurn};
            for (int i = 0; i < manifest.text_size; ++i) {
                allowed.push_back(manifest.text_token(i));
            }
            break;
        }
        case Expected::HInd:
            for (int v = 1; v <= manifest.max_side; ++v) {
                allowed.push_back(indicator_token(manifest, Axis::Height, v));
            }
            break;
        case Expected::WInd:
            for (int v = 1; v <= manifest.max_side; ++v) {
                allowed.push_back(indicator_token(manifest, Axis::Width, v));
            }
            break;
        case Expected::Code:
            for (int c = 0; c < manifest.codebook_size; ++c) {
                allowed.push_back(manifest.code_token(c));
            }
            break;
        case Expected::Eol:
            allowed = {kEol};
            break;
        case Expected::Eoi:
            allowed = {kEoi};
            break;
    }
    std::sort(allowed.begin(), allowed.end());
    return allowed;
}

TokenId sample_step(const std::vector<double>& logits, const DecodeParams& params,
                    const std::vector<TokenId>& allowed, Rng& rng) {
    if (allowed.empty()) {
        throw std::invalid_argument("sample_step: allowed token set is empty");
    }
    if (!(params.temperature > 0.0) || params.top_k < 1) {
        throw std::invalid_argument("sample_step: invalid decode params");
    }
    struct Cand {
        double logit;
        TokenId id;
    };
    std::vector<Cand> cands;
    cands.reserve(allowed.size());
    for (TokenId id : allowed) {
        if (id < 0 || static_cast<size_t>(id) >= logits.size()) {
            throw std::invalid_argument("sample_step: allowed id outside logits");
        }
        if (!std::isfinite(logits[id])) {
            throw std::invalid_argument("sample_step: non-finite logit");
        }
        cands.push_back({logits[id], id});
    }
    const size_t keep = std::min(cands.size(), static_cast<size_t>(params.top_k));
    std::partial_sort(cands.begin(), cands.begin() + keep, cands.end(),
                      [](const Cand& a, const Cand& b) {
                          return a.logit != b.logit ? a.logit > b.logit : a.id < b.id;
                      });
    cands.resize(keep);

    double max_l = cands[0].logit;
    for (const Cand& c : cands) {
        max_l = std::max(max_l, c.logit);
    }
    double z = 0.0;
    std::vector<double> weights(keep);
    for (size_t i = 0; i < keep; ++i) {
        weights[i] = std::exp((cands[i].logit - max_l) / params.temperature);
        z += weights[i];
    }
    const double u = rng.next_unit() * z;
    double cum = 0.0;
    for (size_t i = 0; i < keep; ++i) {
        cum += weights[i];
        if (u < cum) {
            return cands[i].id;
        }
    }
    return cands[keep - 1].id;
}

std::vector<TokenId> GenerationResult::full() const {
    std::vector<TokenId> out = prompt;
    out.insert(out.end(), tokens.begin(), tokens.end());
    return out;
}

GenerationResult generate(const ModelParams& params, const VocabManifest& manifest,
                          const std::vector<TokenId>& prompt, const DecodeParams& text_params,
                          const DecodeParams& image_params, uint64_t seed,
                          const GenerateOptions& options) {
    const ModelConfig& cfg = params.config;
    if (cfg.vocab_total != manifest.total()) {
        throw std::invalid_argument("generate: model vocabulary does not match the manifest");
    }
    text_params.validate(cfg.vocab_total);
    image_params.validate(cfg.vocab_total);
    if (prompt.empty()) {
        throw std::invalid_argument("generate: prompt must not be empty");
    }
    if (options.max_tokens < 0 ||
        prompt.size() + static_cast<size_t>(options.max_tokens) > static_cast<size_t>(cfg.max_seq)) {
        throw std::invalid_argument("generate: prompt plus max_tokens exceeds max_seq");
    }

    // replay the prompt through the state machine; under constrained decoding
    // the prompt itself must obey the grammar (a trailing open span is fine)
    DecodeState state;
    long span_start = -1;  // SOI index of the currently open span
    for (size_t i = 0; i < prompt.size(); ++i) {
        if (options.constrained) {
            const auto allowed = constraint_mask(state, manifest);
            if (!std::binary_search(allowed.begin(), allowed.end(), prompt[i])) {
                throw std::invalid_argument("generate: prompt token at index " + std::to_string(i) +
                                            " violates the grammar");
            }
        }
        const bool was_text = state.mode == DecodeMode::Text;
        state.advance(manifest, prompt[i]);
        if (was_text && state.mode == DecodeMode::Image) {
            span_start = static_cast<long>(i);
        }
    }

    GenerationResult result;
    result.prompt = prompt;
    result.seed = seed;
    result.text_params = text_params;
    result.image_params = image_params;
    result.constrained = options.constrained;

    Rng rng(seed);

    ForwardCache cond_cache = make_cache(cfg);
    std::vector<double> cond_logits = forward(params, prompt, &cond_cache);
    std::vector<double> cond_last(cond_logits.end() - cfg.vocab_total, cond_logits.end());

    ForwardCache uncond_cache;
    std::vector<double> uncond_last;
    bool uncond_active = false;
    const auto open_uncond = [&](std::vector<TokenId> suffix) {
        std::vector<TokenId> ctx;
        ctx.push_back(kBos);
        ctx.insert(ctx.end(), suffix.begin(), suffix.end());
        uncond_cache = make_cache(cfg);
        const auto logits = forward(params, ctx, &uncond_cache);
        uncond_last.assign(logits.end() - cfg.vocab_total, logits.end());
        uncond_active = true;
    };
    if (state.mode == DecodeMode::Image) {
        open_uncond(std::vector<TokenId>(prompt.begin() + span_start, prompt.end()));
    }

    std::vector<TokenId> all_allowed(cfg.vocab_total);
    for (int i = 0; i < cfg.vocab_total; ++i) {
        all_allowed[i] = i;
    }

    for (int step = 0; step < options.max_tokens; ++step) {
        const bool image_mode = state.mode == DecodeMode::Image;
        const DecodeParams& active = image_mode ? image_params : text_params;

        std::vector<double> logits;
        if (image_mode && uncond_active) {
            logits = cfg_combine(cond_last, uncond_last, active.cfg_scale);
        } else {
            logits = cond_last;
        }

        std::vector<TokenId> allowed =
            options.constrained ? constraint_mask(state, manifest) : all_allowed;
        const TokenId token = sample_step(logits, active, allowed, rng);

        result.tokens.push_back(token);
        result.modes.push_back(image_mode ? DecodeMode::Image : DecodeMode::Text);
        result.trace.push_back(StepTrace{token, image_mode ? DecodeMode::Image : DecodeMode::Text,
                                         active.temperature, active.top_k,
                                         image_mode ? active.cfg_scale : 0.0, cond_last[token]});

        const bool was_text = state.mode == DecodeMode::Text;
        state.advance(manifest, token);

        const std::vector<TokenId> one{token};
        const auto logits_new = forward(params, one, &cond_cache);
        cond_last.assign(logits_new.begin(), logits_new.end());

        if (was_text && state.mode == DecodeMode::Image) {
            // span opened: the unconditional stream starts at this SOI
            open_uncond(one);
        } else if (!was_text && uncond_active) {
            if (state.mode == DecodeMode::Image) {
                const auto u = forward(params, one, &uncond_cache);
                uncond_last.assign(u.begin(), u.end());
            } else {
                // EOI closed the span: drop the unconditional stream
                uncond_active = false;
                uncond_last.clear();
                if (options.stop_after_first_image) {
                    break;
                }
            }
        }

        if (state.mode == DecodeMode::Text && token == kEos) {
            result.ended_on_eos = true;
            break;
        }
    }

    result.truncated_mid_image = state.mode == DecodeMode::Image;
    return result;
}

}  // namespace mmgen
