#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmgen/model.hpp"
#include "mmgen/rng.hpp"
#include "mmgen/sequence.hpp"
#include "mmgen/vocab.hpp"

namespace mmgen {

struct DecodeParams {
    double temperature = 1.0;
    int top_k = 1;
    double cfg_scale = 0.0;

    void validate(int vocab_total) const;
};

enum class DecodeMode : uint8_t { Text, Image };

// What the image-span grammar expects next at the current cursor.
enum class Expected : uint8_t { HInd, WInd, Code, Eol, Eoi, Free };

// Sampler mode machine. Mode switches happen exactly at SOI and EOI; inside a
// span the cursor tracks the declared shape so the constraint mask can be
// computed. In unconstrained runs a grammar violation marks the span dirty
// and the cursor stops being meaningful until the next EOI.
struct DecodeState {
    DecodeMode mode = DecodeMode::Text;
    Expected expected = Expected::Free;
    int declared_h = 0;
    int declared_w = 0;
    int row = 0;
    int col = 0;
    bool span_dirty = false;

    void advance(const VocabManifest& manifest, TokenId token);
};

// l + s * (l - l'), elementwise.
std::vector<double> cfg_combine(const std::vector<double>& l_cond,
                                const std::vector<double>& l_uncond, double s);

// Token ids the image-span grammar permits in the given state, ascending.
std::vector<TokenId> constraint_mask(const DecodeState& state, const VocabManifest& manifest);

// Masks everything outside `allowed`, keeps the top_k highest logits of the
// remainder (ties toward the lower id), applies temperature, samples from the
// softmax. Deterministic given the rng state.
TokenId sample_step(const std::vector<double>& logits, const DecodeParams& params,
                    const std::vector<TokenId>& allowed, Rng& rng);

struct StepTrace {
    TokenId token = 0;
    DecodeMode mode = DecodeMode::Text;  // mode the token was sampled in
    double temperature = 0.0;
    int top_k = 0;
    double cfg_scale = 0.0;   // 0 in text mode (no CFG stream)
    double cond_logit = 0.0;  // raw conditional logit of the sampled token
};

struct GenerationResult {
    std::vector<TokenId> prompt;
    std::vector<TokenId> tokens;      // generated continuation only
    std::vector<DecodeMode> modes;    // per generated token
    std::vector<StepTrace> trace;
    uint64_t seed = 0;
    DecodeParams text_params;
    DecodeParams image_params;
    bool constrained = true;
    bool truncated_mid_image = false;  // max_tokens ran out inside a span
    bool ended_on_eos = false;

    std::vector<TokenId> full() const;
};

struct GenerateOptions {
    int max_tokens = 0;
    bool constrained = true;
    bool stop_after_first_image = false;  // halt right after the next EOI
};

// Mode-switching autoregressive sampling. Two KV-cached model streams run in
// lockstep while an image is open: the conditional stream sees the full
// context, the unconditional stream sees [BOS, SOI, ...span tokens] only.
// Image-mode logits are CFG-combined before masking and sampling; text mode
// uses text_params with no CFG. EOS in text mode ends generation.
GenerationResult generate(const ModelParams& params, const VocabManifest& manifest,
                          const std::vector<TokenId>& prompt, const DecodeParams& text_params,
                          const DecodeParams& image_params, uint64_t seed,
                          const GenerateOptions& options);

}  // namespace mmgen
