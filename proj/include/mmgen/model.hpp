#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmgen/rng.hpp"
#include "mmgen/vocab.hpp"

namespace mmgen {

inline constexpr int kCheckpointFormatVersion = 1;

struct ModelConfig {
    int layers = 0;
    int heads = 0;
    int model_dim = 0;
    int vocab_total = 0;
    int max_seq = 0;
    double rope_base = 10000.0;
    double dropout_p = 0.0;
    uint64_t seed = 0;

    int head_dim() const { return model_dim / heads; }
    int ffn_dim() const { return 4 * model_dim; }

    // throws std::invalid_argument listing every violated constraint
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

struct LayerTensors {
    std::vector<double> wq, wk, wv, wo;       // [dim x dim], row-major (out, in)
    std::vector<double> attn_norm, ffn_norm;  // [dim]
    std::vector<double> w_gate, w_up;         // [ffn x dim]
    std::vector<double> w_down;               // [dim x ffn]
};

// Every learnable tensor of the model; also the shape of gradients and of
// the Adam moment estimates. for_each visits tensors in a fixed order that
// the checkpoint format and coordinate-indexed tests rely on.
struct TensorSet {
    std::vector<double> embed;      // [vocab x dim]
    std::vector<LayerTensors> layers;
    std::vector<double> final_norm;  // [dim]
    std::vector<double> w_out;       // [vocab x dim]

    template <class F>
    void for_each(F&& f) {
        f("embed", embed);
        for (size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            f(p + "wq", layers[l].wq);
            f(p + "wk", layers[l].wk);
            f(p + "wv", layers[l].wv);
            f(p + "wo", layers[l].wo);
            f(p + "attn_norm", layers[l].attn_norm);
            f(p + "ffn_norm", layers[l].ffn_norm);
            f(p + "w_gate", layers[l].w_gate);
            f(p + "w_up", layers[l].w_up);
            f(p + "w_down", layers[l].w_down);
        }
        f("final_norm", final_norm);
        f("w_out", w_out);
    }

    template <class F>
    void for_each(F&& f) const {
        const_cast<TensorSet*>(this)->for_each(
            [&](const std::string& name, std::vector<double>& t) {
                f(name, static_cast<const std::vector<double>&>(t));
            });
    }

    size_t total_size() const;
};

TensorSet zeros_like(const ModelConfig& config);

struct ModelParams {
    ModelConfig config;
    TensorSet w;
};

using Gradients = TensorSet;

// Per-layer stored keys/values enabling single-token incremental evaluation.
struct ForwardCache {
    std::vector<std::vector<double>> k;  // [layers][max_seq * dim]
    std::vector<std::vector<double>> v;
    int length = 0;
};

ForwardCache make_cache(const ModelConfig& config);

struct LossBreakdown {
    double ce = 0.0;      // mean next-token cross-entropy over unmasked positions (nats)
    double zloss = 0.0;   // mean (log sum exp logits)^2 over unmasked positions
    double z_weight = 0.0;
    double total = 0.0;   // ce + z_weight * zloss

    // extra magnitude diagnostics consumed by the training metrics
    double mean_abs_logz = 0.0;
    double max_abs_logit = 0.0;
};

struct BatchItem {
    std::vector<TokenId> tokens;
    std::vector<TokenId> targets;   // same length as tokens
    std::vector<uint8_t> mask;      // 1 where the target carries loss
};

struct GradResult {
    Gradients grads;
    LossBreakdown loss;
};

struct AdamWParams {
    double lr = 2e-5;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
};

struct OptState {
    TensorSet m;
    TensorSet v;
    int64_t step = 0;
};

OptState make_opt_state(const ModelConfig& config);

// Deterministic scaled-normal initialization: std 0.02 (redrawn beyond 3
// sigma), with residual-output projections (wo, w_down, w_out) scaled by
// 1/sqrt(2*layers); norm gains start at 1.
ModelParams init_params(const ModelConfig& config);

// Rotary position embedding applied in place to a [heads * head_dim] vector:
// each head's (even, odd) pairs rotate by position-dependent angles, so the
// dot product of two rotated vectors depends only on their position offset.
void apply_rope(std::vector<double>& vec, double position, int heads, int head_dim,
                double rope_base);

// Causal forward pass. Returns logits row-major [tokens.size() x vocab] for
// the fed tokens. With a cache holding positions [0, cache.length), the fed
// tokens occupy positions starting at cache.length and the cache is extended.
// Inference only: dropout is never applied here.
std::vector<double> forward(const ModelParams& params, const std::vector<TokenId>& tokens,
                            ForwardCache* cache = nullptr);

// ce/zloss over unmasked positions of one logits block (row-major
// [targets.size() x vocab]). Throws if every position is masked.
LossBreakdown loss(const std::vector<double>& logits, int vocab,
                   const std::vector<TokenId>& targets, const std::vector<uint8_t>& mask,
                   double z_weight);

// Mean total loss over the batch's unmasked positions and its gradient.
// dropout_rng enables dropout (probability config.dropout_p) for training;
// pass nullptr to evaluate the deterministic network.
GradResult grad(const ModelParams& params, const std::vector<BatchItem>& batch, double z_weight,
                Rng* dropout_rng = nullptr);

// p <- p*(1 - lr*wd) - lr*m_hat/(sqrt(v_hat) + eps), bias-corrected.
void adamw_step(ModelParams& params, const Gradients& grads, OptState& opt,
                const AdamWParams& hyper);

struct AttentionProbe {
    int layers = 0;
    int heads = 0;
    size_t positions = 0;                // query_position + 1
    std::vector<double> per_head;        // [layers * heads * positions], rows sum to 1
    std::vector<double> average;         // [positions], mean over layers and heads
    std::vector<TokenRole> roles;        // [positions]

    double head_row(int layer, int head, size_t pos) const {
        return per_head[(static_cast<size_t>(layer) * heads + head) * positions + pos];
    }
};

// Attention distributions of every layer/head from query_position over key
// positions <= query_position, with token-role labels from the manifest.
AttentionProbe attention_probe(const ModelParams& params, const std::vector<TokenId>& tokens,
                               size_t query_position, const VocabManifest& manifest);

// Versioned binary checkpoint: config, parameters, optional optimizer state,
// and the hash of the vocabulary manifest the model was trained against.
void save_checkpoint(const std::string& path, const ModelParams& params, const OptState* opt,
                     uint64_t manifest_hash);

struct Checkpoint {
    ModelParams params;
    OptState opt;
    bool has_opt = false;
    uint64_t manifest_hash = 0;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace mmgen
