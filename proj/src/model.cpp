#include "mmgen/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace mmgen {

namespace {

constexpr double kNormEps = 1e-6;
constexpr double kInitStd = 0.02;
constexpr double kInitTrunc = 3.0;  // redraw beyond 3 sigma

// y = W x, W row-major (out, in)
void matvec(const double* W, const double* x, double* y, int out, int in) {
    for (int o = 0; o < out; ++o) {
        const double* row = W + static_cast<size_t>(o) * in;
        double acc = 0.0;
        for (int i = 0; i < in; ++i) {
            acc += row[i] * x[i];
        }
        y[o] = acc;
    }
}

// dx += W^T dy
void matvec_t_acc(const double* W, const double* dy, double* dx, int out, int in) {
    for (int o = 0; o < out; ++o) {
        const double g = dy[o];
        if (g == 0.0) {
            continue;
        }
        const double* row = W + static_cast<size_t>(o) * in;
        for (int i = 0; i < in; ++i) {
            dx[i] += row[i] * g;
        }
    }
}

// dW += dy x^T
void outer_acc(double* dW, const double* dy, const double* x, int out, int in) {
    for (int o = 0; o < out; ++o) {
        const double g = dy[o];
        if (g == 0.0) {
            continue;
        }
        double* row = dW + static_cast<size_t>(o) * in;
        for (int i = 0; i < in; ++i) {
            row[i] += g * x[i];
        }
    }
}

// returns rms denominator r = sqrt(mean(x^2) + eps); y = g * x / r
double rmsnorm_fwd(const double* x, const double* g, double* y, int d) {
    double ss = 0.0;
    for (int i = 0; i < d; ++i) {
        ss += x[i] * x[i];
    }
    const double r = std::sqrt(ss / d + kNormEps);
    const double inv = 1.0 / r;
    for (int i = 0; i < d; ++i) {
        y[i] = g[i] * x[i] * inv;
    }
    return r;
}

void rmsnorm_bwd(const double* x, const double* g, double r, const double* dy, double* dx_acc,
                 double* dg_acc, int d) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) {
        s += dy[i] * g[i] * x[i];
    }
    const double inv = 1.0 / r;
    const double k = s * inv * inv * inv / d;
    for (int i = 0; i < d; ++i) {
        dx_acc[i] += g[i] * dy[i] * inv - x[i] * k;
        dg_acc[i] += dy[i] * x[i] * inv;
    }
}

// cs/sn hold cos/sin per rotation pair for one absolute position
void rope_fill(double pos, double rope_base, int half, double* cs, double* sn) {
    for (int p = 0; p < half; ++p) {
        const double freq = std::pow(rope_base, -2.0 * p / (2.0 * half));
        const double angle = pos * freq;
        cs[p] = std::cos(angle);
        sn[p] = std::sin(angle);
    }
}

void rope_rotate(double* vec, int heads, int head_dim, const double* cs, const double* sn,
                 bool inverse) {
    const int half = head_dim / 2;
    for (int h = 0; h < heads; ++h) {
        double* v = vec + static_cast<size_t>(h) * head_dim;
        for (int p = 0; p < half; ++p) {
            const double s = inverse ? -sn[p] : sn[p];
            const double a = v[2 * p];
            const double b = v[2 * p + 1];
            v[2 * p] = a * cs[p] - b * s;
            v[2 * p + 1] = a * s + b * cs[p];
        }
    }
}

void check_tokens(const ModelConfig& config, const std::vector<TokenId>& tokens) {
    for (TokenId id : tokens) {
        if (id < 0 || id >= config.vocab_total) {
            throw std::invalid_argument("token id " + std::to_string(id) +
                                        " outside vocabulary of size " +
                                        std::to_string(config.vocab_total));
        }
    }
}

}  // namespace

void ModelConfig::validate() const {
    std::string problems;
    const auto complain = [&](const std::string& msg) {
        if (!problems.empty()) {
            problems += "; ";
        }
        problems += msg;
    };
    if (layers < 1) complain("layers must be >= 1");
    if (heads < 1) complain("heads must be >= 1");
    if (model_dim < 1) complain("model_dim must be >= 1");
    if (heads >= 1 && model_dim >= 1 && model_dim % heads != 0)
        complain("model_dim must be divisible by heads");
    if (heads >= 1 && model_dim >= 1 && model_dim % heads == 0 && (model_dim / heads) % 2 != 0)
        complain("head_dim must be even for rotary pairing");
    if (vocab_total < 1) complain("vocab_total must be >= 1");
    if (max_seq < 1) complain("max_seq must be >= 1");
    if (!(rope_base > 1.0)) complain("rope_base must be > 1");
    if (!(dropout_p >= 0.0) || dropout_p >= 1.0) complain("dropout_p must lie in [0, 1)");
    if (!problems.empty()) {
        throw std::invalid_argument("invalid model config: " + problems);
    }
}

size_t TensorSet::total_size() const {
    size_t n = 0;
    for_each([&](const std::string&, const std::vector<double>& t) { n += t.size(); });
    return n;
}

TensorSet zeros_like(const ModelConfig& config) {
    const size_t d = static_cast<size_t>(config.model_dim);
    const size_t f = static_cast<size_t>(config.ffn_dim());
    const size_t v = static_cast<size_t>(config.vocab_total);
    TensorSet t;
    t.embed.assign(v * d, 0.0);
    t.layers.resize(config.layers);
    for (auto& l : t.layers) {
        l.wq.assign(d * d, 0.0);
        l.wk.assign(d * d, 0.0);
        l.wv.assign(d * d, 0.0);
        l.wo.assign(d * d, 0.0);
        l.attn_norm.assign(d, 0.0);
        l.ffn_norm.assign(d, 0.0);
        l.w_gate.assign(f * d, 0.0);
        l.w_up.assign(f * d, 0.0);
        l.w_down.assign(d * f, 0.0);
    }
    t.final_norm.assign(d, 0.0);
    t.w_out.assign(v * d, 0.0);
    return t;
}

OptState make_opt_state(const ModelConfig& config) {
    return OptState{zeros_like(config), zeros_like(config), 0};
}

ModelParams init_params(const ModelConfig& config) {
    config.validate();
    ModelParams params{config, zeros_like(config)};
    Rng rng(derive_seed(config.seed, "init"));
    const double out_scale = 1.0 / std::sqrt(2.0 * config.layers);
    params.w.for_each([&](const std::string& name, std::vector<double>& t) {
        const bool is_norm = name.find("norm") != std::string::npos;
        if (is_norm) {
            std::fill(t.begin(), t.end(), 1.0);
            return;
        }
        const bool is_out_proj = name.find("wo") != std::string::npos ||
                                 name.find("w_down") != std::string::npos ||
                                 name == "w_out";
        const double std_dev = is_out_proj ? kInitStd * out_scale : kInitStd;
        for (double& x : t) {
            double g = rng.next_gauss();
            while (std::abs(g) > kInitTrunc) {
                g = rng.next_gauss();
            }
            x = g * std_dev;
        }
    });
    return params;
}

void apply_rope(std::vector<double>& vec, double position, int heads, int head_dim,
                double rope_base) {
    if (head_dim < 2 || head_dim % 2 != 0 ||
        vec.size() != static_cast<size_t>(heads) * head_dim) {
        throw std::invalid_argument("apply_rope: bad head layout");
    }
    const int half = head_dim / 2;
    std::vector<double> cs(half), sn(half);
    rope_fill(position, rope_base, half, cs.data(), sn.data());
    rope_rotate(vec.data(), heads, head_dim, cs.data(), sn.data(), false);
}

ForwardCache make_cache(const ModelConfig& config) {
    ForwardCache cache;
    cache.k.assign(config.layers,
                   std::vector<double>(static_cast<size_t>(config.max_seq) * config.model_dim, 0.0));
    cache.v = cache.k;
    cache.length = 0;
    return cache;
}

std::vector<double> forward(const ModelParams& params, const std::vector<TokenId>& tokens,
                            ForwardCache* cache) {
    const ModelConfig& cfg = params.config;
    check_tokens(cfg, tokens);
    const int n = static_cast<int>(tokens.size());
    const int start = cache ? cache->length : 0;
    if (start + n > cfg.max_seq) {
        throw std::invalid_argument("sequence length " + std::to_string(start + n) +
                                    " exceeds max_seq=" + std::to_string(cfg.max_seq));
    }
    const int d = cfg.model_dim;
    const int nh = cfg.heads;
    const int hd = cfg.head_dim();
    const int half = hd / 2;
    const int f = cfg.ffn_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    std::vector<double> x(static_cast<size_t>(n) * d);
    for (int t = 0; t < n; ++t) {
        std::memcpy(&x[static_cast<size_t>(t) * d],
                    &params.w.embed[static_cast<size_t>(tokens[t]) * d], sizeof(double) * d);
    }

    std::vector<std::vector<double>> local_k, local_v;
    if (!cache) {
        local_k.assign(cfg.layers, std::vector<double>(static_cast<size_t>(n) * d));
        local_v = local_k;
    }

    std::vector<double> n1(d), qrow(static_cast<size_t>(n) * d), krow(d), vrow(d);
    std::vector<double> am(d), attn_out(d), n2(d), gate(f), up(f), hbuf(f), ffn_out(d);
    std::vector<double> cs(half), sn(half);

    for (int l = 0; l < cfg.layers; ++l) {
        const LayerTensors& w = params.w.layers[l];
        double* kstore = cache ? cache->k[l].data() : local_k[l].data();
        double* vstore = cache ? cache->v[l].data() : local_v[l].data();

        // project + rope the new positions, appending to the key/value store
        for (int t = 0; t < n; ++t) {
            const double* xt = &x[static_cast<size_t>(t) * d];
            rmsnorm_fwd(xt, w.attn_norm.data(), n1.data(), d);
            matvec(w.wq.data(), n1.data(), &qrow[static_cast<size_t>(t) * d], d, d);
            matvec(w.wk.data(), n1.data(), krow.data(), d, d);
            matvec(w.wv.data(), n1.data(), vrow.data(), d, d);
            rope_fill(start + t, cfg.rope_base, half, cs.data(), sn.data());
            rope_rotate(&qrow[static_cast<size_t>(t) * d], nh, hd, cs.data(), sn.data(), false);
            rope_rotate(krow.data(), nh, hd, cs.data(), sn.data(), false);
            std::memcpy(kstore + static_cast<size_t>(start + t) * d, krow.data(),
                        sizeof(double) * d);
            std::memcpy(vstore + static_cast<size_t>(start + t) * d, vrow.data(),
                        sizeof(double) * d);
        }

        for (int t = 0; t < n; ++t) {
            const int ctx = start + t + 1;  // keys visible to this query
            const double* qt = &qrow[static_cast<size_t>(t) * d];
            for (int h = 0; h < nh; ++h) {
                const double* qh = qt + static_cast<size_t>(h) * hd;
                double max_s = -std::numeric_limits<double>::infinity();
                std::vector<double> srow(ctx);
                for (int j = 0; j < ctx; ++j) {
                    const double* kh = kstore + static_cast<size_t>(j) * d + h * hd;
                    double acc = 0.0;
                    for (int i = 0; i < hd; ++i) {
                        acc += qh[i] * kh[i];
                    }
                    srow[j] = acc * scale;
                    max_s = std::max(max_s, srow[j]);
                }
                double z = 0.0;
                for (int j = 0; j < ctx; ++j) {
                    srow[j] = std::exp(srow[j] - max_s);
                    z += srow[j];
                }
                double* amh = am.data() + static_cast<size_t>(h) * hd;
                std::fill(amh, amh + hd, 0.0);
                const double inv_z = 1.0 / z;
                for (int j = 0; j < ctx; ++j) {
                    const double p = srow[j] * inv_z;
                    const double* vh = vstore + static_cast<size_t>(j) * d + h * hd;
                    for (int i = 0; i < hd; ++i) {
                        amh[i] += p * vh[i];
                    }
                }
            }
            matvec(w.wo.data(), am.data(), attn_out.data(), d, d);
            double* xt = &x[static_cast<size_t>(t) * d];
            for (int i = 0; i < d; ++i) {
                xt[i] += attn_out[i];
            }

            rmsnorm_fwd(xt, w.ffn_norm.data(), n2.data(), d);
            matvec(w.w_gate.data(), n2.data(), gate.data(), f, d);
            matvec(w.w_up.data(), n2.data(), up.data(), f, d);
            for (int i = 0; i < f; ++i) {
                const double sig = 1.0 / (1.0 + std::exp(-gate[i]));
                hbuf[i] = gate[i] * sig * up[i];
            }
            matvec(w.w_down.data(), hbuf.data(), ffn_out.data(), d, f);
            for (int i = 0; i < d; ++i) {
                xt[i] += ffn_out[i];
            }
        }
    }

    std::vector<double> logits(static_cast<size_t>(n) * cfg.vocab_total);
    std::vector<double> nf(d);
    for (int t = 0; t < n; ++t) {
        rmsnorm_fwd(&x[static_cast<size_t>(t) * d], params.w.final_norm.data(), nf.data(), d);
        matvec(params.w.w_out.data(), nf.data(), &logits[static_cast<size_t>(t) * cfg.vocab_total],
               cfg.vocab_total, d);
    }

    if (cache) {
        cache->length = start + n;
    }
    return logits;
}

LossBreakdown loss(const std::vector<double>& logits, int vocab,
                   const std::vector<TokenId>& targets, const std::vector<uint8_t>& mask,
                   double z_weight) {
    if (targets.size() != mask.size() ||
        logits.size() != targets.size() * static_cast<size_t>(vocab)) {
        throw std::invalid_argument("loss: misaligned logits/targets/mask");
    }
    LossBreakdown out;
    out.z_weight = z_weight;
    double ce_sum = 0.0, z_sum = 0.0, abs_logz_sum = 0.0;
    size_t count = 0;
    for (size_t t = 0; t < targets.size(); ++t) {
        const double* row = logits.data() + t * vocab;
        for (int j = 0; j < vocab; ++j) {
            out.max_abs_logit = std::max(out.max_abs_logit, std::abs(row[j]));
        }
        if (!mask[t]) {
            continue;
        }
        if (targets[t] < 0 || targets[t] >= vocab) {
            throw std::invalid_argument("loss: target id outside vocabulary");
        }
        double max_l = row[0];
        for (int j = 1; j < vocab; ++j) {
            max_l = std::max(max_l, row[j]);
        }
        double z = 0.0;
        for (int j = 0; j < vocab; ++j) {
            z += std::exp(row[j] - max_l);
        }
        const double log_z = max_l + std::log(z);
        ce_sum += log_z - row[targets[t]];
        z_sum += log_z * log_z;
        abs_logz_sum += std::abs(log_z);
        ++count;
    }
    if (count == 0) {
        throw std::invalid_argument("loss: every position is masked");
    }
    const double inv = 1.0 / static_cast<double>(count);
    out.ce = ce_sum * inv;
    out.zloss = z_sum * inv;
    out.mean_abs_logz = abs_logz_sum * inv;
    out.total = out.ce + z_weight * out.zloss;
    return out;
}

namespace {

struct LayerActs {
    std::vector<double> x_in, n1, q, k, v, am, x_mid, n2, a, b, hbuf;  // [T, ...]
    std::vector<double> r1, r2;    // [T]
    std::vector<double> probs;     // [H * T * T], rows past the diagonal are zero
    std::vector<uint8_t> keep_attn, keep_ffn;  // [T * D]; empty when dropout is off
};

struct Acts {
    int T = 0;
    std::vector<LayerActs> layers;
    std::vector<double> x_final, nf;  // [T, D]
    std::vector<double> rf;           // [T]
    std::vector<double> logits;       // [T, V]
};

void fwd_train(const ModelParams& params, const std::vector<TokenId>& tokens, Acts& acts,
               Rng* dropout_rng) {
    const ModelConfig& cfg = params.config;
    const int T = static_cast<int>(tokens.size());
    const int d = cfg.model_dim;
    const int nh = cfg.heads;
    const int hd = cfg.head_dim();
    const int half = hd / 2;
    const int f = cfg.ffn_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const bool use_dropout = dropout_rng != nullptr && cfg.dropout_p > 0.0;
    const double keep_scale = use_dropout ? 1.0 / (1.0 - cfg.dropout_p) : 1.0;

    acts.T = T;
    acts.layers.assign(cfg.layers, {});

    std::vector<double> x(static_cast<size_t>(T) * d);
    for (int t = 0; t < T; ++t) {
        std::memcpy(&x[static_cast<size_t>(t) * d],
                    &params.w.embed[static_cast<size_t>(tokens[t]) * d], sizeof(double) * d);
    }

    std::vector<double> cs(half), sn(half);

    for (int l = 0; l < cfg.layers; ++l) {
        const LayerTensors& w = params.w.layers[l];
        LayerActs& a = acts.layers[l];
        a.x_in = x;
        a.n1.resize(x.size());
        a.q.resize(x.size());
        a.k.resize(x.size());
        a.v.resize(x.size());
        a.am.resize(x.size());
        a.r1.resize(T);
        a.probs.assign(static_cast<size_t>(nh) * T * T, 0.0);

        for (int t = 0; t < T; ++t) {
            const size_t off = static_cast<size_t>(t) * d;
            a.r1[t] = rmsnorm_fwd(&a.x_in[off], w.attn_norm.data(), &a.n1[off], d);
            matvec(w.wq.data(), &a.n1[off], &a.q[off], d, d);
            matvec(w.wk.data(), &a.n1[off], &a.k[off], d, d);
            matvec(w.wv.data(), &a.n1[off], &a.v[off], d, d);
            rope_fill(t, cfg.rope_base, half, cs.data(), sn.data());
            rope_rotate(&a.q[off], nh, hd, cs.data(), sn.data(), false);
            rope_rotate(&a.k[off], nh, hd, cs.data(), sn.data(), false);
        }

        for (int t = 0; t < T; ++t) {
            for (int h = 0; h < nh; ++h) {
                const double* qh = &a.q[static_cast<size_t>(t) * d + h * hd];
                double* prow = &a.probs[(static_cast<size_t>(h) * T + t) * T];
                double max_s = -std::numeric_limits<double>::infinity();
                for (int j = 0; j <= t; ++j) {
                    const double* kh = &a.k[static_cast<size_t>(j) * d + h * hd];
                    double acc = 0.0;
                    for (int i = 0; i < hd; ++i) {
                        acc += qh[i] * kh[i];
                    }
                    prow[j] = acc * scale;
                    max_s = std::max(max_s, prow[j]);
                }
                double z = 0.0;
                for (int j = 0; j <= t; ++j) {
                    prow[j] = std::exp(prow[j] - max_s);
                    z += prow[j];
                }
                const double inv_z = 1.0 / z;
                double* amh = &a.am[static_cast<size_t>(t) * d + h * hd];
                std::fill(amh, amh + hd, 0.0);
                for (int j = 0; j <= t; ++j) {
                    prow[j] *= inv_z;
                    const double* vh = &a.v[static_cast<size_t>(j) * d + h * hd];
                    for (int i = 0; i < hd; ++i) {
                        amh[i] += prow[j] * vh[i];
                    }
                }
            }
        }

        if (use_dropout) {
            a.keep_attn.resize(x.size());
            for (auto& m : a.keep_attn) {
                m = dropout_rng->next_unit() >= cfg.dropout_p ? 1 : 0;
            }
        }
        std::vector<double> attn_out(d);
        for (int t = 0; t < T; ++t) {
            const size_t off = static_cast<size_t>(t) * d;
            matvec(w.wo.data(), &a.am[off], attn_out.data(), d, d);
            for (int i = 0; i < d; ++i) {
                double v = attn_out[i];
                if (use_dropout) {
                    v = a.keep_attn[off + i] ? v * keep_scale : 0.0;
                }
                x[off + i] += v;
            }
        }
        a.x_mid = x;

        a.n2.resize(x.size());
        a.r2.resize(T);
        a.a.resize(static_cast<size_t>(T) * f);
        a.b.resize(static_cast<size_t>(T) * f);
        a.hbuf.resize(static_cast<size_t>(T) * f);
        if (use_dropout) {
            a.keep_ffn.resize(x.size());
            for (auto& m : a.keep_ffn) {
                m = dropout_rng->next_unit() >= cfg.dropout_p ? 1 : 0;
            }
        }
        std::vector<double> ffn_out(d);
        for (int t = 0; t < T; ++t) {
            const size_t off = static_cast<size_t>(t) * d;
            const size_t foff = static_cast<size_t>(t) * f;
            a.r2[t] = rmsnorm_fwd(&a.x_mid[off], w.ffn_norm.data(), &a.n2[off], d);
            matvec(w.w_gate.data(), &a.n2[off], &a.a[foff], f, d);
            matvec(w.w_up.data(), &a.n2[off], &a.b[foff], f, d);
            for (int i = 0; i < f; ++i) {
                const double g = a.a[foff + i];
                const double sig = 1.0 / (1.0 + std::exp(-g));
                a.hbuf[foff + i] = g * sig * a.b[foff + i];
            }
            matvec(w.w_down.data(), &a.hbuf[foff], ffn_out.data(), d, f);
            for (int i = 0; i < d; ++i) {
                double v = ffn_out[i];
                if (use_dropout) {
                    v = a.keep_ffn[off + i] ? v * keep_scale : 0.0;
                }
                x[off + i] += v;
            }
        }
    }

    acts.x_final = x;
    acts.nf.resize(x.size());
    acts.rf.resize(T);
    acts.logits.resize(static_cast<size_t>(T) * cfg.vocab_total);
    for (int t = 0; t < T; ++t) {
        const size_t off = static_cast<size_t>(t) * d;
        acts.rf[t] = rmsnorm_fwd(&x[off], params.w.final_norm.data(), &acts.nf[off], d);
        matvec(params.w.w_out.data(), &acts.nf[off],
               &acts.logits[static_cast<size_t>(t) * cfg.vocab_total], cfg.vocab_total, d);
    }
}

// dlogits is [T, V]; gradients are accumulated unscaled into grads.
void bwd_train(const ModelParams& params, const std::vector<TokenId>& tokens, const Acts& acts,
               const std::vector<double>& dlogits, Gradients& grads) {
    const ModelConfig& cfg = params.config;
    const int T = acts.T;
    const int d = cfg.model_dim;
    const int nh = cfg.heads;
    const int hd = cfg.head_dim();
    const int half = hd / 2;
    const int f = cfg.ffn_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const bool use_dropout = !acts.layers.empty() && !acts.layers[0].keep_attn.empty();
    const double keep_scale = use_dropout ? 1.0 / (1.0 - cfg.dropout_p) : 1.0;

    std::vector<double> dx(static_cast<size_t>(T) * d, 0.0);
    std::vector<double> dnf(d);
    for (int t = 0; t < T; ++t) {
        const size_t off = static_cast<size_t>(t) * d;
        const double* dl = &dlogits[static_cast<size_t>(t) * cfg.vocab_total];
        bool any = false;
        for (int j = 0; j < cfg.vocab_total && !any; ++j) {
            any = dl[j] != 0.0;
        }
        if (!any) {
            continue;
        }
        std::fill(dnf.begin(), dnf.end(), 0.0);
        matvec_t_acc(params.w.w_out.data(), dl, dnf.data(), cfg.vocab_total, d);
        outer_acc(grads.w_out.data(), dl, &acts.nf[off], cfg.vocab_total, d);
        rmsnorm_bwd(&acts.x_final[off], params.w.final_norm.data(), acts.rf[t], dnf.data(),
                    &dx[off], grads.final_norm.data(), d);
    }

    std::vector<double> dn2(d), da(f), db(f), dh(f);
    std::vector<double> dam(static_cast<size_t>(T) * d);
    std::vector<double> dq(static_cast<size_t>(T) * d), dk(static_cast<size_t>(T) * d),
        dv(static_cast<size_t>(T) * d);
    std::vector<double> dn1(d), datt(d), dff(d);
    std::vector<double> cs(half), sn(half);

    for (int l = cfg.layers - 1; l >= 0; --l) {
        const LayerTensors& w = params.w.layers[l];
        const LayerActs& a = acts.layers[l];
        LayerTensors& gw = grads.layers[l];

        // ffn block: x = x_mid + drop(w_down(silu(w_gate n2) * (w_up n2)))
        for (int t = 0; t < T; ++t) {
            const size_t off = static_cast<size_t>(t) * d;
            const size_t foff = static_cast<size_t>(t) * f;
            for (int i = 0; i < d; ++i) {
                double g = dx[off + i];
                if (use_dropout) {
                    g = a.keep_ffn[off + i] ? g * keep_scale : 0.0;
                }
                dff[i] = g;
            }
            std::fill(dh.begin(), dh.end(), 0.0);
            matvec_t_acc(w.w_down.data(), dff.data(), dh.data(), d, f);
            outer_acc(gw.w_down.data(), dff.data(), &a.hbuf[foff], d, f);
            for (int i = 0; i < f; ++i) {
                const double g = a.a[foff + i];
                const double sig = 1.0 / (1.0 + std::exp(-g));
                const double silu = g * sig;
                const double dsilu = sig * (1.0 + g * (1.0 - sig));
                da[i] = dh[i] * a.b[foff + i] * dsilu;
                db[i] = dh[i] * silu;
            }
            std::fill(dn2.begin(), dn2.end(), 0.0);
            matvec_t_acc(w.w_gate.data(), da.data(), dn2.data(), f, d);
            matvec_t_acc(w.w_up.data(), db.data(), dn2.data(), f, d);
            outer_acc(gw.w_gate.data(), da.data(), &a.n2[off], f, d);
            outer_acc(gw.w_up.data(), db.data(), &a.n2[off], f, d);
            rmsnorm_bwd(&a.x_mid[off], w.ffn_norm.data(), a.r2[t], dn2.data(), &dx[off],
                        gw.ffn_norm.data(), d);
        }

        // attention block: x_mid = x_in + drop(wo * concat_heads(softmax(qk) v))
        std::fill(dam.begin(), dam.end(), 0.0);
        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        for (int t = 0; t < T; ++t) {
            const size_t off = static_cast<size_t>(t) * d;
            for (int i = 0; i < d; ++i) {
                double g = dx[off + i];
                if (use_dropout) {
                    g = a.keep_attn[off + i] ? g * keep_scale : 0.0;
                }
                datt[i] = g;
            }
            matvec_t_acc(w.wo.data(), datt.data(), &dam[off], d, d);
            outer_acc(gw.wo.data(), datt.data(), &a.am[off], d, d);
        }

        std::vector<double> dprow;
        for (int h = 0; h < nh; ++h) {
            for (int t = 0; t < T; ++t) {
                const double* damh = &dam[static_cast<size_t>(t) * d + h * hd];
                const double* prow = &a.probs[(static_cast<size_t>(h) * T + t) * T];
                dprow.assign(t + 1, 0.0);
                for (int j = 0; j <= t; ++j) {
                    const double* vh = &a.v[static_cast<size_t>(j) * d + h * hd];
                    double acc = 0.0;
                    for (int i = 0; i < hd; ++i) {
                        acc += damh[i] * vh[i];
                    }
                    dprow[j] = acc;
                    double* dvh = &dv[static_cast<size_t>(j) * d + h * hd];
                    for (int i = 0; i < hd; ++i) {
                        dvh[i] += prow[j] * damh[i];
                    }
                }
                double sum_dp = 0.0;
                for (int j = 0; j <= t; ++j) {
                    sum_dp += dprow[j] * prow[j];
                }
                const double* qh = &a.q[static_cast<size_t>(t) * d + h * hd];
                double* dqh = &dq[static_cast<size_t>(t) * d + h * hd];
                for (int j = 0; j <= t; ++j) {
                    const double ds = prow[j] * (dprow[j] - sum_dp) * scale;
                    if (ds == 0.0) {
                        continue;
                    }
                    const double* kh = &a.k[static_cast<size_t>(j) * d + h * hd];
                    double* dkh = &dk[static_cast<size_t>(j) * d + h * hd];
                    for (int i = 0; i < hd; ++i) {
                        dqh[i] += ds * kh[i];
                        dkh[i] += ds * qh[i];
                    }
                }
            }
        }

        for (int t = 0; t < T; ++t) {
            const size_t off = static_cast<size_t>(t) * d;
            rope_fill(t, cfg.rope_base, half, cs.data(), sn.data());
            rope_rotate(&dq[off], nh, hd, cs.data(), sn.data(), true);
            rope_rotate(&dk[off], nh, hd, cs.data(), sn.data(), true);
            std::fill(dn1.begin(), dn1.end(), 0.0);
            matvec_t_acc(w.wq.data(), &dq[off], dn1.data(), d, d);
            matvec_t_acc(w.wk.data(), &dk[off], dn1.data(), d, d);
            matvec_t_acc(w.wv.data(), &dv[off], dn1.data(), d, d);
            outer_acc(gw.wq.data(), &dq[off], &a.n1[off], d, d);
            outer_acc(gw.wk.data(), &dk[off], &a.n1[off], d, d);
            outer_acc(gw.wv.data(), &dv[off], &a.n1[off], d, d);
            rmsnorm_bwd(&a.x_in[off], w.attn_norm.data(), a.r1[t], dn1.data(), &dx[off],
                        gw.attn_norm.data(), d);
        }
    }

    for (int t = 0; t < T; ++t) {
        const size_t off = static_cast<size_t>(t) * d;
        double* erow = &grads.embed[static_cast<size_t>(tokens[t]) * d];
        for (int i = 0; i < d; ++i) {
            erow[i] += dx[off + i];
        }
    }
}

}  // namespace

GradResult grad(const ModelParams& params, const std::vector<BatchItem>& batch, double z_weight,
                Rng* dropout_rng) {
    const ModelConfig& cfg = params.config;
    if (batch.empty()) {
        throw std::invalid_argument("grad: empty batch");
    }
    size_t total_unmasked = 0;
    for (const auto& item : batch) {
        if (item.tokens.size() != item.targets.size() || item.tokens.size() != item.mask.size()) {
            throw std::invalid_argument("grad: misaligned batch item");
        }
        if (static_cast<int>(item.tokens.size()) > cfg.max_seq) {
            throw std::invalid_argument("grad: batch item exceeds max_seq");
        }
        check_tokens(cfg, item.tokens);
        for (uint8_t m : item.mask) {
            total_unmasked += m ? 1 : 0;
        }
    }
    if (total_unmasked == 0) {
        throw std::invalid_argument("grad: every position is masked");
    }

    GradResult result;
    result.grads = zeros_like(cfg);
    double ce_sum = 0.0, z_sum = 0.0, abs_logz_sum = 0.0, max_abs_logit = 0.0;

    // per-item gradients are accumulated separately and combined tensor-wise,
    // so duplicating a batch element leaves the final mean bit-identical
    TensorSet item_grads = zeros_like(cfg);
    std::vector<std::vector<double>*> acc_list, item_list;
    result.grads.for_each(
        [&](const std::string&, std::vector<double>& t) { acc_list.push_back(&t); });
    item_grads.for_each(
        [&](const std::string&, std::vector<double>& t) { item_list.push_back(&t); });
    Acts acts;
    for (const auto& item : batch) {
        fwd_train(params, item.tokens, acts, dropout_rng);
        const int T = acts.T;
        const int v = cfg.vocab_total;
        std::vector<double> dlogits(static_cast<size_t>(T) * v, 0.0);
        double item_ce = 0.0, item_z = 0.0, item_abs = 0.0;
        for (int t = 0; t < T; ++t) {
            const double* row = &acts.logits[static_cast<size_t>(t) * v];
            for (int j = 0; j < v; ++j) {
                max_abs_logit = std::max(max_abs_logit, std::abs(row[j]));
            }
            if (!item.mask[t]) {
                continue;
            }
            const TokenId target = item.targets[t];
            if (target < 0 || target >= v) {
                throw std::invalid_argument("grad: target id outside vocabulary");
            }
            double max_l = row[0];
            for (int j = 1; j < v; ++j) {
                max_l = std::max(max_l, row[j]);
            }
            double z = 0.0;
            for (int j = 0; j < v; ++j) {
                z += std::exp(row[j] - max_l);
            }
            const double log_z = max_l + std::log(z);
            item_ce += log_z - row[target];
            item_z += log_z * log_z;
            item_abs += std::abs(log_z);
            double* drow = &dlogits[static_cast<size_t>(t) * v];
            const double inv_z = 1.0 / z;
            const double z_coef = 1.0 + 2.0 * z_weight * log_z;
            for (int j = 0; j < v; ++j) {
                const double p = std::exp(row[j] - max_l) * inv_z;
                drow[j] = p * z_coef;
            }
            drow[target] -= 1.0;
        }
        for (auto* t : item_list) {
            std::fill(t->begin(), t->end(), 0.0);
        }
        bwd_train(params, item.tokens, acts, dlogits, item_grads);
        for (size_t i = 0; i < acc_list.size(); ++i) {
            auto& dst = *acc_list[i];
            const auto& src = *item_list[i];
            for (size_t j = 0; j < dst.size(); ++j) {
                dst[j] += src[j];
            }
        }
        ce_sum += item_ce;
        z_sum += item_z;
        abs_logz_sum += item_abs;
    }

    const double inv_n = 1.0 / static_cast<double>(total_unmasked);
    result.grads.for_each([&](const std::string&, std::vector<double>& t) {
        for (double& g : t) {
            g *= inv_n;
        }
    });

    result.loss.z_weight = z_weight;
    result.loss.ce = ce_sum * inv_n;
    result.loss.zloss = z_sum * inv_n;
    result.loss.mean_abs_logz = abs_logz_sum * inv_n;
    result.loss.max_abs_logit = max_abs_logit;
    result.loss.total = result.loss.ce + z_weight * result.loss.zloss;
    if (!std::isfinite(result.loss.total)) {
        throw std::runtime_error("grad: non-finite loss");
    }
    return result;
}

void adamw_step(ModelParams& params, const Gradients& grads, OptState& opt,
                const AdamWParams& hyper) {
    opt.step += 1;
    const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(opt.step));
    const double decay = 1.0 - hyper.lr * hyper.weight_decay;

    std::vector<std::vector<double>*> p_list, m_list, v_list;
    std::vector<const std::vector<double>*> g_list;
    params.w.for_each([&](const std::string&, std::vector<double>& t) { p_list.push_back(&t); });
    grads.for_each([&](const std::string&, const std::vector<double>& t) { g_list.push_back(&t); });
    opt.m.for_each([&](const std::string&, std::vector<double>& t) { m_list.push_back(&t); });
    opt.v.for_each([&](const std::string&, std::vector<double>& t) { v_list.push_back(&t); });
    if (p_list.size() != g_list.size() || p_list.size() != m_list.size() ||
        p_list.size() != v_list.size()) {
        throw std::invalid_argument("adamw_step: tensor count mismatch");
    }

    for (size_t i = 0; i < p_list.size(); ++i) {
        auto& p = *p_list[i];
        const auto& g = *g_list[i];
        auto& m = *m_list[i];
        auto& v = *v_list[i];
        if (p.size() != g.size() || p.size() != m.size() || p.size() != v.size()) {
            throw std::invalid_argument("adamw_step: tensor shape mismatch");
        }
        for (size_t j = 0; j < p.size(); ++j) {
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            p[j] = p[j] * decay - hyper.lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
        }
    }
}

AttentionProbe attention_probe(const ModelParams& params, const std::vector<TokenId>& tokens,
                               size_t query_position, const VocabManifest& manifest) {
    if (query_position >= tokens.size()) {
        throw std::out_of_range("attention_probe: query position outside sequence");
    }
    const std::vector<TokenId> prefix(tokens.begin(),
                                      tokens.begin() + static_cast<long>(query_position) + 1);
    Acts acts;
    fwd_train(params, prefix, acts, nullptr);

    const ModelConfig& cfg = params.config;
    AttentionProbe probe;
    probe.layers = cfg.layers;
    probe.heads = cfg.heads;
    probe.positions = query_position + 1;
    probe.per_head.assign(static_cast<size_t>(cfg.layers) * cfg.heads * probe.positions, 0.0);
    probe.average.assign(probe.positions, 0.0);
    const int T = acts.T;
    const int q = static_cast<int>(query_position);
    for (int l = 0; l < cfg.layers; ++l) {
        for (int h = 0; h < cfg.heads; ++h) {
            const double* prow = &acts.layers[l].probs[(static_cast<size_t>(h) * T + q) * T];
            for (size_t j = 0; j < probe.positions; ++j) {
                const double p = prow[j];
                probe.per_head[(static_cast<size_t>(l) * cfg.heads + h) * probe.positions + j] = p;
                probe.average[j] += p;
            }
        }
    }
    const double inv = 1.0 / (static_cast<double>(cfg.layers) * cfg.heads);
    for (double& v : probe.average) {
        v *= inv;
    }
    probe.roles.reserve(probe.positions);
    for (size_t j = 0; j < probe.positions; ++j) {
        probe.roles.push_back(classify(manifest, prefix[j]));
    }
    return probe;
}

namespace {

template <class T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void read_pod(std::istream& in, T& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
}

void write_tensors(std::ostream& out, const TensorSet& t) {
    t.for_each([&](const std::string&, const std::vector<double>& v) {
        const uint64_t n = v.size();
        write_pod(out, n);
        out.write(reinterpret_cast<const char*>(v.data()),
                  static_cast<std::streamsize>(n * sizeof(double)));
    });
}

void read_tensors(std::istream& in, TensorSet& t) {
    t.for_each([&](const std::string& name, std::vector<double>& v) {
        uint64_t n = 0;
        read_pod(in, n);
        if (n != v.size()) {
            throw std::runtime_error("checkpoint tensor " + name + " has wrong size");
        }
        in.read(reinterpret_cast<char*>(v.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
    });
}

constexpr char kCheckpointMagic[4] = {'M', 'M', 'G', 'N'};

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params, const OptState* opt,
                     uint64_t manifest_hash) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write checkpoint file: " + path);
    }
    out.write(kCheckpointMagic, 4);
    write_pod(out, static_cast<uint32_t>(kCheckpointFormatVersion));
    const ModelConfig& c = params.config;
    write_pod(out, static_cast<int32_t>(c.layers));
    write_pod(out, static_cast<int32_t>(c.heads));
    write_pod(out, static_cast<int32_t>(c.model_dim));
    write_pod(out, static_cast<int32_t>(c.vocab_total));
    write_pod(out, static_cast<int32_t>(c.max_seq));
    write_pod(out, c.rope_base);
    write_pod(out, c.dropout_p);
    write_pod(out, c.seed);
    write_pod(out, manifest_hash);
    write_pod(out, static_cast<uint8_t>(opt != nullptr ? 1 : 0));
    write_tensors(out, params.w);
    if (opt) {
        write_pod(out, opt->step);
        write_tensors(out, opt->m);
        write_tensors(out, opt->v);
    }
    if (!out) {
        throw std::runtime_error("failed while writing checkpoint: " + path);
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot read checkpoint file: " + path);
    }
    char magic[4];
    in.read(magic, 4);
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw std::runtime_error("not a checkpoint file: " + path);
    }
    uint32_t version = 0;
    read_pod(in, version);
    if (version != kCheckpointFormatVersion) {
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint ckpt;
    ModelConfig c;
    int32_t layers, heads, model_dim, vocab_total, max_seq;
    read_pod(in, layers);
    read_pod(in, heads);
    read_pod(in, model_dim);
    read_pod(in, vocab_total);
    read_pod(in, max_seq);
    c.layers = layers;
    c.heads = heads;
    c.model_dim = model_dim;
    c.vocab_total = vocab_total;
    c.max_seq = max_seq;
    read_pod(in, c.rope_base);
    read_pod(in, c.dropout_p);
    read_pod(in, c.seed);
    read_pod(in, ckpt.manifest_hash);
    uint8_t has_opt = 0;
    read_pod(in, has_opt);
    c.validate();
    ckpt.params.config = c;
    ckpt.params.w = zeros_like(c);
    read_tensors(in, ckpt.params.w);
    ckpt.has_opt = has_opt != 0;
    if (ckpt.has_opt) {
        ckpt.opt = make_opt_state(c);
        read_pod(in, ckpt.opt.step);
        read_tensors(in, ckpt.opt.m);
        read_tensors(in, ckpt.opt.v);
    }
    if (!in) {
        throw std::runtime_error("checkpoint file truncated: " + path);
    }
    return ckpt;
}

}  // namespace mmgen
