#include "doctest.h"

#include <stdexcept>

#include <cmath>
#include <cstdio>
#include <numeric>

#include "mmgen/model.hpp"
#include "mmgen/rng.hpp"
#include "mmgen/vocab.hpp"

using namespace mmgen;

namespace {

ModelConfig tiny_config(int layers = 2, int dim = 16, int heads = 2, int vocab = 29) {
    ModelConfig config;
    config.layers = layers;
    config.heads = heads;
    config.model_dim = dim;
    config.vocab_total = vocab;
    config.max_seq = 64;
    config.rope_base = 10000.0;
    config.dropout_p = 0.0;
    config.seed = 1234;
    return config;
}

std::vector<double*> flatten(TensorSet& t) {
    std::vector<double*> out;
    t.for_each([&](const std::string&, std::vector<double>& v) {
        for (double& x : v) {
            out.push_back(&x);
        }
    });
    return out;
}

std::vector<BatchItem> tiny_batch(const ModelConfig& config, Rng& rng) {
    std::vector<BatchItem> batch;
    for (int b = 0; b < 2; ++b) {
        BatchItem item;
        const int len = 6 + b;
        for (int t = 0; t < len; ++t) {
            item.tokens.push_back(static_cast<TokenId>(rng.next_below(config.vocab_total)));
            item.targets.push_back(static_cast<TokenId>(rng.next_below(config.vocab_total)));
            item.mask.push_back(t % 3 != 0 ? 1 : 0);
        }
        batch.push_back(std::move(item));
    }
    return batch;
}

}  // namespace

TEST_CASE("init is deterministic and bounded") {
    const ModelConfig config = tiny_config();
    const ModelParams a = init_params(config);
    const ModelParams b = init_params(config);
    bool equal = true;
    a.w.for_each([&](const std::string& name, const std::vector<double>& t) {
        const_cast<ModelParams&>(b).w.for_each(
            [&](const std::string& name2, std::vector<double>& t2) {
                if (name == name2) {
                    equal = equal && t == t2;
                }
            });
    });
    CHECK(equal);

    // every tensor within 6 standard deviations of 0 (norm gains are constant 1)
    a.w.for_each([&](const std::string& name, const std::vector<double>& t) {
        if (name.find("norm") != std::string::npos) {
            for (double v : t) {
                CHECK(v == 1.0);
            }
            return;
        }
        const bool out_proj = name.find("wo") != std::string::npos ||
                              name.find("w_down") != std::string::npos || name == "w_out";
        const double std_dev = out_proj ? 0.02 / std::sqrt(2.0 * config.layers) : 0.02;
        for (double v : t) {
            CHECK(std::isfinite(v));
            CHECK(std::abs(v) <= 6.0 * std_dev);
        }
    });
}

TEST_CASE("config validation lists violations") {
    ModelConfig config = tiny_config();
    config.model_dim = 65;
    config.heads = 4;
    CHECK_THROWS_AS(config.validate(), std::invalid_argument);
    CHECK_THROWS_AS(init_params(config), std::invalid_argument);

    ModelConfig odd_head = tiny_config();
    odd_head.model_dim = 6;
    odd_head.heads = 2;  // head_dim 3 is odd
    CHECK_THROWS_AS(odd_head.validate(), std::invalid_argument);
}

TEST_CASE("forward shapes and causality") {
    const ModelConfig config = tiny_config();
    const ModelParams params = init_params(config);
    std::vector<TokenId> tokens{1, 5, 9, 2, 7, 11, 3, 8};
    const auto logits = forward(params, tokens);
    CHECK(logits.size() == tokens.size() * static_cast<size_t>(config.vocab_total));

    // perturbing position 5 leaves logits at positions 0..4 bit-identical
    std::vector<TokenId> perturbed = tokens;
    perturbed[5] = 20;
    const auto logits2 = forward(params, perturbed);
    for (size_t i = 0; i < 5 * static_cast<size_t>(config.vocab_total); ++i) {
        CHECK(logits[i] == logits2[i]);
    }
    bool differs = false;
    for (size_t i = 5 * config.vocab_total; i < logits.size(); ++i) {
        differs = differs || logits[i] != logits2[i];
    }
    CHECK(differs);
}

TEST_CASE("kv cache matches full recomputation") {
    const ModelConfig config = tiny_config(2, 32, 4, 40);
    const ModelParams params = init_params(config);

    std::vector<TokenId> tokens{1};
    ForwardCache cache = make_cache(config);
    auto cached_logits = forward(params, tokens, &cache);

    for (int step = 0; step < 20; ++step) {
        // greedy pick from the cached stream
        const double* row = cached_logits.data() + cached_logits.size() - config.vocab_total;
        TokenId next = 0;
        for (int j = 1; j < config.vocab_total; ++j) {
            if (row[j] > row[next]) {
                next = j;
            }
        }

        // full recomputation must agree on the logits of the last position
        const auto full = forward(params, tokens);
        const double* full_row = full.data() + full.size() - config.vocab_total;
        for (int j = 0; j < config.vocab_total; ++j) {
            const double denom = std::max({std::abs(full_row[j]), std::abs(row[j]), 1e-12});
            CHECK(std::abs(full_row[j] - row[j]) / denom < 1e-5);
        }
        TokenId full_next = 0;
        for (int j = 1; j < config.vocab_total; ++j) {
            if (full_row[j] > full_row[full_next]) {
                full_next = j;
            }
        }
        CHECK(next == full_next);

        tokens.push_back(next);
        cached_logits = forward(params, {next}, &cache);
    }
    CHECK(cache.length == static_cast<int>(tokens.size()));
}

TEST_CASE("forward rejects overflow and bad ids") {
    const ModelConfig config = tiny_config();
    const ModelParams params = init_params(config);
    CHECK_THROWS_AS(forward(params, std::vector<TokenId>(config.max_seq + 1, 1)),
                    std::invalid_argument);
    CHECK_THROWS_AS(forward(params, {static_cast<TokenId>(config.vocab_total)}),
                    std::invalid_argument);
}

TEST_CASE("loss worked examples") {
    SUBCASE("uniform logits over vocab 4") {
        const std::vector<double> logits(4, 0.7);
        const auto out = loss(logits, 4, {2}, {1}, 0.0);
        CHECK(out.ce == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    }
    SUBCASE("all-zero logits over vocab 8 with z-loss") {
        const std::vector<double> logits(8, 0.0);
        const auto out = loss(logits, 8, {0}, {1}, 1e-5);
        const double expect = std::log(8.0) * std::log(8.0);
        CHECK(out.zloss == doctest::Approx(expect).epsilon(1e-12));
        CHECK(out.total == doctest::Approx(out.ce + 1e-5 * expect).epsilon(1e-12));
        CHECK(out.zloss * 1e-5 == doctest::Approx(4.3241e-5).epsilon(1e-3));
    }
    SUBCASE("all-masked input throws") {
        const std::vector<double> logits(8, 0.0);
        CHECK_THROWS_AS(loss(logits, 8, {0}, {0}, 0.0), std::invalid_argument);
    }
    SUBCASE("z-loss is nonnegative on random logits") {
        Rng rng(3);
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<double> logits(12);
            for (double& v : logits) {
                v = 4.0 * rng.next_unit() - 2.0;
            }
            CHECK(loss(logits, 12, {1}, {1}, 1.0).zloss >= 0.0);
        }
    }
}

TEST_CASE("gradients match central finite differences") {
    const ModelConfig config = tiny_config(2, 16, 2, 29);
    ModelParams params = init_params(config);
    Rng rng(99);
    const auto batch = tiny_batch(config, rng);
    const double z_weight = 1e-2;

    const GradResult analytic = grad(params, batch, z_weight);

    std::vector<double*> param_ptrs = flatten(params.w);
    TensorSet grads_copy = analytic.grads;
    std::vector<double*> grad_ptrs = flatten(grads_copy);
    REQUIRE(param_ptrs.size() == grad_ptrs.size());

    const double h = 1e-4;
    int checked = 0, passed = 0;
    Rng pick(7);
    for (int s = 0; s < 120; ++s) {
        const size_t idx = pick.next_below(param_ptrs.size());
        const double saved = *param_ptrs[idx];
        *param_ptrs[idx] = saved + h;
        const double up = grad(params, batch, z_weight).loss.total;
        *param_ptrs[idx] = saved - h;
        const double down = grad(params, batch, z_weight).loss.total;
        *param_ptrs[idx] = saved;
        const double fd = (up - down) / (2.0 * h);
        const double an = *grad_ptrs[idx];
        const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
        const double rel = std::abs(fd - an) / denom;
        ++checked;
        if (rel < 1e-3 || (std::abs(fd) < 1e-8 && std::abs(an) < 1e-8)) {
            ++passed;
        }
    }
    CHECK(passed >= checked - 1);
}

TEST_CASE("masked targets do not influence gradients") {
    const ModelConfig config = tiny_config();
    const ModelParams params = init_params(config);
    BatchItem item;
    item.tokens = {1, 2, 3, 4, 5};
    item.targets = {2, 3, 4, 5, 6};
    item.mask = {1, 0, 1, 0, 1};
    BatchItem other = item;
    other.targets[1] = 20;
    other.targets[3] = 21;

    const GradResult a = grad(params, {item}, 1e-3);
    const GradResult b = grad(params, {other}, 1e-3);
    CHECK(a.loss.ce == b.loss.ce);
    bool equal = true;
    a.grads.for_each([&](const std::string& name, const std::vector<double>& t) {
        const_cast<TensorSet&>(b.grads).for_each(
            [&](const std::string& name2, std::vector<double>& t2) {
                if (name == name2) {
                    equal = equal && t == t2;
                }
            });
    });
    CHECK(equal);
}

TEST_CASE("duplicating a batch element leaves the mean gradient unchanged") {
    const ModelConfig config = tiny_config();
    const ModelParams params = init_params(config);
    Rng rng(55);
    BatchItem item;
    for (int t = 0; t < 7; ++t) {
        item.tokens.push_back(static_cast<TokenId>(rng.next_below(config.vocab_total)));
        item.targets.push_back(static_cast<TokenId>(rng.next_below(config.vocab_total)));
        item.mask.push_back(1);
    }
    const GradResult once = grad(params, {item}, 1e-4);
    const GradResult twice = grad(params, {item, item}, 1e-4);
    CHECK(once.loss.ce == twice.loss.ce);
    CHECK(once.loss.zloss == twice.loss.zloss);
    bool equal = true;
    once.grads.for_each([&](const std::string& name, const std::vector<double>& t) {
        const_cast<TensorSet&>(twice.grads).for_each(
            [&](const std::string& name2, std::vector<double>& t2) {
                if (name == name2) {
                    equal = equal && t == t2;
                }
            });
    });
    CHECK(equal);
}

TEST_CASE("adamw steps") {
    const ModelConfig config = tiny_config();
    SUBCASE("zero gradient decays every parameter by (1 - lr*wd)") {
        ModelParams params = init_params(config);
        const ModelParams before = params;
        OptState opt = make_opt_state(config);
        adamw_step(params, zeros_like(config), opt, {2e-5, 0.1, 0.9, 0.95, 1e-8});
        bool ok = true;
        params.w.for_each([&](const std::string& name, const std::vector<double>& t) {
            const_cast<ModelParams&>(before).w.for_each(
                [&](const std::string& name2, std::vector<double>& t2) {
                    if (name != name2) {
                        return;
                    }
                    for (size_t i = 0; i < t.size(); ++i) {
                        ok = ok && t[i] == t2[i] * (1.0 - 2e-5 * 0.1);
                    }
                });
        });
        CHECK(ok);
    }
    SUBCASE("zero gradient with wd=0 leaves parameters unchanged") {
        ModelParams params = init_params(config);
        const ModelParams before = params;
        OptState opt = make_opt_state(config);
        adamw_step(params, zeros_like(config), opt, {2e-5, 0.0, 0.9, 0.95, 1e-8});
        bool ok = true;
        params.w.for_each([&](const std::string& name, const std::vector<double>& t) {
            const_cast<ModelParams&>(before).w.for_each(
                [&](const std::string& name2, std::vector<double>& t2) {
                    if (name == name2) {
                        ok = ok && t == t2;
                    }
                });
        });
        CHECK(ok);
    }
    SUBCASE("identical steps from identical states agree") {
        ModelParams pa = init_params(config);
        ModelParams pb = init_params(config);
        OptState oa = make_opt_state(config);
        OptState ob = make_opt_state(config);
        Rng rng(31);
        TensorSet g = zeros_like(config);
        g.for_each([&](const std::string&, std::vector<double>& t) {
            for (double& v : t) {
                v = rng.next_unit() - 0.5;
            }
        });
        adamw_step(pa, g, oa, {1e-3, 0.1, 0.9, 0.95, 1e-8});
        adamw_step(pb, g, ob, {1e-3, 0.1, 0.9, 0.95, 1e-8});
        bool ok = true;
        pa.w.for_each([&](const std::string& name, const std::vector<double>& t) {
            pb.w.for_each([&](const std::string& name2, std::vector<double>& t2) {
                if (name == name2) {
                    ok = ok && t == t2;
                }
            });
        });
        CHECK(ok);
        CHECK(oa.step == 1);
    }
}

TEST_CASE("rope scores depend only on the relative offset") {
    const int heads = 2, head_dim = 8;
    Rng rng(12);
    std::vector<double> u(heads * head_dim), v(heads * head_dim);
    for (double& x : u) {
        x = rng.next_unit() - 0.5;
    }
    for (double& x : v) {
        x = rng.next_unit() - 0.5;
    }
    const auto dot_at = [&](double p, double q) {
        std::vector<double> a = u, b = v;
        apply_rope(a, p, heads, head_dim, 10000.0);
        apply_rope(b, q, heads, head_dim, 10000.0);
        return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
    };
    for (int offset : {0, 1, 3, 9}) {
        const double base_score = dot_at(7.0 + offset, 7.0);
        for (double shift : {1.0, 4.0, 21.0}) {
            CHECK(dot_at(7.0 + offset + shift, 7.0 + shift) ==
                  doctest::Approx(base_score).epsilon(1e-9));
        }
    }
}

TEST_CASE("attention probe") {
    const VocabManifest manifest = build_vocab(16, 8, 4, 8);
    ModelConfig config = tiny_config();
    config.vocab_total = manifest.total();
    const ModelParams params = init_params(config);

    SUBCASE("length-1 distribution is [1.0]") {
        const auto probe = attention_probe(params, {kBos}, 0, manifest);
        REQUIRE(probe.positions == 1);
        CHECK(probe.average[0] == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("rows sum to one with role labels") {
        const std::vector<TokenId> tokens{kBos, 17, 18, 3, 10, 15, 33, 34, 35, 5};
        const auto probe = attention_probe(params, tokens, 8, manifest);
        REQUIRE(probe.positions == 9);
        for (int l = 0; l < probe.layers; ++l) {
            for (int h = 0; h < probe.heads; ++h) {
                double sum = 0.0;
                for (size_t j = 0; j < probe.positions; ++j) {
                    sum += probe.head_row(l, h, j);
                }
                CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
            }
        }
        double avg_sum = 0.0;
        for (double v : probe.average) {
            avg_sum += v;
        }
        CHECK(avg_sum == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(probe.roles[3].kind == RoleKind::Soi);
        CHECK(probe.roles[4] == TokenRole{RoleKind::HeightInd, 2});
        CHECK(probe.roles[6].kind == RoleKind::ImageCode);
    }
    SUBCASE("query position out of range") {
        CHECK_THROWS_AS(attention_probe(params, {kBos}, 1, manifest), std::out_of_range);
    }
}

TEST_CASE("checkpoint round-trips bit-exactly") {
    const ModelConfig config = tiny_config();
    ModelParams params = init_params(config);
    OptState opt = make_opt_state(config);
    Rng rng(2);
    TensorSet g = zeros_like(config);
    g.for_each([&](const std::string&, std::vector<double>& t) {
        for (double& v : t) {
            v = rng.next_unit() - 0.5;
        }
    });
    adamw_step(params, g, opt, {1e-3, 0.1, 0.9, 0.95, 1e-8});

    const std::string path = "test_checkpoint.bin";
    save_checkpoint(path, params, &opt, 0xDEADBEEFULL);
    const Checkpoint loaded = load_checkpoint(path);
    CHECK(loaded.params.config == config);
    CHECK(loaded.manifest_hash == 0xDEADBEEFULL);
    CHECK(loaded.has_opt);
    CHECK(loaded.opt.step == 1);
    bool ok = true;
    params.w.for_each([&](const std::string& name, const std::vector<double>& t) {
        const_cast<Checkpoint&>(loaded).params.w.for_each(
            [&](const std::string& name2, std::vector<double>& t2) {
                if (name == name2) {
                    ok = ok && t == t2;
                }
            });
    });
    CHECK(ok);
    std::remove(path.c_str());
}
