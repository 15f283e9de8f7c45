#include "doctest.h"

#include <stdexcept>

#include <cstdio>
#include <map>

#include "mmgen/rng.hpp"
#include "mmgen/vocab.hpp"

using namespace mmgen;

TEST_CASE("layout arithmetic for the worked manifest") {
    const VocabManifest m = build_vocab(16, 8, 4, 8);
    CHECK(m.total() == 41);  // 9 + 8 + 16 + 8
    CHECK(m.height_base() == 9);
    CHECK(m.width_base() == 13);
    CHECK(m.text_base() == 17);
    CHECK(m.code_base() == 33);
}

TEST_CASE("block ranges classify to their roles") {
    const VocabManifest m = build_vocab(16, 8, 4, 8);
    // oracle: enumerate the layout table directly from the layout rule
    std::map<TokenId, TokenRole> table;
    const RoleKind fixed[] = {RoleKind::Pad,      RoleKind::Bos,       RoleKind::Eos,
                              RoleKind::Soi,      RoleKind::Eoi,       RoleKind::Eol,
                              RoleKind::UserMark, RoleKind::AssistantMark, RoleKind::EndOfTurn};
    for (int i = 0; i < 9; ++i) {
        table[i] = TokenRole{fixed[i], 0};
    }
    for (int v = 1; v <= 4; ++v) {
        table[8 + v] = TokenRole{RoleKind::HeightInd, v};
        table[8 + 4 + v] = TokenRole{RoleKind::WidthInd, v};
    }
    for (int i = 0; i < 16; ++i) {
        table[9 + 8 + i] = TokenRole{RoleKind::Text, i};
    }
    for (int c = 0; c < 8; ++c) {
        table[9 + 8 + 16 + c] = TokenRole{RoleKind::ImageCode, c};
    }
    REQUIRE(table.size() == 41);
    for (const auto& [id, role] : table) {
        CHECK(classify(m, id) == role);
    }
}

TEST_CASE("minimal manifest") {
    const VocabManifest m = build_vocab(1, 1, 1, 1);
    CHECK(m.total() == 13);
    CHECK(classify(m, 9) == TokenRole{RoleKind::HeightInd, 1});
    CHECK(classify(m, 10) == TokenRole{RoleKind::WidthInd, 1});
}

TEST_CASE("classify worked examples and bounds") {
    const VocabManifest m = build_vocab(16, 8, 4, 8);
    CHECK(classify(m, 3) == TokenRole{RoleKind::Soi, 0});
    CHECK(classify(m, 10) == TokenRole{RoleKind::HeightInd, 2});
    CHECK_THROWS_AS(classify(m, 41), std::out_of_range);
    CHECK_THROWS_AS(classify(m, -1), std::out_of_range);
}

TEST_CASE("indicator tokens") {
    const VocabManifest m = build_vocab(16, 8, 4, 8);
    CHECK(indicator_token(m, Axis::Height, 2) == 10);
    CHECK(indicator_token(m, Axis::Width, 3) == 15);
    CHECK_THROWS_AS(indicator_token(m, Axis::Height, 5), std::out_of_range);
    CHECK_THROWS_AS(indicator_token(m, Axis::Width, 0), std::out_of_range);
}

TEST_CASE("build_vocab rejects non-positive arguments") {
    CHECK_THROWS_AS(build_vocab(0, 8, 4, 8), std::invalid_argument);
    CHECK_THROWS_AS(build_vocab(16, 0, 4, 8), std::invalid_argument);
    CHECK_THROWS_AS(build_vocab(16, 8, -1, 8), std::invalid_argument);
    CHECK_THROWS_AS(build_vocab(16, 8, 4, 0), std::invalid_argument);
}

TEST_CASE("determinism and partition over random manifests") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const int text = 1 + static_cast<int>(rng.next_below(300));
        const int codes = 1 + static_cast<int>(rng.next_below(300));
        const int side = 1 + static_cast<int>(rng.next_below(24));
        const VocabManifest m = build_vocab(text, codes, side, 8);
        CHECK(build_vocab(text, codes, side, 8) == m);
        CHECK(m.total() == 9 + 2 * side + text + codes);

        // partition: counting classified roles reproduces the block sizes
        std::map<RoleKind, int> counts;
        for (TokenId id = 0; id < m.total(); ++id) {
            counts[classify(m, id).kind] += 1;
        }
        CHECK(counts[RoleKind::HeightInd] == side);
        CHECK(counts[RoleKind::WidthInd] == side);
        CHECK(counts[RoleKind::Text] == text);
        CHECK(counts[RoleKind::ImageCode] == codes);
    }
}

TEST_CASE("bijection between constructors and classify") {
    const VocabManifest m = build_vocab(32, 16, 6, 8);
    for (int v = 1; v <= m.max_side; ++v) {
        CHECK(classify(m, indicator_token(m, Axis::Height, v)) == TokenRole{RoleKind::HeightInd, v});
        CHECK(classify(m, indicator_token(m, Axis::Width, v)) == TokenRole{RoleKind::WidthInd, v});
    }
    for (int i = 0; i < m.text_size; ++i) {
        CHECK(classify(m, m.text_token(i)) == TokenRole{RoleKind::Text, i});
    }
    for (int c = 0; c < m.codebook_size; ++c) {
        CHECK(classify(m, m.code_token(c)) == TokenRole{RoleKind::ImageCode, c});
    }
}

TEST_CASE("manifest file round-trips through JSON") {
    const VocabManifest m = build_vocab(256, 64, 16, 8);
    const std::string path = "test_manifest.json";
    save_manifest(m, path);
    CHECK(load_manifest(path) == m);
    CHECK(manifest_hash(m) == manifest_hash(load_manifest(path)));
    std::remove(path.c_str());
}
