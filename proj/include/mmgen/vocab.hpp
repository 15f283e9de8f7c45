#pragma once

#include <cstdint>
#include <string>

namespace mmgen {

using TokenId = int32_t;

// Fixed special-token ids. The id layout is part of the file formats and must
// not change without bumping kVocabFormatVersion.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kSoi = 3;  // start-of-image
inline constexpr TokenId kEoi = 4;  // end-of-image
inline constexpr TokenId kEol = 5;  // end-of-line (image row separator)
inline constexpr TokenId kUserMark = 6;
inline constexpr TokenId kAssistantMark = 7;
inline constexpr TokenId kEndOfTurn = 8;
inline constexpr int kNumFixedSpecials = 9;

inline constexpr int kVocabFormatVersion = 1;

enum class RoleKind : uint8_t {
    Pad,
    Bos,
    Eos,
    Soi,
    Eoi,
    Eol,
    UserMark,
    AssistantMark,
    EndOfTurn,
    HeightInd,
    WidthInd,
    Text,
    ImageCode,
};

// Role of a token id. `value` is the indicator size in patches for
// HeightInd/WidthInd, the byte index for Text, the code index for ImageCode,
// and 0 otherwise.
struct TokenRole {
    RoleKind kind = RoleKind::Pad;
    int value = 0;

    bool operator==(const TokenRole&) const = default;
};

const char* role_name(RoleKind kind);

enum class Axis : uint8_t { Height, Width };

// Unified id space over text bytes, image codes and special tokens.
// Layout (contiguous, no gaps):
//   [0, 9)                      fixed specials above
//   [9, 9+max_side)             HeightInd(v), v in 1..max_side
//   [9+max_side, 9+2*max_side)  WidthInd(v)
//   [9+2*max_side, +text_size)  Text(i)
//   [.., +codebook_size)        ImageCode(c)
struct VocabManifest {
    int text_size = 0;
    int codebook_size = 0;
    int max_side = 0;   // maximum image side, in patches
    int patch_px = 0;   // pixels per patch side

    int height_base() const { return kNumFixedSpecials; }
    int width_base() const { return kNumFixedSpecials + max_side; }
    int text_base() const { return kNumFixedSpecials + 2 * max_side; }
    int code_base() const { return text_base() + text_size; }
    int total() const { return code_base() + codebook_size; }

    TokenId text_token(int index) const;
    TokenId code_token(int index) const;

    bool operator==(const VocabManifest&) const = default;
};

VocabManifest build_vocab(int text_size, int codebook_size, int max_side, int patch_px);

TokenRole classify(const VocabManifest& manifest, TokenId id);

TokenId indicator_token(const VocabManifest& manifest, Axis axis, int value);

// Structured-text (JSON) manifest file with a format-version field.
void save_manifest(const VocabManifest& manifest, const std::string& path);
VocabManifest load_manifest(const std::string& path);
std::string manifest_to_json(const VocabManifest& manifest);
VocabManifest manifest_from_json(const std::string& text);

// FNV-1a over the canonical JSON form; stored in checkpoints so a model can
// be matched against the vocabulary it was trained with.
uint64_t manifest_hash(const VocabManifest& manifest);

}  // namespace mmgen
