#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmgen/vocab.hpp"

namespace mmgen {

// H x W grid of image code indices, row-major, in patch units. This is the
// 2-D object that the 1-D serialization below makes unambiguous.
struct ImageTokenGrid {
    int height = 0;  // patches
    int width = 0;   // patches
    std::vector<int> codes;  // height * width entries, each in [0, codebook_size)

    bool operator==(const ImageTokenGrid&) const = default;
};

enum class Segment : uint8_t { Text, ImageCode, Structural };

// 1-D token list with a per-position loss mask and segment tag.
struct MultimodalSequence {
    std::vector<TokenId> tokens;
    std::vector<uint8_t> loss_mask;     // 1 where the position carries loss
    std::vector<Segment> segments;

    size_t size() const { return tokens.size(); }
    void push(TokenId id, bool mask, Segment seg) {
        tokens.push_back(id);
        loss_mask.push_back(mask ? 1 : 0);
        segments.push_back(seg);
    }
    void append(const MultimodalSequence& other);
};

enum class ParseErrorKind : uint8_t {
    MissingIndicator,  // SOI not followed by a height then a width indicator
    RowOverrun,        // more than `width` codes before the row's EOL
    MissingEol,        // row complete but the next token is not EOL
    MissingEoi,        // all rows emitted but the next token is not EOI
    ForeignToken,      // non-image-code token inside a row
    Truncated,         // tokens ran out mid-span
};

const char* parse_error_name(ParseErrorKind kind);

struct ParseError : std::runtime_error {
    ParseError(ParseErrorKind kind, size_t position, const std::string& what)
        : std::runtime_error(what), kind(kind), position(position) {}
    ParseErrorKind kind;
    size_t position;  // index of the offending token (or one past the end if truncated)
};

struct ParsedImage {
    ImageTokenGrid grid;
    size_t end = 0;  // index one past the span's EOI
};

// Serializes a grid as [SOI, H(height), W(width), row codes + EOL per row, EOI].
// Length is always 3 + height*(width+1) + 1.
std::vector<TokenId> encode_grid(const VocabManifest& manifest, const ImageTokenGrid& grid);

// Strict inverse of encode_grid starting at tokens[start] (which must be SOI).
// Shape is recovered from the indicator tokens alone, never from code values.
ParsedImage parse_image(const VocabManifest& manifest, const std::vector<TokenId>& tokens,
                        size_t start);

// "Generate an image of {width}x{height} according to the following prompt:\n{description}".
// Dimensions are pixels and must be positive multiples of patch_px.
std::string build_t2i_prompt(int width_px, int height_px, const std::string& description,
                             int patch_px);

struct SpanReport {
    size_t start = 0;       // index of the span's SOI
    size_t end = 0;         // one past EOI when ok, else the error position
    bool ok = false;
    ParseErrorKind error = ParseErrorKind::Truncated;  // valid when !ok
};

struct ValidateReport {
    std::vector<SpanReport> spans;

    bool well_formed() const {
        for (const auto& s : spans) {
            if (!s.ok) {
                return false;
            }
        }
        return true;
    }
};

// Locates every image span (each SOI) and records per-span OK or the first
// parse error with its position.
ValidateReport validate(const VocabManifest& manifest, const std::vector<TokenId>& tokens);

}  // namespace mmgen
