#include "mmgen/sequence.hpp"

namespace mmgen {

void MultimodalSequence::append(const MultimodalSequence& other) {
    tokens.insert(tokens.end(), other.tokens.begin(), other.tokens.end());
    loss_mask.insert(loss_mask.end(), other.loss_mask.begin(), other.loss_mask.end());
    segments.insert(segments.end(), other.segments.begin(), other.segments.end());
}

const char* parse_error_name(ParseErrorKind kind) {
    switch (kind) {
        case ParseErrorKind::MissingIndicator: return "MissingIndicator";
        case ParseErrorKind::RowOverrun: return "RowOverrun";
        case ParseErrorKind::MissingEol: return "MissingEol";
        case ParseErrorKind::MissingEoi: return "MissingEoi";
        case ParseErrorKind::ForeignToken: return "ForeignToken";
        case ParseErrorKind::Truncated: return "Truncated";
    }
    return "?";
}

std::vector<TokenId> encode_grid(const VocabManifest& m, const ImageTokenGrid& grid) {
    if (grid.height < 1 || grid.height > m.max_side || grid.width < 1 || grid.width > m.max_side) {
        throw std::invalid_argument("encode_grid: shape " + std::to_string(grid.height) + "x" +
                                    std::to_string(grid.width) + " outside [1, " +
                                    std::to_string(m.max_side) + "]^2");
    }
    if (grid.codes.size() != static_cast<size_t>(grid.height) * static_cast<size_t>(grid.width)) {
        throw std::invalid_argument("encode_grid: code count does not match shape");
    }

    std::vector<TokenId> out;
    out.reserve(3 + static_cast<size_t>(grid.height) * (grid.width + 1) + 1);
    out.push_back(kSoi);
    out.push_back(indicator_token(m, Axis::Height, grid.height));
    out.push_back(indicator_token(m, Axis::Width, grid.width));
    for (int r = 0; r < grid.height; ++r) {
        for (int c = 0; c < grid.width; ++c) {
            out.push_back(m.code_token(grid.codes[static_cast<size_t>(r) * grid.width + c]));
        }
        out.push_back(kEol);
    }
    out.push_back(kEoi);
    return out;
}

namespace {

[[noreturn]] void fail(ParseErrorKind kind, size_t pos) {
    throw ParseError(kind, pos, std::string(parse_error_name(kind)) + " at token index " +
                                    std::to_string(pos));
}

}  // namespace

ParsedImage parse_image(const VocabManifest& m, const std::vector<TokenId>& tokens, size_t start) {
    if (start >= tokens.size() || tokens[start] != kSoi) {
        throw std::invalid_argument("parse_image: tokens[start] must be SOI");
    }

    size_t i = start + 1;
    const auto need = [&](size_t pos) {
        if (pos >= tokens.size()) {
            fail(ParseErrorKind::Truncated, pos);
        }
    };

    need(i);
    TokenRole role = classify(m, tokens[i]);
    if (role.kind != RoleKind::HeightInd) {
        fail(ParseErrorKind::MissingIndicator, i);
    }
    const int height = role.value;
    ++i;

    need(i);
    role = classify(m, tokens[i]);
    if (role.kind != RoleKind::WidthInd) {
        fail(ParseErrorKind::MissingIndicator, i);
    }
    const int width = role.value;
    ++i;

    ImageTokenGrid grid{height, width, {}};
    grid.codes.reserve(static_cast<size_t>(height) * width);
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            need(i);
            role = classify(m, tokens[i]);
            if (role.kind != RoleKind::ImageCode) {
                fail(ParseErrorKind::ForeignToken, i);
            }
            grid.codes.push_back(role.value);
            ++i;
        }
        need(i);
        if (tokens[i] != kEol) {
            if (classify(m, tokens[i]).kind == RoleKind::ImageCode) {
                fail(ParseErrorKind::RowOverrun, i);
            }
            fail(ParseErrorKind::MissingEol, i);
        }
        ++i;
    }

    need(i);
    if (tokens[i] != kEoi) {
        fail(ParseErrorKind::MissingEoi, i);
    }
    ++i;

    return ParsedImage{std::move(grid), i};
}

std::string build_t2i_prompt(int width_px, int height_px, const std::string& description,
                             int patch_px) {
    if (patch_px < 1) {
        throw std::invalid_argument("build_t2i_prompt: patch_px must be >= 1");
    }
    if (width_px < 1 || height_px < 1 || width_px % patch_px != 0 || height_px % patch_px != 0) {
        throw std::invalid_argument("build_t2i_prompt: dimensions " + std::to_string(width_px) +
                                    "x" + std::to_string(height_px) +
                                    " must be positive multiples of patch_px=" +
                                    std::to_string(patch_px));
    }
    return "Generate an image of " + std::to_string(width_px) + "x" + std::to_string(height_px) +
           " according to the following prompt:\n" + description;
}

ValidateReport validate(const VocabManifest& m, const std::vector<TokenId>& tokens) {
    ValidateReport report;
    size_t i = 0;
    while (i < tokens.size()) {
        if (tokens[i] != kSoi) {
            ++i;
            continue;
        }
        try {
            const ParsedImage parsed = parse_image(m, tokens, i);
            report.spans.push_back(SpanReport{i, parsed.end, true, ParseErrorKind::Truncated});
            i = parsed.end;
        } catch (const ParseError& e) {
            report.spans.push_back(SpanReport{i, e.position, false, e.kind});
            // resume scanning at the offending token; it may open the next span
            i = (e.position > i) ? e.position : i + 1;
        }
    }
    return report;
}

}  // namespace mmgen
