#include "mmgen/vocab.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace mmgen {

const char* role_name(RoleKind kind) {
    switch (kind) {
        case RoleKind::Pad: return "Pad";
        case RoleKind::Bos: return "BOS";
        case RoleKind::Eos: return "EOS";
        case RoleKind::Soi: return "SOI";
        case RoleKind::Eoi: return "EOI";
        case RoleKind::Eol: return "EOL";
        case RoleKind::UserMark: return "UserMark";
        case RoleKind::AssistantMark: return "AssistantMark";
        case RoleKind::EndOfTurn: return "EndOfTurn";
        case RoleKind::HeightInd: return "HeightInd";
        case RoleKind::WidthInd: return "WidthInd";
        case RoleKind::Text: return "Text";
        case RoleKind::ImageCode: return "ImageCode";
    }
    return "?";
}

TokenId VocabManifest::text_token(int index) const {
    if (index < 0 || index >= text_size) {
        throw std::out_of_range("text index " + std::to_string(index) + " outside [0, " +
                                std::to_string(text_size) + ")");
    }
    return static_cast<TokenId>(text_base() + index);
}

TokenId VocabManifest::code_token(int index) const {
    if (index < 0 || index >= codebook_size) {
        throw std::out_of_range("image code " + std::to_string(index) + " outside [0, " +
                                std::to_string(codebook_size) + ")");
    }
    return static_cast<TokenId>(code_base() + index);
}

VocabManifest build_vocab(int text_size, int codebook_size, int max_side, int patch_px) {
    if (text_size < 1 || codebook_size < 1 || max_side < 1 || patch_px < 1) {
        throw std::invalid_argument("build_vocab: all arguments must be >= 1");
    }
    return VocabManifest{text_size, codebook_size, max_side, patch_px};
}

TokenRole classify(const VocabManifest& m, TokenId id) {
    if (id < 0 || id >= m.total()) {
        throw std::out_of_range("token id " + std::to_string(id) + " outside [0, " +
                                std::to_string(m.total()) + ")");
    }
    switch (id) {
        case kPad: return {RoleKind::Pad, 0};
        case kBos: return {RoleKind::Bos, 0};
        case kEos: return {RoleKind::Eos, 0};
        case kSoi: return {RoleKind::Soi, 0};
        case kEoi: return {RoleKind::Eoi, 0};
        case kEol: return {RoleKind::Eol, 0};
        case kUserMark: return {RoleKind::UserMark, 0};
        case kAssistantMark: return {RoleKind::AssistantMark, 0};
        case kEndOfTurn: return {RoleKind::EndOfTurn, 0};
        default: break;
    }
    if (id < m.width_base()) {
        return {RoleKind::HeightInd, id - m.height_base() + 1};
    }
    if (id < m.text_base()) {
        return {RoleKind::WidthInd, id - m.width_base() + 1};
    }
    if (id < m.code_base()) {
        return {RoleKind::Text, id - m.text_base()};
    }
    return {RoleKind::ImageCode, id - m.code_base()};
}

TokenId indicator_token(const VocabManifest& m, Axis axis, int value) {
    if (value < 1 || value > m.max_side) {
        throw std::out_of_range("indicator value " + std::to_string(value) + " outside [1, " +
                                std::to_string(m.max_side) + "]");
    }
    const int base = (axis == Axis::Height) ? m.height_base() : m.width_base();
    return static_cast<TokenId>(base + value - 1);
}

std::string manifest_to_json(const VocabManifest& m) {
    nlohmann::json j;
    j["format_version"] = kVocabFormatVersion;
    j["text_size"] = m.text_size;
    j["codebook_size"] = m.codebook_size;
    j["max_side"] = m.max_side;
    j["patch_px"] = m.patch_px;
    return j.dump(2) + "\n";
}

VocabManifest manifest_from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    const int version = j.at("format_version").get<int>();
    if (version != kVocabFormatVersion) {
        throw std::runtime_error("unsupported manifest format_version " + std::to_string(version));
    }
    return build_vocab(j.at("text_size").get<int>(), j.at("codebook_size").get<int>(),
                       j.at("max_side").get<int>(), j.at("patch_px").get<int>());
}

void save_manifest(const VocabManifest& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write manifest file: " + path);
    }
    out << manifest_to_json(m);
}

VocabManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot read manifest file: " + path);
    }
    std::stringstream buf;
    buf << in.rdbuf();
    return manifest_from_json(buf.str());
}

uint64_t manifest_hash(const VocabManifest& m) {
    const std::string text = manifest_to_json(m);
    uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace mmgen
