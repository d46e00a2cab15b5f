#include <algorithm>
#include <filesystem>
#include <fstream>

#include "peftforge/data.hpp"

namespace peft {

namespace fs = std::filesystem;

NormalizationSpec NormalizationSpec::preset(const std::string& name) {
    NormalizationSpec spec;
    spec.name = name;
    if (name == "imagenet") {
        spec.mean = {0.485, 0.456, 0.406};
        spec.std = {0.229, 0.224, 0.225};
    } else if (name == "inception") {
        spec.mean = {0.5, 0.5, 0.5};
        spec.std = {0.5, 0.5, 0.5};
    } else {
        throw ConfigError("unknown normalization preset '" + name + "'");
    }
    return spec;
}

AugmentationSpec::Policy AugmentationSpec::policy_from_string(const std::string& s) {
    if (s == "vtab") return Policy::vtab_resize;
    if (s == "fgvc") return Policy::fgvc_crop_flip;
    throw ConfigError("unknown augmentation policy '" + s + "'");
}

std::string AugmentationSpec::policy_to_string(Policy p) {
    return p == Policy::vtab_resize ? "vtab" : "fgvc";
}

ShiftKind shift_from_string(const std::string& s) {
    if (s == "none") return ShiftKind::none;
    if (s == "color-remap") return ShiftKind::color_remap;
    if (s == "rotate") return ShiftKind::rotate;
    if (s == "texture") return ShiftKind::texture;
    throw ConfigError("unknown shift kind '" + s + "'");
}

std::string to_string(ShiftKind k) {
    switch (k) {
        case ShiftKind::none: return "none";
        case ShiftKind::color_remap: return "color-remap";
        case ShiftKind::rotate: return "rotate";
        case ShiftKind::texture: return "texture";
    }
    return "?";
}

namespace {

// Reads one PPM header token, skipping whitespace and '#' comments.
std::string ppm_token(std::istream& in) {
    std::string tok;
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (!std::isspace(c)) {
            break;
        }
        c = in.get();
    }
    while (c != EOF && !std::isspace(c)) {
        tok.push_back(static_cast<char>(c));
        c = in.get();
    }
    return tok;
}

}  // namespace

std::vector<double> decode_ppm(const std::string& path, int& height, int& width) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image");
    if (ppm_token(in) != "P6") throw IoError("not a binary PPM (P6) image");
    int w = 0, h = 0, maxval = 0;
    try {
        w = std::stoi(ppm_token(in));
        h = std::stoi(ppm_token(in));
        maxval = std::stoi(ppm_token(in));
    } catch (const std::exception&) {
        throw IoError("malformed PPM header");
    }
    if (w <= 0 || h <= 0) throw IoError("malformed PPM header");
    if (maxval != 255) throw IoError("only 8-bit PPM images are supported");
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!in) throw IoError("truncated PPM pixel data");

    // Interleaved RGB -> channel-major [3, h, w] in [0, 1].
    std::vector<double> out(raw.size());
    const std::size_t plane = static_cast<std::size_t>(w) * h;
    for (std::size_t i = 0; i < plane; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            out[c * plane + i] = raw[i * 3 + c] / 255.0;
        }
    }
    height = h;
    width = w;
    return out;
}

std::vector<std::pair<std::string, std::vector<std::string>>> list_image_folder(
    const std::string& root) {
    if (!fs::is_directory(root)) {
        throw IoError("image folder '" + root + "' does not exist");
    }
    std::vector<std::pair<std::string, std::vector<std::string>>> classes;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (!entry.is_directory()) continue;
        std::vector<std::string> files;
        for (const auto& f : fs::directory_iterator(entry.path())) {
            if (f.is_regular_file()) files.push_back(f.path().string());
        }
        std::sort(files.begin(), files.end());
        classes.emplace_back(entry.path().filename().string(), std::move(files));
    }
    std::sort(classes.begin(), classes.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    if (classes.empty()) throw IoError("image folder '" + root + "' has no class directories");
    return classes;
}

}  // namespace peft
