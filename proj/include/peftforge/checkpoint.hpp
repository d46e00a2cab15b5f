#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "peftforge/vit.hpp"

namespace peft {

// Format: 8-byte magic, u32 version, u64 header length, JSON header, raw
// little-endian blob section. The header records per-tensor name, shape,
// trainable flag and byte offsets, plus arbitrary model metadata.
inline constexpr char kCheckpointMagic[8] = {'P', 'E', 'F', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written as native little-endian");

template <typename T>
const char* dtype_name() {
    if constexpr (sizeof(T) == 4) return "f32";
    else return "f64";
}

template <typename T>
void save_checkpoint(const std::string& path, const nlohmann::json& meta,
                     const std::vector<const Parameter<T>*>& params) {
    nlohmann::json header;
    header["format_version"] = kCheckpointVersion;
    header["dtype"] = dtype_name<T>();
    header["meta"] = meta;
    nlohmann::json tensors = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto* p : params) {
        const std::uint64_t bytes = p->tensor.data().size() * sizeof(T);
        tensors.push_back({{"name", p->name},
                           {"shape", p->tensor.shape()},
                           {"trainable", p->trainable},
                           {"offset", offset},
                           {"bytes", bytes}});
        offset += bytes;
    }
    header["tensors"] = std::move(tensors);
    const std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t hlen = header_str.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto* p : params) {
        out.write(reinterpret_cast<const char*>(p->tensor.data().data()),
                  static_cast<std::streamsize>(p->tensor.data().size() * sizeof(T)));
    }
    if (!out) throw IoError("failed writing checkpoint: " + path);
}

template <typename T>
struct LoadedCheckpoint {
    nlohmann::json meta;
    struct Entry {
        Shape shape;
        bool trainable;
        std::vector<T> data;
    };
    std::unordered_map<std::string, Entry> tensors;
    std::vector<std::string> order;  // names in file order
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw IoError("not a checkpoint file: " + path);
    }
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (!in || version != kCheckpointVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
    }
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!in) throw IoError("truncated checkpoint header: " + path);
    std::string header_str(hlen, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw IoError("truncated checkpoint header: " + path);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_str);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("corrupt checkpoint header in " + path + ": " + e.what());
    }
    if (header.value("dtype", "") != dtype_name<T>()) {
        throw IoError("checkpoint dtype " + header.value("dtype", std::string("?")) +
                      " does not match run precision " + dtype_name<T>());
    }

    LoadedCheckpoint<T> ckpt;
    ckpt.meta = header.value("meta", nlohmann::json::object());
    for (const auto& t : header.at("tensors")) {
        typename LoadedCheckpoint<T>::Entry entry;
        entry.shape = t.at("shape").get<Shape>();
        entry.trainable = t.at("trainable").get<bool>();
        const std::uint64_t bytes = t.at("bytes").get<std::uint64_t>();
        entry.data.resize(bytes / sizeof(T));
        in.read(reinterpret_cast<char*>(entry.data.data()), static_cast<std::streamsize>(bytes));
        if (!in) throw IoError("truncated checkpoint blob for tensor '" +
                               t.at("name").get<std::string>() + "' in " + path);
        const std::string name = t.at("name").get<std::string>();
        ckpt.order.push_back(name);
        ckpt.tensors.emplace(name, std::move(entry));
    }
    return ckpt;
}

/// Copies checkpoint blobs into matching parameters by name. Only names
/// starting with `prefix` are considered; every considered parameter must
/// exist in the checkpoint with the same shape.
template <typename T>
void load_into(const LoadedCheckpoint<T>& ckpt, const std::vector<Parameter<T>*>& params,
               const std::string& prefix = "") {
    for (auto* p : params) {
        if (!prefix.empty() && p->name.rfind(prefix, 0) != 0) continue;
        auto it = ckpt.tensors.find(p->name);
        if (it == ckpt.tensors.end()) {
            throw IoError("checkpoint is missing tensor '" + p->name + "'");
        }
        if (it->second.shape != p->tensor.shape()) {
            throw IoError("checkpoint tensor '" + p->name + "' has shape " +
                          shape_str(it->second.shape) + ", model expects " +
                          shape_str(p->tensor.shape()));
        }
        p->tensor.data() = it->second.data;
    }
}

template <typename T>
nlohmann::json backbone_meta(const VisionTransformer<T>& model) {
    const BackboneConfig& c = model.config();
    return {{"kind", "vit"},
            {"classes", model.num_classes()},
            {"backbone",
             {{"image_size", c.image_size},
              {"patch_size", c.patch_size},
              {"hidden_dim", c.hidden_dim},
              {"num_layers", c.num_layers},
              {"num_heads", c.num_heads},
              {"ffn_expansion", c.ffn_expansion},
              {"drop_path_max", c.drop_path_max}}}};
}

inline BackboneConfig backbone_from_meta(const nlohmann::json& meta) {
    const auto& b = meta.at("backbone");
    BackboneConfig c;
    c.image_size = b.at("image_size").get<int>();
    c.patch_size = b.at("patch_size").get<int>();
    c.hidden_dim = b.at("hidden_dim").get<int>();
    c.num_layers = b.at("num_layers").get<int>();
    c.num_heads = b.at("num_heads").get<int>();
    c.ffn_expansion = b.at("ffn_expansion").get<int>();
    c.drop_path_max = b.at("drop_path_max").get<double>();
    return c;
}

template <typename T>
void save_model(const VisionTransformer<T>& model, const std::string& path) {
    save_checkpoint<T>(path, backbone_meta(model), model.parameters());
}

template <typename T>
VisionTransformer<T> load_model(const std::string& path) {
    auto ckpt = load_checkpoint<T>(path);
    if (ckpt.meta.value("kind", "") != "vit") {
        throw IoError("checkpoint at " + path + " does not hold a plain backbone model");
    }
    Rng rng(0);
    const int classes = ckpt.meta.at("classes");
    VisionTransformer<T> model(backbone_from_meta(ckpt.meta), classes, rng);
    auto params = model.parameters();
    load_into(ckpt, params);
    for (auto* p : params) p->set_trainable(ckpt.tensors.at(p->name).trainable);
    return model;
}

}  // namespace peft
