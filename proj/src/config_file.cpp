#include <fstream>
#include <set>
#include <sstream>

#include "peftforge/experiment.hpp"

namespace peft {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

// Typed readers; each error names the key it came from.
long long read_int(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const long long v = std::stoll(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ParseError("key '" + key + "': expected an integer, got '" + value + "'");
    }
}

double read_double(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ParseError("key '" + key + "': expected a number, got '" + value + "'");
    }
}

bool read_bool(const std::string& key, const std::string& value) {
    if (value == "true") return true;
    if (value == "false") return false;
    throw ParseError("key '" + key + "': expected true/false, got '" + value + "'");
}

std::vector<std::uint64_t> read_seed_list(const std::string& key, const std::string& value) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        out.push_back(static_cast<std::uint64_t>(read_int(key, item)));
    }
    if (out.empty()) throw ParseError("key '" + key + "': empty seed list");
    return out;
}

std::string fmt(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

}  // namespace

std::map<std::string, std::string> parse_kv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": empty key");
        }
        if (kv.count(key)) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
        }
        kv[key] = value;
    }
    return kv;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    return from_kv(parse_kv_file(path), path);
}

ExperimentConfig ExperimentConfig::from_kv(const std::map<std::string, std::string>& kv,
                                           const std::string& origin) {
    ExperimentConfig cfg;
    std::set<std::string> seen;
    auto get = [&](const char* key) -> const std::string* {
        auto it = kv.find(key);
        if (it == kv.end()) return nullptr;
        seen.insert(key);
        return &it->second;
    };
    auto set_int = [&](const char* key, int& field) {
        if (const auto* v = get(key)) field = static_cast<int>(read_int(key, *v));
    };
    auto set_u64 = [&](const char* key, std::uint64_t& field) {
        if (const auto* v = get(key)) field = static_cast<std::uint64_t>(read_int(key, *v));
    };
    auto set_double = [&](const char* key, double& field) {
        if (const auto* v = get(key)) field = read_double(key, *v);
    };
    auto set_bool = [&](const char* key, bool& field) {
        if (const auto* v = get(key)) field = read_bool(key, *v);
    };
    auto set_string = [&](const char* key, std::string& field) {
        if (const auto* v = get(key)) field = *v;
    };

    if (const auto* v = get("mode")) {
        cfg.mode = *v;
    } else {
        throw ParseError(origin + ": missing required key 'mode'");
    }
    set_string("precision", cfg.precision);
    if (const auto* v = get("seeds")) cfg.seeds = read_seed_list("seeds", *v);
    set_string("out", cfg.out_dir);
    set_string("normalization", cfg.normalization);
    set_string("augmentation", cfg.aug_policy);
    set_bool("include_val", cfg.include_val);
    set_bool("save_models", cfg.save_models);

    set_int("backbone.image_size", cfg.backbone.image_size);
    set_int("backbone.patch_size", cfg.backbone.patch_size);
    set_int("backbone.hidden_dim", cfg.backbone.hidden_dim);
    set_int("backbone.layers", cfg.backbone.num_layers);
    set_int("backbone.heads", cfg.backbone.num_heads);
    set_int("backbone.ffn_expansion", cfg.backbone.ffn_expansion);
    set_double("backbone.drop_path_max", cfg.backbone.drop_path_max);

    if (const auto* v = get("adapter.preset")) cfg.adapter_preset = *v;
    set_int("adapter.rank", cfg.adapter.rank);
    if (const auto* v = get("adapter.position")) cfg.adapter.position = position_from_string(*v);
    if (const auto* v = get("adapter.init")) cfg.adapter.init = init_from_string(*v);
    if (const auto* v = get("adapter.scaling")) cfg.adapter.scaling = scaling_from_string(*v);
    set_double("adapter.scale_value", cfg.adapter.scale_value);
    set_bool("adapter.bias", cfg.adapter.use_bias);
    set_bool("adapter.layernorm", cfg.adapter.use_layernorm);
    set_double("adapter.drop_path", cfg.adapter.drop_path_rate);
    set_double("adapter.dropout", cfg.adapter.dropout_rate);

    set_double("train.lr", cfg.train.base_lr);
    set_double("train.weight_decay", cfg.train.weight_decay);
    set_int("train.batch_size", cfg.train.batch_size);
    set_int("train.epochs", cfg.train.total_epochs);
    set_int("train.warmup_epochs", cfg.train.warmup_epochs);
    set_bool("train.decay_norm_scale", cfg.train.decay_norm_and_scale);

    set_string("data.source", cfg.data.source);
    set_string("data.path", cfg.data.path);
    set_int("data.classes", cfg.data.classes);
    set_int("data.train_size", cfg.data.train_size);
    set_int("data.val_size", cfg.data.val_size);
    set_int("data.test_size", cfg.data.test_size);
    if (const auto* v = get("data.shift")) cfg.data.shift = shift_from_string(*v);
    set_u64("data.seed", cfg.data.seed);

    set_int("pretrain.epochs", cfg.pretrain.epochs);
    set_int("pretrain.warmup_epochs", cfg.pretrain.warmup_epochs);
    set_double("pretrain.lr", cfg.pretrain.lr);
    set_u64("pretrain.seed", cfg.pretrain.seed);
    set_string("pretrain.checkpoint", cfg.pretrain.checkpoint);
    set_string("pretrain.normalization", cfg.pretrain.normalization);

    for (const auto& [key, value] : kv) {
        (void)value;
        if (!seen.count(key)) {
            throw ParseError(origin + ": unknown key '" + key + "'");
        }
    }
    cfg.validate();
    return cfg;
}

void ExperimentConfig::validate() const {
    tune_mode_from_string(mode);  // throws on unknown
    if (precision != "f32" && precision != "f64") {
        throw ConfigError("precision must be f32 or f64, got '" + precision + "'");
    }
    if (seeds.empty()) throw ConfigError("at least one seed is required");
    backbone.validate();
    train.validate();
    if (mode == "adapter") {
        if (adapter_preset != "custom") preset_config(adapter_preset, adapter.rank);
        adapter.validate();
    }
    NormalizationSpec::preset(normalization);
    NormalizationSpec::preset(pretrain.normalization);
    AugmentationSpec::policy_from_string(aug_policy);
    if (data.source != "synthetic" && data.source != "folder") {
        throw ConfigError("data.source must be synthetic or folder");
    }
    if (data.source == "folder" && data.path.empty()) {
        throw ConfigError("data.source folder requires data.path");
    }
    if (data.classes < 2) throw ConfigError("data.classes must be >= 2");
    if (data.train_size < 1 || data.val_size < 1 || data.test_size < 1) {
        throw ConfigError("data split sizes must be positive");
    }
    if (pretrain.epochs < 1 || pretrain.warmup_epochs < 0 ||
        pretrain.warmup_epochs >= pretrain.epochs) {
        throw ConfigError("pretrain epochs/warmup are inconsistent");
    }
}

std::optional<PlacementSpec> placement_for(const ExperimentConfig& cfg) {
    if (cfg.mode != "adapter") return std::nullopt;
    if (cfg.adapter_preset == "custom") {
        return PlacementSpec{cfg.adapter, false, false};
    }
    PlacementSpec spec = preset_config(cfg.adapter_preset, cfg.adapter.rank);
    // Regularization settings ride along from the adapter block; presets pin
    // only the structure.
    spec.config.drop_path_rate = cfg.adapter.drop_path_rate;
    spec.config.dropout_rate = cfg.adapter.dropout_rate;
    return spec;
}

std::string ExperimentConfig::canonical() const {
    std::map<std::string, std::string> kv;
    kv["precision"] = precision;
    kv["mode"] = mode;
    kv["normalization"] = normalization;
    kv["augmentation"] = aug_policy;
    kv["include_val"] = include_val ? "true" : "false";
    kv["backbone.image_size"] = std::to_string(backbone.image_size);
    kv["backbone.patch_size"] = std::to_string(backbone.patch_size);
    kv["backbone.hidden_dim"] = std::to_string(backbone.hidden_dim);
    kv["backbone.layers"] = std::to_string(backbone.num_layers);
    kv["backbone.heads"] = std::to_string(backbone.num_heads);
    kv["backbone.ffn_expansion"] = std::to_string(backbone.ffn_expansion);
    kv["backbone.drop_path_max"] = fmt(backbone.drop_path_max);
    if (mode == "adapter") {
        kv["adapter.preset"] = adapter_preset;
        kv["adapter.rank"] = std::to_string(adapter.rank);
        kv["adapter.drop_path"] = fmt(adapter.drop_path_rate);
        kv["adapter.dropout"] = fmt(adapter.dropout_rate);
        if (adapter_preset == "custom") {
            kv["adapter.position"] = to_string(adapter.position);
            kv["adapter.init"] = to_string(adapter.init);
            kv["adapter.scaling"] = to_string(adapter.scaling);
            kv["adapter.scale_value"] = fmt(adapter.scale_value);
            kv["adapter.bias"] = adapter.use_bias ? "true" : "false";
            kv["adapter.layernorm"] = adapter.use_layernorm ? "true" : "false";
        }
    }
    kv["train.lr"] = fmt(train.base_lr);
    kv["train.weight_decay"] = fmt(train.weight_decay);
    kv["train.batch_size"] = std::to_string(train.batch_size);
    kv["train.epochs"] = std::to_string(train.total_epochs);
    kv["train.warmup_epochs"] = std::to_string(train.warmup_epochs);
    kv["train.decay_norm_scale"] = train.decay_norm_and_scale ? "true" : "false";
    kv["data.source"] = data.source;
    kv["data.path"] = data.path;
    kv["data.classes"] = std::to_string(data.classes);
    kv["data.train_size"] = std::to_string(data.train_size);
    kv["data.val_size"] = std::to_string(data.val_size);
    kv["data.test_size"] = std::to_string(data.test_size);
    kv["data.shift"] = to_string(data.shift);
    kv["data.seed"] = std::to_string(data.seed);
    kv["pretrain.epochs"] = std::to_string(pretrain.epochs);
    kv["pretrain.warmup_epochs"] = std::to_string(pretrain.warmup_epochs);
    kv["pretrain.lr"] = fmt(pretrain.lr);
    kv["pretrain.seed"] = std::to_string(pretrain.seed);
    kv["pretrain.checkpoint"] = pretrain.checkpoint;
    kv["pretrain.normalization"] = pretrain.normalization;

    std::string out;
    for (const auto& [k, v] : kv) {
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    return out;
}

std::string ExperimentConfig::hash() const {
    const std::string canon = canonical();
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const char c : canon) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace peft
