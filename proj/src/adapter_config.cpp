#include "peftforge/adapter.hpp"

#include <cmath>

namespace peft {

std::string to_string(AdapterPosition p) {
    switch (p) {
        case AdapterPosition::pre: return "pre";
        case AdapterPosition::post: return "post";
        case AdapterPosition::parallel: return "parallel";
        case AdapterPosition::intermediate: return "intermediate";
        case AdapterPosition::intermediate_noskip: return "intermediate-noskip";
    }
    return "?";
}

std::string to_string(AdapterInit i) {
    switch (i) {
        case AdapterInit::houlsby: return "houlsby";
        case AdapterInit::bert: return "bert";
        case AdapterInit::lora: return "lora";
        case AdapterInit::zero_degenerate: return "zero-degenerate";
    }
    return "?";
}

std::string to_string(ScalingMode s) {
    switch (s) {
        case ScalingMode::none: return "none";
        case ScalingMode::fixed: return "fixed";
        case ScalingMode::learned_layer: return "layer";
        case ScalingMode::learned_channel: return "channel";
    }
    return "?";
}

AdapterPosition position_from_string(const std::string& s) {
    if (s == "pre") return AdapterPosition::pre;
    if (s == "post") return AdapterPosition::post;
    if (s == "parallel") return AdapterPosition::parallel;
    if (s == "intermediate") return AdapterPosition::intermediate;
    if (s == "intermediate-noskip") return AdapterPosition::intermediate_noskip;
    throw ConfigError("unknown adapter position '" + s + "'");
}

AdapterInit init_from_string(const std::string& s) {
    if (s == "houlsby") return AdapterInit::houlsby;
    if (s == "bert") return AdapterInit::bert;
    if (s == "lora") return AdapterInit::lora;
    if (s == "zero-degenerate") return AdapterInit::zero_degenerate;
    throw ConfigError("unknown adapter init '" + s + "'");
}

ScalingMode scaling_from_string(const std::string& s) {
    if (s == "none") return ScalingMode::none;
    if (s == "fixed") return ScalingMode::fixed;
    if (s == "layer") return ScalingMode::learned_layer;
    if (s == "channel") return ScalingMode::learned_channel;
    throw ConfigError("unknown scaling mode '" + s + "'");
}

void AdapterConfig::validate() const {
    if (rank < 1) throw ConfigError("adapter rank must be >= 1");
    if (drop_path_rate < 0.0 || drop_path_rate >= 1.0) {
        throw ConfigError("adapter drop_path_rate must be in [0, 1)");
    }
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
        throw ConfigError("adapter dropout_rate must be in [0, 1)");
    }
    if (scaling == ScalingMode::fixed && !std::isfinite(scale_value)) {
        throw ConfigError("fixed scaling requires a finite scale value");
    }
}

PlacementSpec preset_config(const std::string& name, int rank) {
    PlacementSpec spec;
    AdapterConfig& c = spec.config;
    c.rank = rank;
    if (name == "adapter-plus") {
        c.position = AdapterPosition::post;
        c.init = AdapterInit::houlsby;
        c.scaling = ScalingMode::learned_channel;
        c.use_bias = true;
        c.use_layernorm = false;
    } else if (name == "houlsby") {
        c.position = AdapterPosition::intermediate;
        c.init = AdapterInit::houlsby;
        c.scaling = ScalingMode::none;
        c.use_bias = true;
        c.use_layernorm = false;
        spec.adapt_attention = true;
        spec.tune_backbone_ln = true;
    } else if (name == "pfeiffer") {
        c.position = AdapterPosition::post;
        c.init = AdapterInit::bert;
        c.scaling = ScalingMode::none;
        c.use_bias = true;
        c.use_layernorm = true;
    } else if (name == "adaptformer") {
        c.position = AdapterPosition::parallel;
        c.init = AdapterInit::lora;
        c.scaling = ScalingMode::fixed;
        c.scale_value = 0.1;
        c.use_bias = true;
        c.use_layernorm = false;
    } else {
        throw ConfigError("unknown adapter preset '" + name + "'");
    }
    return spec;
}

double count_trainable_params(const BackboneConfig& backbone, const PlacementSpec* placement,
                              double classes) {
    const double d = backbone.hidden_dim;
    const double N = backbone.num_layers;
    double total = d * classes + classes;  // classifier
    if (!placement) return total;

    const AdapterConfig& c = placement->config;
    double per_adapter = 2.0 * d * c.rank;
    if (c.use_bias) per_adapter += c.rank + d;
    if (c.use_layernorm) per_adapter += 2.0 * d;
    if (c.scaling == ScalingMode::learned_layer) per_adapter += 1.0;
    if (c.scaling == ScalingMode::learned_channel) per_adapter += d;

    const double sets = placement->adapt_attention ? 2.0 : 1.0;
    total += N * sets * per_adapter;
    if (placement->tune_backbone_ln) {
        total += N * 2.0 * 2.0 * d + 2.0 * d;  // two LN pairs per layer + final LN
    }
    return total;
}

}  // namespace peft
