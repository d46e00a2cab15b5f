#include "peftforge/vit.hpp"

#include <string>

namespace peft {

void BackboneConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0 || hidden_dim <= 0 || num_layers <= 0 ||
        num_heads <= 0 || ffn_expansion <= 0) {
        throw ConfigError("backbone: all dimensions must be positive");
    }
    if (image_size % patch_size != 0) {
        throw ConfigError("backbone: image_size " + std::to_string(image_size) +
                          " is not divisible by patch_size " + std::to_string(patch_size));
    }
    if (hidden_dim % num_heads != 0) {
        throw ConfigError("backbone: hidden_dim " + std::to_string(hidden_dim) +
                          " is not divisible by num_heads " + std::to_string(num_heads));
    }
    if (drop_path_max < 0.0 || drop_path_max > 1.0) {
        throw ConfigError("backbone: drop_path_max must be in [0, 1]");
    }
}

double stochastic_depth_rate(int layer_index, int num_layers, double max_rate) {
    if (layer_index < 0 || layer_index >= num_layers) {
        throw ContractError("stochastic_depth_rate: layer_index " + std::to_string(layer_index) +
                            " out of range for " + std::to_string(num_layers) + " layers");
    }
    if (num_layers < 2) return 0.0;
    return max_rate * static_cast<double>(layer_index) / static_cast<double>(num_layers - 1);
}

}  // namespace peft
