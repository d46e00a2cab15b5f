#include "peftforge/train.hpp"

#include <cmath>

namespace peft {

TuneMode tune_mode_from_string(const std::string& s) {
    if (s == "linear") return TuneMode::linear;
    if (s == "full") return TuneMode::full;
    if (s == "adapter") return TuneMode::adapter;
    throw ConfigError("unknown tuning mode '" + s + "'");
}

std::string to_string(TuneMode m) {
    switch (m) {
        case TuneMode::linear: return "linear";
        case TuneMode::full: return "full";
        case TuneMode::adapter: return "adapter";
    }
    return "?";
}

void TrainConfig::validate() const {
    if (base_lr <= 0.0) throw ConfigError("train: base_lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be non-negative");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (total_epochs < 1) throw ConfigError("train: total_epochs must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs >= total_epochs) {
        throw ConfigError("train: warmup_epochs must be in [0, total_epochs)");
    }
    if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0 || eps <= 0.0) {
        throw ConfigError("train: invalid optimizer constants");
    }
}

double cosine_warmup_lr(long long step, long long steps_per_epoch, const TrainConfig& cfg) {
    if (step < 0) throw ContractError("cosine_warmup_lr: step must be >= 0");
    if (steps_per_epoch < 1) throw ContractError("cosine_warmup_lr: steps_per_epoch must be >= 1");
    const long long warmup = static_cast<long long>(cfg.warmup_epochs) * steps_per_epoch;
    const long long total = static_cast<long long>(cfg.total_epochs) * steps_per_epoch;
    if (step <= warmup) {
        if (warmup == 0) return cfg.base_lr;
        return cfg.base_lr * static_cast<double>(step) / static_cast<double>(warmup);
    }
    const double progress =
        static_cast<double>(std::min(step, total) - warmup) / static_cast<double>(total - warmup);
    return cfg.base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

}  // namespace peft
