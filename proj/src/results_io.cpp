#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "peftforge/experiment.hpp"

namespace peft {

EmitFormat emit_format_from_string(const std::string& s) {
    if (s == "csv") return EmitFormat::csv;
    if (s == "json") return EmitFormat::json;
    throw ConfigError("unknown output format '" + s + "'");
}

namespace {

std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

std::vector<ResultRecord> sorted_records(std::vector<ResultRecord> records) {
    std::sort(records.begin(), records.end(), [](const ResultRecord& a, const ResultRecord& b) {
        if (a.config_hash != b.config_hash) return a.config_hash < b.config_hash;
        return a.seed < b.seed;
    });
    return records;
}

}  // namespace

std::pair<double, double> mean_stddev(const std::vector<double>& values) {
    if (values.empty()) return {0.0, 0.0};
    double mean = 0.0;
    for (const double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    if (values.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (const double v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

void emit_results(const std::vector<ResultRecord>& records, const std::string& path,
                  EmitFormat format) {
    const auto recs = sorted_records(records);
    std::ofstream out(path);
    if (!out) throw IoError("cannot open results file for writing: " + path);
    if (format == EmitFormat::csv) {
        out << "config_hash,seed,position,rank,init,scaling,norm,params,val_acc,test_acc,seconds\n";
        for (const auto& r : recs) {
            out << r.config_hash << ',' << r.seed << ',' << r.position << ',' << r.rank << ','
                << r.init << ',' << r.scaling << ',' << r.norm << ',' << r.param_count << ','
                << fmt6(r.val_acc) << ',' << fmt6(r.test_acc) << ',' << fmt6(r.seconds) << '\n';
        }
    } else {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& r : recs) {
            nlohmann::json losses = nlohmann::json::array();
            for (const double l : r.epoch_losses) losses.push_back(fmt6(l));
            arr.push_back({{"config_hash", r.config_hash},
                           {"seed", r.seed},
                           {"label", r.label},
                           {"position", r.position},
                           {"rank", r.rank},
                           {"init", r.init},
                           {"scaling", r.scaling},
                           {"norm", r.norm},
                           {"params", r.param_count},
                           {"val_acc", fmt6(r.val_acc)},
                           {"test_acc", fmt6(r.test_acc)},
                           {"seconds", fmt6(r.seconds)},
                           {"epoch_losses", std::move(losses)}});
        }
        out << arr.dump(2) << '\n';
    }
    if (!out) throw IoError("failed writing results file: " + path);
}

std::vector<ResultRecord> TableResult::all_records() const {
    std::vector<ResultRecord> out;
    for (const auto& row : rows) {
        out.insert(out.end(), row.records.begin(), row.records.end());
    }
    return out;
}

std::string TableResult::formatted() const {
    std::ostringstream os;
    os << title << "\n";
    std::size_t width = 12;
    for (const auto& row : rows) width = std::max(width, row.label.size());
    for (const auto& row : rows) {
        os << "  " << row.label << std::string(width - row.label.size() + 2, ' ');
        char buf[96];
        std::snprintf(buf, sizeof(buf), "params %9.0f   acc %6.2f%% +/- %.2f", row.params,
                      100.0 * row.mean, 100.0 * row.stddev);
        os << buf;
        if (has_delta) {
            std::snprintf(buf, sizeof(buf), "   delta %+.2f", 100.0 * row.delta);
            os << buf;
        }
        os << "\n";
    }
    return os.str();
}

nlohmann::json placement_to_json(const PlacementSpec& spec) {
    return {{"rank", spec.config.rank},
            {"bias", spec.config.use_bias},
            {"layernorm", spec.config.use_layernorm},
            {"scaling", to_string(spec.config.scaling)},
            {"scale_value", spec.config.scale_value},
            {"init", to_string(spec.config.init)},
            {"position", to_string(spec.config.position)},
            {"drop_path", spec.config.drop_path_rate},
            {"dropout", spec.config.dropout_rate},
            {"adapt_attention", spec.adapt_attention},
            {"tune_backbone_ln", spec.tune_backbone_ln}};
}

PlacementSpec placement_from_json(const nlohmann::json& j) {
    PlacementSpec spec;
    spec.config.rank = j.at("rank").get<int>();
    spec.config.use_bias = j.at("bias").get<bool>();
    spec.config.use_layernorm = j.at("layernorm").get<bool>();
    spec.config.scaling = scaling_from_string(j.at("scaling").get<std::string>());
    spec.config.scale_value = j.at("scale_value").get<double>();
    spec.config.init = init_from_string(j.at("init").get<std::string>());
    spec.config.position = position_from_string(j.at("position").get<std::string>());
    spec.config.drop_path_rate = j.at("drop_path").get<double>();
    spec.config.dropout_rate = j.at("dropout").get<double>();
    spec.adapt_attention = j.at("adapt_attention").get<bool>();
    spec.tune_backbone_ln = j.at("tune_backbone_ln").get<bool>();
    return spec;
}

int worker_cap() {
    if (const char* env = std::getenv("PEFT_FORGE_THREADS")) {
        const int v = std::atoi(env);
        if (v >= 1) return v;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(std::max(1u, std::min(hw, 8u)));
}

// ---------------------------------------------------------------------------
// Ablation row sets
// ---------------------------------------------------------------------------

namespace {

/// Adapter_base of the position/regularization studies: biases on, no LN,
/// no scaling, Houlsby init.
ExperimentConfig base_adapter_cfg(const ExperimentConfig& base) {
    ExperimentConfig cfg = base;
    cfg.mode = "adapter";
    cfg.adapter_preset = "custom";
    cfg.adapter.use_bias = true;
    cfg.adapter.use_layernorm = false;
    cfg.adapter.scaling = ScalingMode::none;
    cfg.adapter.init = AdapterInit::houlsby;
    return cfg;
}

}  // namespace

std::vector<TableRowSpec> position_ablation_rows(const ExperimentConfig& base) {
    std::vector<TableRowSpec> rows;
    for (const AdapterPosition pos : {AdapterPosition::pre, AdapterPosition::intermediate,
                                      AdapterPosition::parallel, AdapterPosition::post}) {
        ExperimentConfig cfg = base_adapter_cfg(base);
        cfg.adapter.position = pos;
        rows.push_back({to_string(pos), std::move(cfg)});
    }
    return rows;
}

std::vector<TableRowSpec> structure_ablation_rows(const ExperimentConfig& base) {
    struct RowDef {
        const char* label;
        bool bias;
        bool ln;
        ScalingMode scaling;
        AdapterInit init;
    };
    const RowDef defs[] = {
        {"bias houlsby (base)", true, false, ScalingMode::none, AdapterInit::houlsby},
        {"no-bias houlsby", false, false, ScalingMode::none, AdapterInit::houlsby},
        {"bias lora", true, false, ScalingMode::none, AdapterInit::lora},
        {"bias bert", true, false, ScalingMode::none, AdapterInit::bert},
        {"bias+ln houlsby", true, true, ScalingMode::none, AdapterInit::houlsby},
        {"bias+ln+layer houlsby", true, true, ScalingMode::learned_layer, AdapterInit::houlsby},
        {"bias+layer houlsby", true, false, ScalingMode::learned_layer, AdapterInit::houlsby},
        {"bias+ln+channel houlsby", true, true, ScalingMode::learned_channel, AdapterInit::houlsby},
        {"bias+channel houlsby", true, false, ScalingMode::learned_channel, AdapterInit::houlsby},
    };
    std::vector<TableRowSpec> rows;
    for (const auto& def : defs) {
        ExperimentConfig cfg = base;
        cfg.mode = "adapter";
        cfg.adapter_preset = "custom";
        cfg.adapter.position = AdapterPosition::post;
        cfg.adapter.use_bias = def.bias;
        cfg.adapter.use_layernorm = def.ln;
        cfg.adapter.scaling = def.scaling;
        cfg.adapter.init = def.init;
        rows.push_back({def.label, std::move(cfg)});
    }
    return rows;
}

std::vector<TableRowSpec> configuration_comparison_rows(const ExperimentConfig& base) {
    struct RowDef {
        const char* label;
        const char* preset;
        int rank;
    };
    const RowDef defs[] = {
        {"houlsby r=8", "houlsby", 8},   {"houlsby r=4", "houlsby", 4},
        {"pfeiffer", "pfeiffer", 8},     {"adaptformer", "adaptformer", 8},
        {"adapter-plus", "adapter-plus", 8},
    };
    std::vector<TableRowSpec> rows;
    for (const auto& def : defs) {
        ExperimentConfig cfg = base;
        cfg.mode = "adapter";
        cfg.adapter_preset = def.preset;
        cfg.adapter.rank = def.rank;
        rows.push_back({def.label, std::move(cfg)});
    }
    return rows;
}

std::vector<TableRowSpec> normalization_study_rows(const ExperimentConfig& base) {
    std::vector<TableRowSpec> rows;
    for (const char* norm : {"imagenet", "inception"}) {
        ExperimentConfig cfg = base;
        cfg.normalization = norm;
        rows.push_back({std::string(norm) + " norm", std::move(cfg)});
    }
    return rows;
}

std::vector<TableRowSpec> regularization_grid_rows(const ExperimentConfig& base) {
    struct RowDef {
        const char* label;
        double vit_sd;
        double adapter_sd;
        double adapter_dropout;
    };
    const RowDef defs[] = {
        {"vit-sd / adapter-sd", 0.1, 0.1, 0.0},
        {"vit-sd / adapter-dropout", 0.1, 0.0, 0.1},
        {"vit-sd / none", 0.1, 0.0, 0.0},
        {"no-sd / adapter-sd", 0.0, 0.1, 0.0},
        {"no-sd / adapter-dropout", 0.0, 0.0, 0.1},
        {"no-sd / none", 0.0, 0.0, 0.0},
    };
    std::vector<TableRowSpec> rows;
    for (const auto& def : defs) {
        ExperimentConfig cfg = base_adapter_cfg(base);
        cfg.adapter.position = AdapterPosition::post;
        cfg.backbone.drop_path_max = def.vit_sd;
        cfg.adapter.drop_path_rate = def.adapter_sd;
        cfg.adapter.dropout_rate = def.adapter_dropout;
        rows.push_back({def.label, std::move(cfg)});
    }
    return rows;
}

}  // namespace peft
