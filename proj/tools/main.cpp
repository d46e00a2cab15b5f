// peft-forge: parameter-efficient fine-tuning experiments for a compact ViT,
// driven by dotted-key config files. See README.md for the config schema.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "peftforge/experiment.hpp"

namespace {

using namespace peft;

struct CommonOpts {
    std::string config_path;
    std::string seeds;
    std::string out;
    std::string format = "csv";
    std::string precision;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool config_required = true) {
    auto* c = cmd->add_option("--config", opts.config_path, "experiment config file");
    if (config_required) c->required();
    cmd->add_option("--seeds", opts.seeds, "comma-separated seed list (overrides config)");
    cmd->add_option("--out", opts.out, "output directory (overrides config)");
    cmd->add_option("--format", opts.format, "results format: csv or json")
        ->check(CLI::IsMember({"csv", "json"}));
    cmd->add_option("--precision", opts.precision, "f32 or f64 (overrides config)")
        ->check(CLI::IsMember({"f32", "f64"}));
}

ExperimentConfig load_config(const CommonOpts& opts) {
    ExperimentConfig cfg = ExperimentConfig::from_file(opts.config_path);
    if (!opts.seeds.empty()) {
        auto kv = std::map<std::string, std::string>{{"mode", cfg.mode}, {"seeds", opts.seeds}};
        cfg.seeds = ExperimentConfig::from_kv(kv, "<--seeds>").seeds;
    }
    if (!opts.out.empty()) cfg.out_dir = opts.out;
    if (!opts.precision.empty()) cfg.precision = opts.precision;
    cfg.validate();
    return cfg;
}

std::string results_path(const ExperimentConfig& cfg, const std::string& stem,
                         const std::string& format) {
    std::filesystem::create_directories(cfg.out_dir);
    return cfg.out_dir + "/" + stem + (format == "csv" ? ".csv" : ".json");
}

template <typename T>
int do_train(const ExperimentConfig& cfg, const CommonOpts& opts) {
    auto records = run_experiment<T>(cfg);
    const std::string path = results_path(cfg, "train", opts.format);
    emit_results(records, path, emit_format_from_string(opts.format));
    std::vector<double> val, test;
    for (const auto& r : records) {
        val.push_back(r.val_acc);
        test.push_back(r.test_acc);
    }
    auto [vm, vs] = mean_stddev(val);
    auto [tm, ts] = mean_stddev(test);
    std::printf("trainable params: %lld\n", records.front().param_count);
    std::printf("val  acc: %.2f%% +/- %.2f over %zu seed(s)\n", 100 * vm, 100 * vs, val.size());
    std::printf("test acc: %.2f%% +/- %.2f over %zu seed(s)\n", 100 * tm, 100 * ts, test.size());
    std::printf("results written to %s\n", path.c_str());
    return 0;
}

template <typename T>
int do_eval(const ExperimentConfig& cfg, const std::string& checkpoint) {
    AdaptedViT<T> model = load_adapted_model<T>(checkpoint);
    auto [source, target] = build_data<T>(cfg.data);
    (void)source;
    InputPipeline<T> pipe;
    pipe.aug.policy = AugmentationSpec::policy_from_string(cfg.aug_policy);
    pipe.aug.target_size = model.backbone().config().image_size;
    pipe.norm = NormalizationSpec::preset(cfg.normalization);
    TrainConfig tc = cfg.train;
    tc.mode = tune_mode_from_string(cfg.mode);
    Trainer<AdaptedViT<T>> trainer(model, tc, static_cast<int>(target.train.size()));
    std::printf("val  acc: %.2f%%\n", 100 * trainer.evaluate(target.val, pipe));
    std::printf("test acc: %.2f%%\n", 100 * trainer.evaluate(target.test, pipe));
    return 0;
}

template <typename T>
int do_table(const std::string& which, const ExperimentConfig& cfg, const CommonOpts& opts) {
    TableResult table;
    if (which == "position") {
        table = run_position_ablation<T>(cfg);
    } else if (which == "structure") {
        table = run_structure_ablation<T>(cfg);
    } else if (which == "configs") {
        table = run_configuration_comparison<T>(cfg);
    } else if (which == "norm") {
        table = run_normalization_study<T>(cfg);
    } else {
        table = run_regularization_grid<T>(cfg);
    }
    std::printf("%s", table.formatted().c_str());
    const std::string path = results_path(cfg, which, opts.format);
    emit_results(table.all_records(), path, emit_format_from_string(opts.format));
    std::printf("records written to %s\n", path.c_str());
    return 0;
}

// count-params: classes may be fractional ("940/19") to reproduce
// benchmark-averaged classifier sizes.
double parse_classes(const std::string& s) {
    const auto slash = s.find('/');
    if (slash == std::string::npos) return std::stod(s);
    return std::stod(s.substr(0, slash)) / std::stod(s.substr(slash + 1));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"parameter-efficient fine-tuning lab for compact vision transformers"};
    app.require_subcommand(1);

    CommonOpts opts;

    auto* train_cmd = app.add_subcommand("train", "run one experiment over its seed list");
    add_common(train_cmd, opts);

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a saved checkpoint");
    std::string checkpoint;
    add_common(eval_cmd, opts);
    eval_cmd->add_option("--checkpoint", checkpoint, "model checkpoint path")->required();

    auto* pos_cmd = app.add_subcommand("ablate-position", "adapter position study");
    add_common(pos_cmd, opts);
    auto* struct_cmd = app.add_subcommand("ablate-structure", "inner adapter structure study");
    add_common(struct_cmd, opts);
    auto* cmp_cmd = app.add_subcommand("compare-configs", "compare adapter presets");
    add_common(cmp_cmd, opts);
    auto* norm_cmd = app.add_subcommand("study-norm", "ImageNet vs Inception normalization study");
    add_common(norm_cmd, opts);
    auto* reg_cmd = app.add_subcommand("study-reg", "training regularization grid");
    add_common(reg_cmd, opts);

    auto* count_cmd = app.add_subcommand("count-params", "closed-form trainable-parameter count");
    int dim = 768, layers = 12, rank = 8;
    std::string preset = "adapter-plus", classes_str = "940/19";
    std::string position = "post", init = "houlsby", scaling = "none";
    bool bias = true, layernorm = false;
    std::string count_mode = "adapter";
    count_cmd->add_option("--dim", dim, "hidden dimension d");
    count_cmd->add_option("--layers", layers, "transformer layers N");
    count_cmd->add_option("--rank", rank, "adapter rank r");
    count_cmd->add_option("--preset", preset,
                          "adapter-plus | houlsby | pfeiffer | adaptformer | custom");
    count_cmd->add_option("--classes", classes_str, "classifier classes (allows fractions, e.g. 940/19)");
    count_cmd->add_option("--position", position, "custom preset: adapter position");
    count_cmd->add_option("--init", init, "custom preset: adapter init");
    count_cmd->add_option("--scaling", scaling, "custom preset: none | fixed | layer | channel");
    count_cmd->add_flag("--bias,!--no-bias", bias, "custom preset: projection biases");
    count_cmd->add_flag("--layernorm", layernorm, "custom preset: internal layer norm");
    count_cmd->add_option("--mode", count_mode, "adapter | linear");

    CLI11_PARSE(app, argc, argv);

    try {
        if (count_cmd->parsed()) {
            BackboneConfig backbone;
            backbone.hidden_dim = dim;
            backbone.num_layers = layers;
            const double classes = parse_classes(classes_str);
            double count = 0.0;
            if (count_mode == "linear") {
                count = count_trainable_params(backbone, nullptr, classes);
            } else {
                PlacementSpec spec;
                if (preset == "custom") {
                    spec.config.rank = rank;
                    spec.config.position = position_from_string(position);
                    spec.config.init = init_from_string(init);
                    spec.config.scaling = scaling_from_string(scaling);
                    spec.config.use_bias = bias;
                    spec.config.use_layernorm = layernorm;
                } else {
                    spec = preset_config(preset, rank);
                }
                count = count_trainable_params(backbone, &spec, classes);
            }
            std::printf("trainable parameters: %.2f (%.2f M)\n", count, count / 1e6);
            return 0;
        }

        if (eval_cmd->parsed()) {
            ExperimentConfig cfg = load_config(opts);
            return cfg.precision == "f64" ? do_eval<double>(cfg, checkpoint)
                                          : do_eval<float>(cfg, checkpoint);
        }

        ExperimentConfig cfg = load_config(opts);
        if (train_cmd->parsed()) {
            return cfg.precision == "f64" ? do_train<double>(cfg, opts) : do_train<float>(cfg, opts);
        }
        std::string which = "reg";
        if (pos_cmd->parsed()) which = "position";
        if (struct_cmd->parsed()) which = "structure";
        if (cmp_cmd->parsed()) which = "configs";
        if (norm_cmd->parsed()) which = "norm";
        return cfg.precision == "f64" ? do_table<double>(which, cfg, opts)
                                      : do_table<float>(which, cfg, opts);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
