#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "peftforge/adapter.hpp"
#include "peftforge/checkpoint.hpp"
#include "peftforge/data.hpp"
#include "peftforge/train.hpp"

namespace peft {

struct DataConfig {
    std::string source = "synthetic";  // synthetic | folder
    std::string path;                  // class-per-subdirectory root for folder source
    int classes = 5;
    int train_size = 800;
    int val_size = 200;
    int test_size = 200;
    ShiftKind shift = ShiftKind::rotate;
    std::uint64_t seed = 7;
};

struct PretrainConfig {
    int epochs = 15;
    int warmup_epochs = 2;
    double lr = 1e-3;
    std::uint64_t seed = 1000;
    std::string checkpoint;  // when set, loaded instead of pretraining
    std::string normalization = "inception";
};

/// A reproducible run description; every result is a pure function of this
/// record (wall-clock time aside).
struct ExperimentConfig {
    std::string precision = "f32";
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    std::string out_dir = "results";
    std::string mode = "adapter";  // linear | full | adapter

    BackboneConfig backbone;  // desk-scale defaults
    std::string adapter_preset = "custom";  // custom | adapter-plus | houlsby | pfeiffer | adaptformer
    AdapterConfig adapter;

    TrainConfig train = desk_train_defaults();
    DataConfig data;
    std::string normalization = "inception";
    std::string aug_policy = "vtab";
    bool include_val = false;
    bool save_models = false;

    static TrainConfig desk_train_defaults() {
        TrainConfig t;
        t.total_epochs = 20;
        t.warmup_epochs = 2;
        return t;
    }

    PretrainConfig pretrain;

    /// Strict dotted-key config file; unknown keys are errors.
    static ExperimentConfig from_file(const std::string& path);
    static ExperimentConfig from_kv(const std::map<std::string, std::string>& kv,
                                    const std::string& origin = "<config>");

    void validate() const;

    /// Sorted key=value dump of every resolved field (seeds excluded: records
    /// carry their seed separately, and a row is identified by its settings).
    std::string canonical() const;
    /// FNV-1a of canonical(), as 16 hex digits.
    std::string hash() const;
};

/// Parses "a.b = c" lines with '#' comments into a key/value map.
std::map<std::string, std::string> parse_kv_file(const std::string& path);

struct ResultRecord {
    std::string config_hash;
    std::uint64_t seed = 0;
    std::string label;  // ablation row label, "-" for plain runs
    std::string position, init, scaling, norm;
    int rank = 0;
    long long param_count = 0;
    std::vector<double> epoch_losses;
    double val_acc = 0.0;
    double test_acc = 0.0;
    double seconds = 0.0;
};

enum class EmitFormat { csv, json };

EmitFormat emit_format_from_string(const std::string& s);

/// Writes records with the stable column order
/// config_hash, seed, position, rank, init, scaling, norm, params, val_acc,
/// test_acc, seconds; floats at six significant digits. JSON additionally
/// carries the row label and the per-epoch loss curve.
void emit_results(const std::vector<ResultRecord>& records, const std::string& path,
                  EmitFormat format);

/// Mean and sample (n-1) standard deviation.
std::pair<double, double> mean_stddev(const std::vector<double>& values);

struct TableResult {
    std::string title;
    struct Row {
        std::string label;
        double params = 0.0;
        double mean = 0.0;
        double stddev = 0.0;
        double delta = 0.0;  // vs first row, where the table defines one
        std::vector<ResultRecord> records;
    };
    std::vector<Row> rows;
    bool has_delta = false;

    std::vector<ResultRecord> all_records() const;
    std::string formatted() const;
};

/// Worker-thread cap: PEFT_FORGE_THREADS when set, else a small default.
int worker_cap();

/// Runs fn(0..n-1) on up to worker_cap() threads; rethrows the first error.
template <typename Fn>
void parallel_tasks(int n, Fn&& fn) {
    const int workers = std::min(n, worker_cap());
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr error;
    std::mutex error_mu;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            while (!failed.load()) {
                const int i = next.fetch_add(1);
                if (i >= n) break;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mu);
                    if (!error) error = std::current_exception();
                    failed.store(true);
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

/// The placement implied by the config, or nullopt for linear/full modes.
std::optional<PlacementSpec> placement_for(const ExperimentConfig& cfg);

nlohmann::json placement_to_json(const PlacementSpec& spec);
PlacementSpec placement_from_json(const nlohmann::json& j);

/// Rebuilds an adapted model (backbone + optional adapters + classifier)
/// from a checkpoint written by run_one_seed.
template <typename T>
AdaptedViT<T> load_adapted_model(const std::string& path) {
    auto ckpt = load_checkpoint<T>(path);
    Rng rng(0);
    const int classes = ckpt.meta.at("classes");
    VisionTransformer<T> backbone(backbone_from_meta(ckpt.meta), classes, rng);
    std::optional<PlacementSpec> placement;
    if (ckpt.meta.contains("placement")) {
        placement = placement_from_json(ckpt.meta.at("placement"));
    }
    AdaptedViT<T> model(std::move(backbone), placement, rng);
    auto params = model.parameters();
    load_into(ckpt, params);
    for (auto* p : params) p->set_trainable(ckpt.tensors.at(p->name).trainable);
    return model;
}

// --- ablation row sets (mirroring the paper's study protocols) -------------

struct TableRowSpec {
    std::string label;
    ExperimentConfig cfg;
};

std::vector<TableRowSpec> position_ablation_rows(const ExperimentConfig& base);
std::vector<TableRowSpec> structure_ablation_rows(const ExperimentConfig& base);
std::vector<TableRowSpec> configuration_comparison_rows(const ExperimentConfig& base);
std::vector<TableRowSpec> normalization_study_rows(const ExperimentConfig& base);
std::vector<TableRowSpec> regularization_grid_rows(const ExperimentConfig& base);

// ---------------------------------------------------------------------------
// Runners
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
DataBundle<T> merged_train_val(const DataBundle<T>& b) {
    DataBundle<T> out;
    out.class_count = b.class_count;
    out.train = b.train;
    out.train.samples.insert(out.train.samples.end(), b.val.samples.begin(), b.val.samples.end());
    out.val = b.val;
    out.test = b.test;
    return out;
}

}  // namespace detail

/// Builds the (source, target) bundles described by the data config. The
/// folder source has no transfer pair; the folder plays the target and the
/// synthetic source still provides pretraining data.
template <typename T>
std::pair<DataBundle<T>, DataBundle<T>> build_data(const DataConfig& cfg) {
    Rng rng(cfg.seed);
    auto pair = synth_transfer_pair<T>(rng, cfg.classes, cfg.train_size, cfg.val_size,
                                       cfg.test_size, cfg.shift);
    if (cfg.source == "folder") {
        Dataset<T> folder = load_image_folder<T>(cfg.path);
        folder.validate();
        DataBundle<T> target;
        target.class_count = folder.class_count;
        // Deterministic 80/10/10 split by position.
        const std::size_t n = folder.samples.size();
        for (std::size_t i = 0; i < n; ++i) {
            auto& dst = (i % 10 == 8) ? target.val : (i % 10 == 9) ? target.test : target.train;
            dst.samples.push_back(folder.samples[i]);
        }
        target.train.class_count = target.val.class_count = target.test.class_count =
            folder.class_count;
        target.train.split = "train";
        target.val.split = "val";
        target.test.split = "test";
        return {std::move(pair.first), std::move(target)};
    }
    return pair;
}

/// Rebuilds a model around the same backbone weights with a freshly
/// initialized classifier for `classes` categories.
template <typename T>
VisionTransformer<T> with_new_head(const VisionTransformer<T>& pretrained, int classes, Rng& rng) {
    VisionTransformer<T> model(pretrained.config(), classes, rng);
    auto dst = model.parameters();
    std::map<std::string, const Parameter<T>*> src;
    for (const auto* p : pretrained.parameters()) src[p->name] = p;
    for (auto* p : dst) {
        if (p->name.rfind("backbone.", 0) != 0) continue;
        p->tensor.data() = src.at(p->name)->tensor.data();
    }
    return model;
}

/// Trains a fresh backbone on the source task (the desk-scale stand-in for
/// a pretrained model), or loads the checkpoint named by the config.
template <typename T>
VisionTransformer<T> pretrained_backbone(const ExperimentConfig& cfg,
                                         const DataBundle<T>& source) {
    if (!cfg.pretrain.checkpoint.empty()) {
        return load_model<T>(cfg.pretrain.checkpoint);
    }
    Rng rng(cfg.pretrain.seed);
    VisionTransformer<T> model(cfg.backbone, source.class_count, rng);
    TrainConfig tc = cfg.train;
    tc.mode = TuneMode::full;
    tc.base_lr = cfg.pretrain.lr;
    tc.total_epochs = cfg.pretrain.epochs;
    tc.warmup_epochs = cfg.pretrain.warmup_epochs;
    InputPipeline<T> pipe;
    pipe.aug.policy = AugmentationSpec::Policy::vtab_resize;
    pipe.aug.target_size = cfg.backbone.image_size;
    pipe.norm = NormalizationSpec::preset(cfg.pretrain.normalization);
    Trainer<VisionTransformer<T>> trainer(model, tc, static_cast<int>(source.train.size()));
    for (int e = 0; e < tc.total_epochs; ++e) trainer.train_epoch(source.train, pipe, rng);
    return model;
}

/// One seeded transfer run: clone the frozen backbone, attach a fresh head
/// (and adapters when configured), train on the target task, evaluate.
template <typename T>
ResultRecord run_one_seed(const ExperimentConfig& cfg, const VisionTransformer<T>& pretrained,
                          const DataBundle<T>& target, std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    cfg.validate();
    const TuneMode mode = tune_mode_from_string(cfg.mode);
    Rng rng(seed);
    Rng init_rng = rng.child(0x1217);
    Rng train_rng = rng.child(0x7e57);

    VisionTransformer<T> model = with_new_head(pretrained, target.class_count, init_rng);
    if (mode != TuneMode::full) freeze_backbone(model);
    auto placement = placement_for(cfg);
    AdaptedViT<T> adapted(std::move(model), placement, init_rng);

    TrainConfig tc = cfg.train;
    tc.mode = mode;
    if (mode == TuneMode::full && cfg.train.base_lr == 1e-3) tc.base_lr = 1e-4;

    const DataBundle<T>* bundle = &target;
    DataBundle<T> merged;
    if (cfg.include_val) {
        merged = detail::merged_train_val(target);
        bundle = &merged;
    }

    InputPipeline<T> pipe;
    pipe.aug.policy = AugmentationSpec::policy_from_string(cfg.aug_policy);
    pipe.aug.target_size = cfg.backbone.image_size;
    pipe.norm = NormalizationSpec::preset(cfg.normalization);

    Trainer<AdaptedViT<T>> trainer(adapted, tc, static_cast<int>(bundle->train.size()));

    long long live_count = 0;
    for (const auto* p : adapted.parameters()) {
        if (p->trainable) live_count += p->tensor.size();
    }
    if (mode != TuneMode::full) {
        const double expected = count_trainable_params(
            cfg.backbone, placement ? &*placement : nullptr, target.class_count);
        if (static_cast<long long>(expected) != live_count) {
            throw ContractError("trainable-parameter accounting mismatch: closed form " +
                                std::to_string(static_cast<long long>(expected)) +
                                " vs live enumeration " + std::to_string(live_count));
        }
    }

    ResultRecord rec;
    rec.config_hash = cfg.hash();
    rec.seed = seed;
    rec.label = "-";
    rec.norm = cfg.normalization;
    if (placement) {
        rec.position = to_string(placement->config.position);
        rec.init = to_string(placement->config.init);
        rec.scaling = to_string(placement->config.scaling);
        rec.rank = placement->config.rank;
    } else {
        rec.position = cfg.mode;
        rec.init = "-";
        rec.scaling = "-";
        rec.rank = 0;
    }
    rec.param_count = live_count;
    for (int e = 0; e < tc.total_epochs; ++e) {
        rec.epoch_losses.push_back(trainer.train_epoch(bundle->train, pipe, train_rng).loss);
    }
    rec.val_acc = trainer.evaluate(target.val, pipe);
    rec.test_acc = trainer.evaluate(target.test, pipe);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (cfg.save_models) {
        std::filesystem::create_directories(cfg.out_dir);
        nlohmann::json meta = backbone_meta(adapted.backbone());
        meta["kind"] = placement ? "adapted-vit" : "vit";
        if (placement) meta["placement"] = placement_to_json(*placement);
        const std::string path =
            cfg.out_dir + "/model_seed" + std::to_string(seed) + ".ckpt";
        auto mut = adapted.parameters();
        save_checkpoint<T>(path, meta, {mut.begin(), mut.end()});
    }
    return rec;
}

/// Full experiment: pretrain (or load) the backbone once, then one run per
/// seed, in parallel up to the worker cap.
template <typename T>
std::vector<ResultRecord> run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    auto [source, target] = build_data<T>(cfg.data);
    VisionTransformer<T> backbone = pretrained_backbone<T>(cfg, source);
    std::vector<ResultRecord> records(cfg.seeds.size());
    parallel_tasks(static_cast<int>(cfg.seeds.size()), [&](int i) {
        records[static_cast<std::size_t>(i)] =
            run_one_seed(cfg, backbone, target, cfg.seeds[static_cast<std::size_t>(i)]);
    });
    return records;
}

/// Runs a labelled row set against one shared pretrained backbone and
/// aggregates mean +/- sample stddev of the validation accuracy. All rows
/// must share the backbone, data, and pretraining settings.
template <typename T>
TableResult run_table_with(const std::string& title, const std::vector<TableRowSpec>& rows,
                           const VisionTransformer<T>& backbone, const DataBundle<T>& target) {
    TableResult table;
    table.title = title;
    if (rows.empty()) return table;

    struct Task {
        int row;
        std::uint64_t seed;
    };
    std::vector<Task> tasks;
    for (int r = 0; r < static_cast<int>(rows.size()); ++r) {
        for (auto seed : rows[static_cast<std::size_t>(r)].cfg.seeds) tasks.push_back({r, seed});
    }
    std::vector<std::vector<ResultRecord>> per_row(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        per_row[r].resize(rows[r].cfg.seeds.size());
    }
    std::vector<std::pair<std::size_t, std::size_t>> slot(tasks.size());
    {
        std::vector<std::size_t> counter(rows.size(), 0);
        for (std::size_t i = 0; i < tasks.size(); ++i) {
            slot[i] = {static_cast<std::size_t>(tasks[i].row), counter[static_cast<std::size_t>(tasks[i].row)]++};
        }
    }
    parallel_tasks(static_cast<int>(tasks.size()), [&](int i) {
        const auto& row = rows[static_cast<std::size_t>(tasks[static_cast<std::size_t>(i)].row)];
        auto rec = run_one_seed<T>(row.cfg, backbone, target, tasks[static_cast<std::size_t>(i)].seed);
        rec.label = row.label;
        per_row[slot[static_cast<std::size_t>(i)].first][slot[static_cast<std::size_t>(i)].second] = rec;
    });

    for (std::size_t r = 0; r < rows.size(); ++r) {
        TableResult::Row out;
        out.label = rows[r].label;
        out.records = std::move(per_row[r]);
        std::vector<double> accs;
        for (const auto& rec : out.records) accs.push_back(rec.val_acc);
        std::tie(out.mean, out.stddev) = mean_stddev(accs);
        out.params = out.records.empty() ? 0.0 : static_cast<double>(out.records.front().param_count);
        table.rows.push_back(std::move(out));
    }
    return table;
}

template <typename T>
TableResult run_table(const std::string& title, const std::vector<TableRowSpec>& rows) {
    if (rows.empty()) return TableResult{.title = title, .rows = {}, .has_delta = false};
    auto [source, target] = build_data<T>(rows.front().cfg.data);
    VisionTransformer<T> backbone = pretrained_backbone<T>(rows.front().cfg, source);
    return run_table_with<T>(title, rows, backbone, target);
}

template <typename T>
TableResult run_position_ablation(const ExperimentConfig& base) {
    auto table = run_table<T>("adapter position (val sets)", position_ablation_rows(base));
    return table;
}

template <typename T>
TableResult run_structure_ablation(const ExperimentConfig& base) {
    auto table = run_table<T>("inner adapter structure (val sets)", structure_ablation_rows(base));
    table.has_delta = true;
    for (auto& row : table.rows) row.delta = row.mean - table.rows.front().mean;
    return table;
}

template <typename T>
TableResult run_configuration_comparison(const ExperimentConfig& base) {
    return run_table<T>("adapter configurations from previous work (val sets)",
                        configuration_comparison_rows(base));
}

template <typename T>
TableResult run_normalization_study(const ExperimentConfig& base) {
    auto table = run_table<T>("data normalization (val sets)", normalization_study_rows(base));
    table.has_delta = true;
    for (auto& row : table.rows) row.delta = row.mean - table.rows.front().mean;
    return table;
}

template <typename T>
TableResult run_regularization_grid(const ExperimentConfig& base) {
    return run_table<T>("training regularization (val sets)", regularization_grid_rows(base));
}

}  // namespace peft
