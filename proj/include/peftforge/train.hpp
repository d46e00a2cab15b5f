#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "peftforge/data.hpp"
#include "peftforge/vit.hpp"

namespace peft {

enum class TuneMode { linear, full, adapter };

TuneMode tune_mode_from_string(const std::string& s);
std::string to_string(TuneMode m);

/// The training recipe: decoupled-weight-decay adaptive optimizer, cosine
/// schedule with linear warmup, batch size 64. Learning rate defaults to
/// 1e-3; full fine-tuning conventionally drops it to 1e-4.
struct TrainConfig {
    double base_lr = 1e-3;
    double weight_decay = 1e-4;
    int batch_size = 64;
    int total_epochs = 100;
    int warmup_epochs = 10;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    TuneMode mode = TuneMode::adapter;
    // Weight decay skips layer-norm parameters and learned scales unless set.
    bool decay_norm_and_scale = false;

    void validate() const;
};

/// Per-step learning rate: linear ramp 0 -> base_lr over the warmup steps,
/// then half-cosine down to exactly 0 at total_epochs * steps_per_epoch.
double cosine_warmup_lr(long long step, long long steps_per_epoch, const TrainConfig& cfg);

namespace detail {

/// LN parameters and learned scales are exempt from decay by default.
inline bool decay_exempt(const std::string& name) {
    auto ends_with = [&name](const char* suffix) {
        const std::size_t n = std::string(suffix).size();
        return name.size() >= n && name.compare(name.size() - n, n, suffix) == 0;
    };
    return ends_with(".gamma") || ends_with(".beta") || ends_with(".scale");
}

}  // namespace detail

/// Decoupled-weight-decay Adam. Holds first/second moments for the trainable
/// parameters only; frozen parameters are never touched.
template <typename T>
class AdamW {
  public:
    AdamW(std::vector<Parameter<T>*> params, const TrainConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        for (auto* p : params) {
            if (!p->trainable) continue;
            Slot s;
            s.param = p;
            s.m.assign(p->tensor.data().size(), T(0));
            s.v.assign(p->tensor.data().size(), T(0));
            s.apply_decay = cfg_.decay_norm_and_scale || !detail::decay_exempt(p->name);
            slots_.push_back(std::move(s));
        }
    }

    /// One update: m, v moment tracking with bias correction, then
    /// theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
    void step(double lr) {
        ++t_;
        const T b1 = static_cast<T>(cfg_.beta1);
        const T b2 = static_cast<T>(cfg_.beta2);
        const T eps = static_cast<T>(cfg_.eps);
        const T bc1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
        const T bc2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
        for (auto& s : slots_) {
            if (!s.param->tensor.has_grad()) {
                throw ContractError("adamw: trainable parameter '" + s.param->name +
                                    "' has no gradient");
            }
            const auto& g = s.param->tensor.grad();
            auto& theta = s.param->tensor.data();
            const T wd = s.apply_decay ? static_cast<T>(cfg_.weight_decay) : T(0);
            for (std::size_t i = 0; i < theta.size(); ++i) {
                s.m[i] = b1 * s.m[i] + (T(1) - b1) * g[i];
                s.v[i] = b2 * s.v[i] + (T(1) - b2) * g[i] * g[i];
                const T m_hat = s.m[i] / bc1;
                const T v_hat = s.v[i] / bc2;
                theta[i] -= static_cast<T>(lr) * (m_hat / (std::sqrt(v_hat) + eps) + wd * theta[i]);
            }
        }
    }

    void zero_grad() {
        for (auto& s : slots_) s.param->tensor.zero_grad();
    }

    long long step_count() const { return t_; }
    std::size_t tracked_parameters() const { return slots_.size(); }

  private:
    struct Slot {
        Parameter<T>* param;
        std::vector<T> m, v;
        bool apply_decay;
    };
    std::vector<Slot> slots_;
    TrainConfig cfg_;
    long long t_ = 0;
};

/// Applies a tuning mode to the model's trainable flags and returns the
/// selected parameter set (which drives optimizer-state creation):
///   linear  - classifier only
///   adapter - adapters + classifier (+ any backbone LN a preset unfroze)
///   full    - everything
template <typename Model>
auto select_trainables(Model& model, TuneMode mode) {
    auto params = model.parameters();
    using ParamPtr = typename decltype(params)::value_type;
    std::vector<ParamPtr> selected;
    for (auto* p : params) {
        bool train = false;
        switch (mode) {
            case TuneMode::full:
                train = true;
                break;
            case TuneMode::linear:
                train = p->name.rfind("head.", 0) == 0;
                break;
            case TuneMode::adapter:
                train = p->name.rfind("head.", 0) == 0 || p->name.rfind("adapters.", 0) == 0 ||
                        (p->name.rfind("backbone.", 0) == 0 && p->trainable);
                break;
        }
        p->set_trainable(train);
        if (train) selected.push_back(p);
    }
    return selected;
}

struct EpochMetrics {
    double loss = 0.0;
    double accuracy = 0.0;
};

/// Seed-deterministic index shuffle (Fisher-Yates on the rng stream).
inline std::vector<int> shuffled_indices(int n, Rng& rng) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (int i = n - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(i + 1));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    return idx;
}

/// Ties argmax to the lowest class index.
template <typename T>
int argmax_row(const T* row, int c) {
    int best = 0;
    for (int j = 1; j < c; ++j) {
        if (row[j] > row[best]) best = j;
    }
    return best;
}

/// Owns the optimizer state and step counter for one model. The schedule is
/// evaluated per optimizer step against the step count fixed at construction.
template <typename Model>
class Trainer {
  public:
    using T = typename Model::scalar_type;

    Trainer(Model& model, const TrainConfig& cfg, int train_set_size)
        : model_(model), cfg_(cfg),
          steps_per_epoch_((train_set_size + cfg.batch_size - 1) / cfg.batch_size),
          optimizer_(select_trainables(model, cfg.mode), cfg) {
        if (train_set_size <= 0) throw ContractError("trainer: empty training set");
    }

    /// One pass over the data: train-mode forward, cross-entropy, backward,
    /// scheduled AdamW step, gradient reset. Returns averaged loss and
    /// running accuracy.
    EpochMetrics train_epoch(const Dataset<T>& data, const InputPipeline<T>& pipe, Rng& rng) {
        if (data.samples.empty()) throw ContractError("train_epoch: empty dataset");
        auto idx = shuffled_indices(static_cast<int>(data.size()), rng);
        double loss_sum = 0.0;
        long long correct = 0;
        int batches = 0;
        for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(cfg_.batch_size)) {
            const std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(cfg_.batch_size));
            std::vector<Tensor<T>> images;
            std::vector<int> labels;
            images.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) {
                const auto& s = data.samples[static_cast<std::size_t>(idx[i])];
                images.push_back(pipe.prepare_train(s, rng));
                labels.push_back(s.label);
            }
            auto logits = model_.forward(stack_images(images), true, rng);
            auto loss = cross_entropy(logits, labels);
            loss.backward();
            const double lr = cosine_warmup_lr(global_step_ + 1, steps_per_epoch_, cfg_);
            optimizer_.step(lr);
            optimizer_.zero_grad();
            ++global_step_;
            loss_sum += static_cast<double>(loss.item());
            const auto& out = logits.data();
            const int c = logits.dim(1);
            for (std::size_t i = 0; i < labels.size(); ++i) {
                if (argmax_row(out.data() + i * static_cast<std::size_t>(c), c) == labels[i]) ++correct;
            }
            ++batches;
        }
        return {loss_sum / batches, static_cast<double>(correct) / static_cast<double>(idx.size())};
    }

    /// Top-1 accuracy under the eval pipeline. Deterministic.
    double evaluate(const Dataset<T>& data, const InputPipeline<T>& pipe) const {
        if (data.samples.empty()) throw ContractError("evaluate: empty dataset");
        Rng unused(0);
        long long correct = 0;
        for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(cfg_.batch_size)) {
            const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(cfg_.batch_size));
            std::vector<Tensor<T>> images;
            images.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) {
                images.push_back(pipe.prepare_eval(data.samples[i]));
            }
            auto logits = model_.forward(stack_images(images), false, unused);
            const auto& out = logits.data();
            const int c = logits.dim(1);
            for (std::size_t i = start; i < end; ++i) {
                const T* row = out.data() + (i - start) * static_cast<std::size_t>(c);
                if (argmax_row(row, c) == data.samples[i].label) ++correct;
            }
        }
        return static_cast<double>(correct) / static_cast<double>(data.size());
    }

    AdamW<T>& optimizer() { return optimizer_; }
    long long global_step() const { return global_step_; }
    int steps_per_epoch() const { return steps_per_epoch_; }

  private:
    Model& model_;
    TrainConfig cfg_;
    int steps_per_epoch_;
    AdamW<T> optimizer_;
    long long global_step_ = 0;
};

}  // namespace peft
