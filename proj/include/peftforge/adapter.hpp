#pragma once

#include <optional>
#include <string>
#include <vector>

#include "peftforge/vit.hpp"

namespace peft {

/// Where the adapter hooks into the FFN section of a transformer layer.
enum class AdapterPosition { pre, post, parallel, intermediate, intermediate_noskip };

enum class AdapterInit { houlsby, bert, lora, zero_degenerate };

enum class ScalingMode { none, fixed, learned_layer, learned_channel };

std::string to_string(AdapterPosition p);
std::string to_string(AdapterInit i);
std::string to_string(ScalingMode s);
AdapterPosition position_from_string(const std::string& s);
AdapterInit init_from_string(const std::string& s);
ScalingMode scaling_from_string(const std::string& s);

/// Declarative description of one bottleneck adapter.
struct AdapterConfig {
    int rank = 8;
    bool use_bias = true;
    bool use_layernorm = false;
    ScalingMode scaling = ScalingMode::none;
    double scale_value = 1.0;  // only used for fixed scaling
    AdapterInit init = AdapterInit::houlsby;
    AdapterPosition position = AdapterPosition::post;
    double drop_path_rate = 0.1;
    double dropout_rate = 0.0;  // elementwise dropout on the bottleneck hidden

    void validate() const;
    bool operator==(const AdapterConfig&) const = default;
};

/// An adapter config plus its placement across the network. The Houlsby
/// recipe attaches a second adapter at the attention sublayer and unfreezes
/// the backbone's layer-norm parameters.
struct PlacementSpec {
    AdapterConfig config;
    bool adapt_attention = false;
    bool tune_backbone_ln = false;

    bool operator==(const PlacementSpec&) const = default;
};

/// Expands one of the named configurations of prior work (plus this paper's
/// recommended one) into a full placement spec.
///   adapter-plus: post position, learned channel scaling, houlsby init, no LN
///   houlsby:      intermediate at attention AND ffn, backbone LN unfrozen
///   pfeiffer:     post position, bert init, internal LN
///   adaptformer:  parallel position, fixed scaling 0.1, no LN
PlacementSpec preset_config(const std::string& name, int rank = 8);

/// Closed-form trainable-parameter count for a frozen backbone with adapters
/// and a dc + c classifier. `classes` may be fractional to reproduce
/// benchmark-averaged classifier sizes. With no placement this is the
/// linear-probe count dc + c.
double count_trainable_params(const BackboneConfig& backbone, const PlacementSpec* placement,
                              double classes);

/// One bottleneck adapter's parameter block. Exactly the parameters implied
/// by the config exist; all are trainable.
template <typename T>
struct AdapterModule {
    Parameter<T> w_down, w_up;
    Parameter<T> b_down, b_up;        // when use_bias
    Parameter<T> ln_gamma, ln_beta;   // when use_layernorm
    Parameter<T> scale;               // when scaling is learned

    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        for (Parameter<T>* p : {&w_down, &b_down, &w_up, &b_up, &ln_gamma, &ln_beta, &scale}) {
            if (p->tensor.defined()) out.push_back(p);
        }
        return out;
    }
};

/// Builds and initializes one adapter for hidden dimension d.
///   houlsby: both projections truncated normal sigma 0.01, bound 0.02, zero biases
///   bert:    untruncated normal sigma 0.02, zero biases
///   lora:    down projection Kaiming-uniform (weights and biases), up all zero
///   zero-degenerate: both projections and biases all zero
/// Learned scales start at 1; internal LN starts at gamma 1, beta 0.
template <typename T>
AdapterModule<T> init_adapter(const AdapterConfig& cfg, int d, Rng& rng,
                              const std::string& name_prefix) {
    cfg.validate();
    if (d < cfg.rank) throw ConfigError("adapter rank exceeds hidden dimension");
    const int r = cfg.rank;
    AdapterModule<T> m;
    auto named = [&](const char* suffix, Tensor<T> t) {
        return Parameter<T>{name_prefix + suffix, std::move(t), true};
    };
    switch (cfg.init) {
        case AdapterInit::houlsby:
            m.w_down = named("w_down", sample_truncated_normal<T>(rng, 0.01, 0.02, {d, r}, true));
            m.w_up = named("w_up", sample_truncated_normal<T>(rng, 0.01, 0.02, {r, d}, true));
            break;
        case AdapterInit::bert: {
            const double inf = std::numeric_limits<double>::infinity();
            m.w_down = named("w_down", sample_truncated_normal<T>(rng, 0.02, inf, {d, r}, true));
            m.w_up = named("w_up", sample_truncated_normal<T>(rng, 0.02, inf, {r, d}, true));
            break;
        }
        case AdapterInit::lora:
            m.w_down = named("w_down", sample_kaiming_uniform<T>(rng, d, {d, r}, true));
            m.w_up = named("w_up", Tensor<T>::zeros({r, d}, true));
            break;
        case AdapterInit::zero_degenerate:
            m.w_down = named("w_down", Tensor<T>::zeros({d, r}, true));
            m.w_up = named("w_up", Tensor<T>::zeros({r, d}, true));
            break;
    }
    if (cfg.use_bias) {
        if (cfg.init == AdapterInit::lora) {
            m.b_down = named("b_down", sample_kaiming_uniform<T>(rng, d, {r}, true));
        } else {
            m.b_down = named("b_down", Tensor<T>::zeros({r}, true));
        }
        m.b_up = named("b_up", Tensor<T>::zeros({d}, true));
    }
    if (cfg.use_layernorm) {
        m.ln_gamma = named("ln.gamma", Tensor<T>::filled({d}, T(1), true));
        m.ln_beta = named("ln.beta", Tensor<T>::zeros({d}, true));
    }
    if (cfg.scaling == ScalingMode::learned_layer) {
        m.scale = named("scale", Tensor<T>::filled({1}, T(1), true));
    } else if (cfg.scaling == ScalingMode::learned_channel) {
        m.scale = named("scale", Tensor<T>::filled({d}, T(1), true));
    }
    return m;
}

/// The adapter branch without its skip connection: optional LN, bottleneck
/// down-projection, GELU, up-projection, then scaling. Dropout (when
/// configured) zeroes bottleneck activations in train mode.
template <typename T>
Tensor<T> adapter_forward(const Tensor<T>& x, const AdapterModule<T>& m, const AdapterConfig& cfg,
                          bool train_mode, Rng& rng) {
    Tensor<T> t = x;
    if (cfg.use_layernorm) t = layer_norm(t, m.ln_gamma.tensor, m.ln_beta.tensor);
    auto hidden = matmul(t, m.w_down.tensor);
    if (cfg.use_bias) hidden = add(hidden, m.b_down.tensor);
    hidden = gelu(hidden);
    if (train_mode && cfg.dropout_rate > 0.0) {
        std::vector<T> mask(static_cast<std::size_t>(hidden.size()));
        const T keep = static_cast<T>(1.0 / (1.0 - cfg.dropout_rate));
        for (auto& v : mask) v = rng.bernoulli(cfg.dropout_rate) ? T(0) : keep;
        hidden = mask_mul(hidden, mask);
    }
    auto out = matmul(hidden, m.w_up.tensor);
    if (cfg.use_bias) out = add(out, m.b_up.tensor);
    switch (cfg.scaling) {
        case ScalingMode::none:
            break;
        case ScalingMode::fixed:
            out = scale_const(out, static_cast<T>(cfg.scale_value));
            break;
        case ScalingMode::learned_layer:
        case ScalingMode::learned_channel:
            out = mul(out, m.scale.tensor);
            break;
    }
    return out;
}

namespace detail {

/// Adapter branch plus its drop-path regularization.
template <typename T>
Tensor<T> adapter_branch(const Tensor<T>& x, const AdapterModule<T>& m, const AdapterConfig& cfg,
                         bool train, Rng& rng) {
    return apply_stochastic_depth(adapter_forward(x, m, cfg, train, rng), cfg.drop_path_rate,
                                  train, rng);
}

}  // namespace detail

/// Wires the adapter into the FFN section of a layer. `x` is the output of
/// the attention sublayer with its residual added; `sd_rate` is the
/// backbone's stochastic-depth rate for this layer. The FFN always includes
/// its preceding LN. Adapted branches are accumulated after the unadapted
/// sum so a zero adapter leaves the output bit-identical.
template <typename T>
Tensor<T> wire_position(const Tensor<T>& x, const TransformerLayer<T>& layer, int num_heads,
                        const AdapterModule<T>& m, const AdapterConfig& cfg, double sd_rate,
                        bool train, Rng& rng) {
    (void)num_heads;
    auto ffn_of = [&](const Tensor<T>& in) {
        return ffn_forward(layer_norm(in, layer.ln2.gamma.tensor, layer.ln2.beta.tensor), layer);
    };
    switch (cfg.position) {
        case AdapterPosition::pre: {
            // y = A(x) + x; out = FFN(y) + y, one adapter evaluation.
            auto y = add(x, detail::adapter_branch(x, m, cfg, train, rng));
            return add(y, apply_stochastic_depth(ffn_of(y), sd_rate, train, rng));
        }
        case AdapterPosition::post: {
            // y = FFN(x) + x; out = A(y) + y.
            auto y = add(x, apply_stochastic_depth(ffn_of(x), sd_rate, train, rng));
            return add(y, detail::adapter_branch(y, m, cfg, train, rng));
        }
        case AdapterPosition::parallel: {
            // out = FFN(x) + A(x) + x.
            auto y = add(x, apply_stochastic_depth(ffn_of(x), sd_rate, train, rng));
            return add(y, detail::adapter_branch(x, m, cfg, train, rng));
        }
        case AdapterPosition::intermediate: {
            // f = FFN(x); out = A(f) + f + x, one FFN evaluation.
            auto f = ffn_of(x);
            auto y = add(x, apply_stochastic_depth(f, sd_rate, train, rng));
            return add(y, detail::adapter_branch(f, m, cfg, train, rng));
        }
        case AdapterPosition::intermediate_noskip: {
            // Degenerate diagnostic variant: out = A(FFN(x)) + x. The FFN
            // reaches the trunk only through the adapter.
            auto f = ffn_of(x);
            return add(x, detail::adapter_branch(f, m, cfg, train, rng));
        }
    }
    throw ConfigError("wire_position: unknown adapter position");
}

/// A frozen(able) ViT with optional adapters and a trainable classifier.
/// With no placement spec it behaves exactly like the plain backbone, which
/// covers the linear-probe and full fine-tuning modes.
template <typename T>
class AdaptedViT {
  public:
    using scalar_type = T;

    /// Takes ownership of a backbone (typically loaded from a pretrained
    /// checkpoint) and attaches freshly initialized adapters.
    AdaptedViT(VisionTransformer<T> backbone, std::optional<PlacementSpec> placement, Rng& rng)
        : backbone_(std::move(backbone)), placement_(std::move(placement)) {
        if (!placement_) return;
        placement_->config.validate();
        const int d = backbone_.config().hidden_dim;
        const int n_layers = backbone_.config().num_layers;
        for (int i = 0; i < n_layers; ++i) {
            ffn_adapters_.push_back(init_adapter<T>(placement_->config, d, rng,
                                                    "adapters.ffn." + std::to_string(i) + "."));
        }
        if (placement_->adapt_attention) {
            for (int i = 0; i < n_layers; ++i) {
                attn_adapters_.push_back(init_adapter<T>(
                    placement_->config, d, rng, "adapters.attn." + std::to_string(i) + "."));
            }
        }
        if (placement_->tune_backbone_ln) {
            for (auto* p : backbone_.parameters()) {
                if (p->name.find(".ln1.") != std::string::npos ||
                    p->name.find(".ln2.") != std::string::npos ||
                    p->name.find("final_ln.") != std::string::npos) {
                    p->set_trainable(true);
                }
            }
        }
    }

    AdaptedViT(const AdaptedViT&) = delete;
    AdaptedViT& operator=(const AdaptedViT&) = delete;
    AdaptedViT(AdaptedViT&&) = default;
    AdaptedViT& operator=(AdaptedViT&&) = default;

    Tensor<T> forward(const Tensor<T>& images, bool train_mode, Rng& rng) const {
        if (!placement_) return backbone_.forward(images, train_mode, rng);
        const auto& cfg = backbone_.config();
        const AdapterConfig& acfg = placement_->config;
        auto x = backbone_.embed(images.rank() == 3 ? unsqueeze0(images) : images);
        for (std::size_t i = 0; i < backbone_.layers.size(); ++i) {
            const auto& L = backbone_.layers[i];
            const double rate =
                stochastic_depth_rate(L.layer_index, cfg.num_layers, cfg.drop_path_max);
            auto attn = attention_forward(
                layer_norm(x, L.ln1.gamma.tensor, L.ln1.beta.tensor), L, cfg.num_heads);
            auto h = add(x, apply_stochastic_depth(attn, rate, train_mode, rng));
            if (!attn_adapters_.empty()) {
                // Intermediate wiring mirrored onto the attention sublayer.
                h = add(h, detail::adapter_branch(attn, attn_adapters_[i], acfg, train_mode, rng));
            }
            x = wire_position(h, L, cfg.num_heads, ffn_adapters_[i], acfg, rate, train_mode, rng);
        }
        return backbone_.classify(x);
    }

    std::vector<Parameter<T>*> parameters() {
        auto out = backbone_.parameters();
        for (auto& a : ffn_adapters_) {
            for (auto* p : a.parameters()) out.push_back(p);
        }
        for (auto& a : attn_adapters_) {
            for (auto* p : a.parameters()) out.push_back(p);
        }
        return out;
    }

    std::vector<const Parameter<T>*> parameters() const {
        auto mut = const_cast<AdaptedViT*>(this)->parameters();
        return {mut.begin(), mut.end()};
    }

    void zero_grad() {
        for (auto* p : parameters()) {
            if (p->trainable) p->tensor.zero_grad();
        }
    }

    VisionTransformer<T>& backbone() { return backbone_; }
    const VisionTransformer<T>& backbone() const { return backbone_; }
    const std::optional<PlacementSpec>& placement() const { return placement_; }
    std::vector<AdapterModule<T>>& ffn_adapters() { return ffn_adapters_; }
    std::vector<AdapterModule<T>>& attn_adapters() { return attn_adapters_; }

  private:
    VisionTransformer<T> backbone_;
    std::optional<PlacementSpec> placement_;
    std::vector<AdapterModule<T>> ffn_adapters_;
    std::vector<AdapterModule<T>> attn_adapters_;
};

}  // namespace peft
