#pragma once

#include <string>
#include <vector>

#include "peftforge/tensor.hpp"

namespace peft {

/// Backbone hyperparameters. The desk-scale default fits a CPU run;
/// d must divide evenly into heads and the image into patches.
struct BackboneConfig {
    int image_size = 32;
    int patch_size = 8;
    int hidden_dim = 64;
    int num_layers = 4;
    int num_heads = 4;
    int ffn_expansion = 4;
    double drop_path_max = 0.1;

    void validate() const;

    int patches_per_side() const { return image_size / patch_size; }
    int num_patches() const { return patches_per_side() * patches_per_side(); }
    int token_count() const { return num_patches() + 1; }  // + CLS
    int head_dim() const { return hidden_dim / num_heads; }
    int ffn_dim() const { return hidden_dim * ffn_expansion; }
    int patch_dim() const { return 3 * patch_size * patch_size; }

    bool operator==(const BackboneConfig&) const = default;
};

/// Linearly increasing drop rate over depth: max_rate * i / (N - 1).
/// By convention the rate is 0 when there are fewer than two layers.
double stochastic_depth_rate(int layer_index, int num_layers, double max_rate);

/// A named, optionally trainable weight block. `trainable` mirrors the
/// tensor's requires_grad flag; the optimizer only ever sees trainable ones.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;

    void set_trainable(bool value) {
        trainable = value;
        tensor.set_requires_grad(value);
    }
};

template <typename T>
struct LayerNormPair {
    Parameter<T> gamma, beta;
};

template <typename T>
struct TransformerLayer {
    Parameter<T> wq, bq, wk, bk, wv, bv, wo, bo;
    LayerNormPair<T> ln1, ln2;
    Parameter<T> w1, b1, w2, b2;
    int layer_index = 0;
};

/// Residual-branch drop with survivor rescaling. One Bernoulli draw per
/// sample (leading dimension) in train mode; identity in eval mode. The
/// rate-0 and eval paths return the input tensor unchanged so comparisons
/// stay bit-exact.
template <typename T>
Tensor<T> apply_stochastic_depth(const Tensor<T>& branch, double rate, bool train_mode, Rng& rng) {
    if (rate < 0.0 || rate > 1.0) {
        throw ContractError("apply_stochastic_depth: rate must be in [0, 1]");
    }
    if (!train_mode || rate == 0.0) return branch;
    const int b = branch.dim(0);
    std::vector<T> factors(static_cast<std::size_t>(b));
    const T survivor = rate < 1.0 ? static_cast<T>(1.0 / (1.0 - rate)) : T(0);
    for (int i = 0; i < b; ++i) {
        factors[static_cast<std::size_t>(i)] = rng.bernoulli(rate) ? T(0) : survivor;
    }
    return scale_rows(branch, factors);
}

/// Per-head Softmax(Q K^T / sqrt(d')) V with concatenated heads and output
/// projection. Accepts [b, n, d] or a single sequence [n, d].
template <typename T>
Tensor<T> attention_forward(const Tensor<T>& x, const TransformerLayer<T>& layer, int num_heads) {
    if (x.rank() == 2) return squeeze0(attention_forward(unsqueeze0(x), layer, num_heads));
    const int d = x.dim(2);
    const int dh = d / num_heads;
    auto q = heads_split(add(matmul(x, layer.wq.tensor), layer.bq.tensor), num_heads);
    auto k = heads_split(add(matmul(x, layer.wk.tensor), layer.bk.tensor), num_heads);
    auto v = heads_split(add(matmul(x, layer.wv.tensor), layer.bv.tensor), num_heads);
    auto scores = scale_const(bmm(q, transpose_last2(k)), static_cast<T>(1.0 / std::sqrt(double(dh))));
    auto ctx = heads_merge(bmm(softmax_lastdim(scores), v), num_heads);
    return add(matmul(ctx, layer.wo.tensor), layer.bo.tensor);
}

/// GELU(x W1 + b1) W2 + b2.
template <typename T>
Tensor<T> ffn_forward(const Tensor<T>& x, const TransformerLayer<T>& layer) {
    return add(matmul(gelu(add(matmul(x, layer.w1.tensor), layer.b1.tensor)), layer.w2.tensor),
               layer.b2.tensor);
}

/// Pre-norm transformer layer: x += Attention(LN(x)); x += FFN(LN(x)),
/// each residual branch subject to stochastic depth in train mode.
template <typename T>
Tensor<T> layer_forward(const Tensor<T>& x, const TransformerLayer<T>& layer, int num_heads,
                        double sd_rate, bool train_mode, Rng& rng) {
    auto attn = attention_forward(layer_norm(x, layer.ln1.gamma.tensor, layer.ln1.beta.tensor),
                                  layer, num_heads);
    auto h = add(x, apply_stochastic_depth(attn, sd_rate, train_mode, rng));
    auto ffn = ffn_forward(layer_norm(h, layer.ln2.gamma.tensor, layer.ln2.beta.tensor), layer);
    return add(h, apply_stochastic_depth(ffn, sd_rate, train_mode, rng));
}

/// ViT backbone with a linear classifier head. Parameters carry hierarchical
/// names ("backbone.layers.3.attn.wq", "head.weight", ...); everything under
/// "backbone." can be frozen as a unit.
template <typename T>
class VisionTransformer {
  public:
    using scalar_type = T;

    VisionTransformer(const BackboneConfig& cfg, int num_classes, Rng& rng)
        : cfg_(cfg), num_classes_(num_classes) {
        cfg_.validate();
        if (num_classes < 2) throw ConfigError("model needs at least 2 classes");
        const int d = cfg_.hidden_dim;
        auto trunc = [&rng](Shape shape) {
            return sample_truncated_normal<T>(rng, 0.02, 0.04, std::move(shape), true);
        };
        auto param = [](std::string name, Tensor<T> t) {
            return Parameter<T>{std::move(name), std::move(t), true};
        };
        patch_weight = param("backbone.patch.weight", trunc({cfg_.patch_dim(), d}));
        patch_bias = param("backbone.patch.bias", Tensor<T>::zeros({d}, true));
        cls_token = param("backbone.cls", Tensor<T>::zeros({d}, true));
        pos_embed = param("backbone.pos", trunc({cfg_.token_count(), d}));
        layers.reserve(static_cast<std::size_t>(cfg_.num_layers));
        for (int i = 0; i < cfg_.num_layers; ++i) {
            const std::string p = "backbone.layers." + std::to_string(i) + ".";
            TransformerLayer<T> L;
            L.layer_index = i;
            L.wq = param(p + "attn.wq", trunc({d, d}));
            L.bq = param(p + "attn.bq", Tensor<T>::zeros({d}, true));
            L.wk = param(p + "attn.wk", trunc({d, d}));
            L.bk = param(p + "attn.bk", Tensor<T>::zeros({d}, true));
            L.wv = param(p + "attn.wv", trunc({d, d}));
            L.bv = param(p + "attn.bv", Tensor<T>::zeros({d}, true));
            L.wo = param(p + "attn.wo", trunc({d, d}));
            L.bo = param(p + "attn.bo", Tensor<T>::zeros({d}, true));
            L.ln1.gamma = param(p + "ln1.gamma", Tensor<T>::filled({d}, T(1), true));
            L.ln1.beta = param(p + "ln1.beta", Tensor<T>::zeros({d}, true));
            L.ln2.gamma = param(p + "ln2.gamma", Tensor<T>::filled({d}, T(1), true));
            L.ln2.beta = param(p + "ln2.beta", Tensor<T>::zeros({d}, true));
            L.w1 = param(p + "ffn.w1", trunc({d, cfg_.ffn_dim()}));
            L.b1 = param(p + "ffn.b1", Tensor<T>::zeros({cfg_.ffn_dim()}, true));
            L.w2 = param(p + "ffn.w2", trunc({cfg_.ffn_dim(), d}));
            L.b2 = param(p + "ffn.b2", Tensor<T>::zeros({d}, true));
            layers.push_back(std::move(L));
        }
        final_ln.gamma = param("backbone.final_ln.gamma", Tensor<T>::filled({d}, T(1), true));
        final_ln.beta = param("backbone.final_ln.beta", Tensor<T>::zeros({d}, true));
        head_weight = param("head.weight",
                            sample_truncated_normal<T>(rng, 0.01, 0.02, {d, num_classes}, true));
        head_bias = param("head.bias", Tensor<T>::zeros({num_classes}, true));
    }

    VisionTransformer(const VisionTransformer&) = delete;
    VisionTransformer& operator=(const VisionTransformer&) = delete;
    VisionTransformer(VisionTransformer&&) = default;
    VisionTransformer& operator=(VisionTransformer&&) = default;

    /// Flattened patches -> linear projection -> CLS prepended -> positional
    /// encoding added. Accepts [b, 3, H, W] or a single [3, H, W] image.
    Tensor<T> embed(const Tensor<T>& images) const {
        if (images.rank() == 3) return squeeze0(embed(unsqueeze0(images)));
        if (images.rank() != 4 || images.dim(2) != cfg_.image_size ||
            images.dim(3) != cfg_.image_size) {
            throw ShapeError("embed: expected images of size " + std::to_string(cfg_.image_size) +
                             ", got " + shape_str(images.shape()));
        }
        auto tokens = add(matmul(extract_patches(images, cfg_.patch_size), patch_weight.tensor),
                          patch_bias.tensor);
        return add(prepend_token(tokens, cls_token.tensor), pos_embed.tensor);
    }

    /// Logits [b, c] for a batch of images.
    Tensor<T> forward(const Tensor<T>& images, bool train_mode, Rng& rng) const {
        auto x = embed(images.rank() == 3 ? unsqueeze0(images) : images);
        for (const auto& L : layers) {
            const double rate =
                stochastic_depth_rate(L.layer_index, cfg_.num_layers, cfg_.drop_path_max);
            x = layer_forward(x, L, cfg_.num_heads, rate, train_mode, rng);
        }
        return classify(x);
    }

    /// Final LN + CLS selection + linear head, shared with adapted models.
    Tensor<T> classify(const Tensor<T>& tokens) const {
        auto normed = layer_norm(tokens, final_ln.gamma.tensor, final_ln.beta.tensor);
        return add(matmul(select_token(normed, 0), head_weight.tensor), head_bias.tensor);
    }

    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        out.push_back(&patch_weight);
        out.push_back(&patch_bias);
        out.push_back(&cls_token);
        out.push_back(&pos_embed);
        for (auto& L : layers) {
            for (Parameter<T>* p :
                 {&L.wq, &L.bq, &L.wk, &L.bk, &L.wv, &L.bv, &L.wo, &L.bo, &L.ln1.gamma,
                  &L.ln1.beta, &L.ln2.gamma, &L.ln2.beta, &L.w1, &L.b1, &L.w2, &L.b2}) {
                out.push_back(p);
            }
        }
        out.push_back(&final_ln.gamma);
        out.push_back(&final_ln.beta);
        out.push_back(&head_weight);
        out.push_back(&head_bias);
        return out;
    }

    std::vector<const Parameter<T>*> parameters() const {
        auto mut = const_cast<VisionTransformer*>(this)->parameters();
        return {mut.begin(), mut.end()};
    }

    void zero_grad() {
        for (auto* p : parameters()) {
            if (p->trainable) p->tensor.zero_grad();
        }
    }

    /// Fresh model with identical weights and flags, sharing no storage.
    VisionTransformer clone() const {
        Rng throwaway(0);
        VisionTransformer copy(cfg_, num_classes_, throwaway);
        auto src = parameters();
        auto dst = copy.parameters();
        for (std::size_t i = 0; i < src.size(); ++i) {
            dst[i]->tensor.data() = src[i]->tensor.data();
            dst[i]->set_trainable(src[i]->trainable);
        }
        return copy;
    }

    const BackboneConfig& config() const { return cfg_; }
    int num_classes() const { return num_classes_; }

    Parameter<T> patch_weight, patch_bias, cls_token, pos_embed;
    std::vector<TransformerLayer<T>> layers;
    LayerNormPair<T> final_ln;
    Parameter<T> head_weight, head_bias;

  private:
    BackboneConfig cfg_;
    int num_classes_ = 0;
};

/// Marks every "backbone.*" parameter frozen. Classifier and any attached
/// adapters are untouched.
template <typename Model>
void freeze_backbone(Model& model) {
    for (auto* p : model.parameters()) {
        if (p->name.rfind("backbone.", 0) == 0) p->set_trainable(false);
    }
}

}  // namespace peft
