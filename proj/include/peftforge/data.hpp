#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "peftforge/tensor.hpp"

namespace peft {

/// Per-channel input standardization constants.
struct NormalizationSpec {
    std::array<double, 3> mean{0.5, 0.5, 0.5};
    std::array<double, 3> std{0.5, 0.5, 0.5};
    std::string name = "inception";

    /// "imagenet", "inception"; anything else throws.
    static NormalizationSpec preset(const std::string& name);
};

/// Train-time augmentation policies: VTAB-style resize only, FGVC-style
/// random resized crop plus horizontal flip.
struct AugmentationSpec {
    enum class Policy { vtab_resize, fgvc_crop_flip };
    Policy policy = Policy::vtab_resize;
    int target_size = 32;

    static Policy policy_from_string(const std::string& s);
    static std::string policy_to_string(Policy p);
};

template <typename T>
struct Sample {
    Tensor<T> image;  // [3, H, W], values in [0, 1]
    int label = 0;
};

template <typename T>
struct Dataset {
    std::vector<Sample<T>> samples;
    int class_count = 0;
    std::string split;  // train / val / test

    std::size_t size() const { return samples.size(); }

    void validate() const {
        for (const auto& s : samples) {
            if (s.label < 0 || s.label >= class_count) {
                throw ContractError("dataset '" + split + "' has label " +
                                    std::to_string(s.label) + " outside [0, " +
                                    std::to_string(class_count) + ")");
            }
        }
    }
};

template <typename T>
struct DataBundle {
    Dataset<T> train, val, test;
    int class_count = 0;
};

// ---------------------------------------------------------------------------
// Image transforms (plain data ops, no autodiff)
// ---------------------------------------------------------------------------

/// (x - mean_c) / std_c per channel.
template <typename T>
Tensor<T> normalize_image(const Tensor<T>& img, const NormalizationSpec& spec) {
    if (img.rank() != 3 || img.dim(0) != 3) {
        throw ShapeError("normalize_image expects [3, H, W], got " + shape_str(img.shape()));
    }
    const std::int64_t plane = static_cast<std::int64_t>(img.dim(1)) * img.dim(2);
    std::vector<T> out(img.data().size());
    const T* src = img.data().data();
    for (int c = 0; c < 3; ++c) {
        const T m = static_cast<T>(spec.mean[static_cast<std::size_t>(c)]);
        const T inv = static_cast<T>(1.0 / spec.std[static_cast<std::size_t>(c)]);
        for (std::int64_t i = 0; i < plane; ++i) {
            out[static_cast<std::size_t>(c * plane + i)] = (src[c * plane + i] - m) * inv;
        }
    }
    return Tensor<T>::from_data(img.shape(), std::move(out));
}

/// Bilinear resize to target x target.
template <typename T>
Tensor<T> resize(const Tensor<T>& img, int target) {
    if (img.rank() != 3 || img.dim(0) != 3) {
        throw ShapeError("resize expects [3, H, W], got " + shape_str(img.shape()));
    }
    if (target <= 0) throw ContractError("resize: target size must be positive");
    const int H = img.dim(1), W = img.dim(2);
    if (H == target && W == target) return img.clone_detached();
    std::vector<T> out(static_cast<std::size_t>(3) * target * target);
    const T* src = img.data().data();
    const double sy = static_cast<double>(H) / target;
    const double sx = static_cast<double>(W) / target;
    for (int y = 0; y < target; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::max(0.0, std::min(fy, static_cast<double>(H - 1)));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, H - 1);
        const double wy = fy - y0;
        for (int x = 0; x < target; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::max(0.0, std::min(fx, static_cast<double>(W - 1)));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, W - 1);
            const double wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const T* plane = src + static_cast<std::int64_t>(c) * H * W;
                const double v = (1 - wy) * ((1 - wx) * plane[y0 * W + x0] + wx * plane[y0 * W + x1]) +
                                 wy * ((1 - wx) * plane[y1 * W + x0] + wx * plane[y1 * W + x1]);
                out[static_cast<std::size_t>((c * target + y) * target + x)] = static_cast<T>(v);
            }
        }
    }
    return Tensor<T>::from_data({3, target, target}, std::move(out));
}

/// Crop the given window and resize it to target x target.
template <typename T>
Tensor<T> resized_crop(const Tensor<T>& img, int top, int left, int height, int width,
                       int target) {
    const int H = img.dim(1), W = img.dim(2);
    if (top < 0 || left < 0 || height <= 0 || width <= 0 || top + height > H || left + width > W) {
        throw ContractError("resized_crop: window out of bounds");
    }
    std::vector<T> crop(static_cast<std::size_t>(3) * height * width);
    const T* src = img.data().data();
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < height; ++y) {
            const T* row = src + (static_cast<std::int64_t>(c) * H + top + y) * W + left;
            std::copy(row, row + width, crop.data() + (static_cast<std::int64_t>(c) * height + y) * width);
        }
    }
    return resize(Tensor<T>::from_data({3, height, width}, std::move(crop)), target);
}

/// Random resized crop: area fraction in [0.08, 1], aspect ratio in
/// [3/4, 4/3] (log-uniform), ten attempts, then a max-size center fallback.
template <typename T>
Tensor<T> random_resized_crop(const Tensor<T>& img, int target, Rng& rng) {
    const int H = img.dim(1), W = img.dim(2);
    const double area = static_cast<double>(H) * W;
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target_area = area * rng.uniform(0.08, 1.0);
        const double aspect = std::exp(rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0)));
        const int w = static_cast<int>(std::lround(std::sqrt(target_area * aspect)));
        const int h = static_cast<int>(std::lround(std::sqrt(target_area / aspect)));
        if (w > 0 && h > 0 && w <= W && h <= H) {
            const int top = static_cast<int>(rng.uniform() * (H - h + 1));
            const int left = static_cast<int>(rng.uniform() * (W - w + 1));
            return resized_crop(img, top, left, h, w, target);
        }
    }
    const int side = std::min(H, W);
    return resized_crop(img, (H - side) / 2, (W - side) / 2, side, side, target);
}

/// Mirror along the width axis.
template <typename T>
Tensor<T> horizontal_flip(const Tensor<T>& img) {
    const int H = img.dim(1), W = img.dim(2);
    std::vector<T> out(img.data().size());
    const T* src = img.data().data();
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < H; ++y) {
            const T* row = src + (static_cast<std::int64_t>(c) * H + y) * W;
            T* orow = out.data() + (static_cast<std::int64_t>(c) * H + y) * W;
            for (int x = 0; x < W; ++x) orow[x] = row[W - 1 - x];
        }
    }
    return Tensor<T>::from_data(img.shape(), std::move(out));
}

template <typename T>
Tensor<T> maybe_flip(const Tensor<T>& img, Rng& rng, double p = 0.5) {
    return rng.bernoulli(p) ? horizontal_flip(img) : img;
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

/// Turns dataset samples into normalized model input. Augmentation applies
/// only on the train path; eval batches are resize + normalize.
template <typename T>
struct InputPipeline {
    AugmentationSpec aug;
    NormalizationSpec norm;

    Tensor<T> prepare_train(const Sample<T>& s, Rng& rng) const {
        Tensor<T> img = s.image;
        if (aug.policy == AugmentationSpec::Policy::fgvc_crop_flip) {
            img = random_resized_crop(img, aug.target_size, rng);
            img = maybe_flip(img, rng);
        } else if (img.dim(1) != aug.target_size || img.dim(2) != aug.target_size) {
            img = resize(img, aug.target_size);
        }
        return normalize_image(img, norm);
    }

    Tensor<T> prepare_eval(const Sample<T>& s) const {
        Tensor<T> img = s.image;
        if (img.dim(1) != aug.target_size || img.dim(2) != aug.target_size) {
            img = resize(img, aug.target_size);
        }
        return normalize_image(img, norm);
    }
};

/// Stacks prepared [3, H, W] images into one [b, 3, H, W] batch tensor.
template <typename T>
Tensor<T> stack_images(const std::vector<Tensor<T>>& images) {
    if (images.empty()) throw ContractError("stack_images: empty batch");
    const Shape& s = images.front().shape();
    Shape out_shape = {static_cast<int>(images.size()), s[0], s[1], s[2]};
    std::vector<T> out;
    out.reserve(static_cast<std::size_t>(shape_numel(out_shape)));
    for (const auto& img : images) {
        if (img.shape() != s) throw ShapeError("stack_images: mixed image shapes in batch");
        out.insert(out.end(), img.data().begin(), img.data().end());
    }
    return Tensor<T>::from_data(std::move(out_shape), std::move(out));
}

// ---------------------------------------------------------------------------
// Synthetic transfer tasks
// ---------------------------------------------------------------------------

/// Controlled source -> target distribution shift for the synthetic family.
enum class ShiftKind { none, color_remap, rotate, texture };

ShiftKind shift_from_string(const std::string& s);
std::string to_string(ShiftKind k);

/// Class-conditional pattern images: an oriented sinusoidal grating in a
/// class color plus a colored Gaussian blob at a random position, with
/// pixel noise. The target domain applies the requested shift to the
/// generating parameters, so transfer is nontrivial but learnable.
template <typename T>
struct SynthTaskParams {
    int classes = 5;
    int image_size = 32;
    double noise = 0.04;
    ShiftKind shift = ShiftKind::none;  // applied to the target domain only
};

namespace detail {

inline std::array<double, 3> hue_color(double h) {
    // Simple saturated hue wheel, h in [0, 1).
    const double x = h * 6.0;
    const int k = static_cast<int>(x) % 6;
    const double f = x - std::floor(x);
    switch (k) {
        case 0: return {1.0, f, 0.25};
        case 1: return {1.0 - f, 1.0, 0.25};
        case 2: return {0.25, 1.0, f};
        case 3: return {0.25, 1.0 - f, 1.0};
        case 4: return {f, 0.25, 1.0};
        default: return {1.0, 0.25, 1.0 - f};
    }
}

struct SynthDomain {
    double rotation_offset = 0.0;
    double frequency_base = 2.0;
    std::array<int, 3> channel_perm{0, 1, 2};
};

inline SynthDomain shifted_domain(ShiftKind shift) {
    SynthDomain d;
    switch (shift) {
        case ShiftKind::none: break;
        case ShiftKind::color_remap: d.channel_perm = {1, 2, 0}; break;
        case ShiftKind::rotate: d.rotation_offset = 3.14159265358979323846 / 6.0; break;
        case ShiftKind::texture: d.frequency_base = 4.5; break;
    }
    return d;
}

}  // namespace detail

template <typename T>
Sample<T> synth_sample(const SynthTaskParams<T>& p, const detail::SynthDomain& dom, int label,
                       Rng& rng) {
    const int S = p.image_size;
    const double theta = 3.14159265358979323846 * (label + 0.5) / p.classes + dom.rotation_offset +
                         rng.uniform(-0.06, 0.06);
    const double freq = dom.frequency_base + static_cast<double>(label % 3);
    const double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    auto base = detail::hue_color(static_cast<double>(label) / p.classes);
    auto blob = detail::hue_color(std::fmod(static_cast<double>(label) / p.classes + 0.37, 1.0));
    std::array<double, 3> color{}, blob_color{};
    for (int c = 0; c < 3; ++c) {
        color[static_cast<std::size_t>(c)] = base[static_cast<std::size_t>(dom.channel_perm[static_cast<std::size_t>(c)])];
        blob_color[static_cast<std::size_t>(c)] = blob[static_cast<std::size_t>(dom.channel_perm[static_cast<std::size_t>(c)])];
    }
    const double cx = rng.uniform(0.25, 0.75) * S;
    const double cy = rng.uniform(0.25, 0.75) * S;
    const double sigma = 0.11 * S;
    const double ct = std::cos(theta), st = std::sin(theta);

    std::vector<T> pix(static_cast<std::size_t>(3) * S * S);
    for (int y = 0; y < S; ++y) {
        for (int x = 0; x < S; ++x) {
            const double u = static_cast<double>(x) / S;
            const double v = static_cast<double>(y) / S;
            const double g =
                0.5 + 0.5 * std::sin(2.0 * 3.14159265358979323846 * freq * (u * ct + v * st) + phase);
            const double dx = x - cx, dy = y - cy;
            const double b = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            for (int c = 0; c < 3; ++c) {
                double val = 0.12 + 0.5 * color[static_cast<std::size_t>(c)] * g +
                             0.45 * blob_color[static_cast<std::size_t>(c)] * b +
                             rng.uniform(-p.noise, p.noise);
                val = std::max(0.0, std::min(1.0, val));
                pix[static_cast<std::size_t>((c * S + y) * S + x)] = static_cast<T>(val);
            }
        }
    }
    return Sample<T>{Tensor<T>::from_data({3, S, S}, std::move(pix)), label};
}

template <typename T>
Dataset<T> synth_split(const SynthTaskParams<T>& p, const detail::SynthDomain& dom, int count,
                       const std::string& split, Rng& rng) {
    Dataset<T> ds;
    ds.class_count = p.classes;
    ds.split = split;
    ds.samples.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        ds.samples.push_back(synth_sample(p, dom, i % p.classes, rng));
    }
    return ds;
}

/// Generates a (source, target) pair of class-matched synthetic tasks. The
/// source plays the role of the pretraining corpus; the target is the same
/// generative family under the configured shift. Splits are drawn from
/// disjoint generator streams. Defaults mirror the 800/200 train/val
/// convention of the low-data transfer benchmark.
template <typename T>
std::pair<DataBundle<T>, DataBundle<T>> synth_transfer_pair(Rng& rng, int classes,
                                                            int n_train = 800, int n_val = 200,
                                                            int n_test = 200,
                                                            ShiftKind shift = ShiftKind::rotate,
                                                            int image_size = 32) {
    if (classes < 2) throw ContractError("synth_transfer_pair: need at least 2 classes");
    SynthTaskParams<T> p;
    p.classes = classes;
    p.image_size = image_size;
    p.shift = shift;
    const detail::SynthDomain source_dom;  // canonical domain
    const detail::SynthDomain target_dom = detail::shifted_domain(shift);

    DataBundle<T> source, target;
    source.class_count = target.class_count = classes;
    Rng src_rng = rng.child(0x5eed5001);
    Rng tgt_rng = rng.child(0x5eed5002);
    {
        Rng r1 = src_rng.child(1), r2 = src_rng.child(2), r3 = src_rng.child(3);
        source.train = synth_split(p, source_dom, n_train, "train", r1);
        source.val = synth_split(p, source_dom, n_val, "val", r2);
        source.test = synth_split(p, source_dom, n_test, "test", r3);
    }
    {
        Rng r1 = tgt_rng.child(1), r2 = tgt_rng.child(2), r3 = tgt_rng.child(3);
        target.train = synth_split(p, target_dom, n_train, "train", r1);
        target.val = synth_split(p, target_dom, n_val, "val", r2);
        target.test = synth_split(p, target_dom, n_test, "test", r3);
    }
    return {std::move(source), std::move(target)};
}

// ---------------------------------------------------------------------------
// Image-folder ingestion (one subdirectory per class, binary PPM images)
// ---------------------------------------------------------------------------

struct FolderLoadReport {
    std::vector<std::string> warnings;  // e.g. empty class directories
    std::vector<std::string> class_names;
};

/// Decodes an 8-bit binary PPM (P6) into [0, 1] floats, channel-major.
std::vector<double> decode_ppm(const std::string& path, int& height, int& width);

/// Lists class subdirectories (alphabetical -> class index) and their files.
std::vector<std::pair<std::string, std::vector<std::string>>> list_image_folder(
    const std::string& root);

template <typename T>
Dataset<T> load_image_folder(const std::string& root, FolderLoadReport* report = nullptr) {
    Dataset<T> ds;
    ds.split = "folder";
    auto classes = list_image_folder(root);
    ds.class_count = static_cast<int>(classes.size());
    std::vector<std::string> errors;
    for (int label = 0; label < static_cast<int>(classes.size()); ++label) {
        const auto& [cls, files] = classes[static_cast<std::size_t>(label)];
        if (report) report->class_names.push_back(cls);
        if (files.empty()) {
            if (report) report->warnings.push_back("class directory '" + cls + "' is empty");
            continue;
        }
        for (const auto& path : files) {
            try {
                int h = 0, w = 0;
                auto pix = decode_ppm(path, h, w);
                std::vector<T> data(pix.size());
                for (std::size_t i = 0; i < pix.size(); ++i) data[i] = static_cast<T>(pix[i]);
                ds.samples.push_back(
                    Sample<T>{Tensor<T>::from_data({3, h, w}, std::move(data)), label});
            } catch (const std::exception& e) {
                errors.push_back(path + ": " + e.what());
            }
        }
    }
    if (!errors.empty()) {
        std::string msg = "failed to ingest " + std::to_string(errors.size()) + " file(s):";
        for (const auto& e : errors) msg += "\n  " + e;
        throw IoError(msg);
    }
    return ds;
}

}  // namespace peft
