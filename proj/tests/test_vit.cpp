#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "peftforge/checkpoint.hpp"
#include "peftforge/gradcheck.hpp"
#include "peftforge/vit.hpp"
#include "test_util.hpp"

using namespace peft;
using testutil::bit_equal;
using testutil::rand_tensor;

namespace {

BackboneConfig toy_config() {
    BackboneConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 8;
    cfg.hidden_dim = 16;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.ffn_expansion = 2;
    cfg.drop_path_max = 0.1;
    return cfg;
}

}  // namespace

TEST_SUITE_BEGIN("vit");

TEST_CASE("config validation and derived shapes") {
    auto cfg = toy_config();
    cfg.validate();
    CHECK(cfg.token_count() == 5);  // 4 patches + CLS
    CHECK(cfg.head_dim() == 8);
    cfg.patch_size = 7;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = toy_config();
    cfg.num_heads = 3;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("patch embedding: token count, zero image, determinism") {
    Rng rng(1);
    VisionTransformer<double> model(toy_config(), 3, rng);
    auto zero_img = Tensor<double>::zeros({3, 16, 16});
    // zero the projection bias and CLS so tokens reduce to the positional encoding
    std::fill(model.patch_bias.tensor.data().begin(), model.patch_bias.tensor.data().end(), 0.0);
    auto tokens = model.embed(zero_img);
    REQUIRE(tokens.shape() == Shape{5, 16});
    for (int t = 1; t < 5; ++t) {
        for (int j = 0; j < 16; ++j) {
            CHECK(tokens.data()[t * 16 + j] == model.pos_embed.tensor.data()[t * 16 + j]);
        }
    }
    Rng rng2(2);
    auto img = rand_tensor<double>(rng2, {3, 16, 16}, false, 0, 1);
    CHECK(bit_equal(model.embed(img), model.embed(img)));
}

TEST_CASE("attention with one token reduces to O(V(x))") {
    Rng rng(3);
    VisionTransformer<double> model(toy_config(), 3, rng);
    const auto& L = model.layers[0];
    auto x = rand_tensor<double>(rng, {1, 16});
    auto out = attention_forward(x, L, 2);
    auto v = add(matmul(x, L.wv.tensor), L.bv.tensor);
    auto expect = add(matmul(v, L.wo.tensor), L.bo.tensor);
    for (int j = 0; j < 16; ++j) {
        CHECK(out.data()[j] == doctest::Approx(expect.data()[j]).epsilon(1e-12));
    }
}

TEST_CASE("attention maps identical tokens to identical rows") {
    Rng rng(4);
    VisionTransformer<double> model(toy_config(), 3, rng);
    auto row = rand_tensor<double>(rng, {16});
    std::vector<double> data;
    data.insert(data.end(), row.data().begin(), row.data().end());
    data.insert(data.end(), row.data().begin(), row.data().end());
    auto x = Tensor<double>::from_data({2, 16}, data);
    auto out = attention_forward(x, model.layers[0], 2);
    for (int j = 0; j < 16; ++j) {
        CHECK(out.data()[j] == doctest::Approx(out.data()[16 + j]).epsilon(1e-12));
    }
}

TEST_CASE("attention agrees with a naive hand computation (M=1, d=2, n=2)") {
    // independent oracle: plain double loops, no library code
    const double wq[2][2] = {{0.3, -0.1}, {0.7, 0.2}};
    const double wk[2][2] = {{-0.5, 0.4}, {0.1, 0.6}};
    const double wv[2][2] = {{0.9, 0.05}, {-0.2, 0.8}};
    const double wo[2][2] = {{0.6, -0.3}, {0.25, 1.1}};
    const double bq[2] = {0.01, -0.02}, bk[2] = {0.03, 0.0}, bv[2] = {-0.05, 0.06},
                 bo[2] = {0.1, -0.1};
    const double x[2][2] = {{0.5, -1.2}, {0.8, 0.3}};

    double q[2][2], k[2][2], v[2][2];
    for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
            q[i][j] = bq[j];
            k[i][j] = bk[j];
            v[i][j] = bv[j];
            for (int t = 0; t < 2; ++t) {
                q[i][j] += x[i][t] * wq[t][j];
                k[i][j] += x[i][t] * wk[t][j];
                v[i][j] += x[i][t] * wv[t][j];
            }
        }
    }
    double expect[2][2];
    for (int i = 0; i < 2; ++i) {
        double s0 = (q[i][0] * k[0][0] + q[i][1] * k[0][1]) / std::sqrt(2.0);
        double s1 = (q[i][0] * k[1][0] + q[i][1] * k[1][1]) / std::sqrt(2.0);
        const double m = std::max(s0, s1);
        const double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
        const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
        double ctx[2] = {a0 * v[0][0] + a1 * v[1][0], a0 * v[0][1] + a1 * v[1][1]};
        for (int j = 0; j < 2; ++j) {
            expect[i][j] = bo[j] + ctx[0] * wo[0][j] + ctx[1] * wo[1][j];
        }
    }

    BackboneConfig cfg = toy_config();
    cfg.hidden_dim = 2;
    cfg.num_heads = 1;
    Rng rng(5);
    VisionTransformer<double> model(cfg, 2, rng);
    auto& L = model.layers[0];
    auto put = [](Parameter<double>& p, std::vector<double> v) { p.tensor.data() = std::move(v); };
    put(L.wq, {wq[0][0], wq[0][1], wq[1][0], wq[1][1]});
    put(L.wk, {wk[0][0], wk[0][1], wk[1][0], wk[1][1]});
    put(L.wv, {wv[0][0], wv[0][1], wv[1][0], wv[1][1]});
    put(L.wo, {wo[0][0], wo[0][1], wo[1][0], wo[1][1]});
    put(L.bq, {bq[0], bq[1]});
    put(L.bk, {bk[0], bk[1]});
    put(L.bv, {bv[0], bv[1]});
    put(L.bo, {bo[0], bo[1]});

    auto out = attention_forward(
        Tensor<double>::from_data({2, 2}, {x[0][0], x[0][1], x[1][0], x[1][1]}), L, 1);
    for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
            CHECK(out.data()[i * 2 + j] == doctest::Approx(expect[i][j]).epsilon(1e-12));
        }
    }
}

TEST_CASE("ffn edge cases and composition") {
    Rng rng(6);
    VisionTransformer<double> model(toy_config(), 3, rng);
    auto& L = model.layers[0];
    auto x = rand_tensor<double>(rng, {4, 16});

    SUBCASE("all weights zero, b2 = c gives constant output") {
        std::fill(L.w1.tensor.data().begin(), L.w1.tensor.data().end(), 0.0);
        std::fill(L.b1.tensor.data().begin(), L.b1.tensor.data().end(), 0.0);
        std::fill(L.w2.tensor.data().begin(), L.w2.tensor.data().end(), 0.0);
        std::fill(L.b2.tensor.data().begin(), L.b2.tensor.data().end(), 2.5);
        auto out = ffn_forward(x, L);
        for (double v : out.data()) CHECK(v == 2.5);
    }
    SUBCASE("w2 zero leaves only b2") {
        std::fill(L.w2.tensor.data().begin(), L.w2.tensor.data().end(), 0.0);
        auto out = ffn_forward(x, L);
        for (int i = 0; i < 4; ++i) {
            for (int j = 0; j < 16; ++j) {
                CHECK(out.data()[i * 16 + j] == L.b2.tensor.data()[j]);
            }
        }
    }
    SUBCASE("matches the composed primitive calls exactly") {
        auto composed = add(
            matmul(gelu(add(matmul(x, L.w1.tensor), L.b1.tensor)), L.w2.tensor), L.b2.tensor);
        CHECK(bit_equal(ffn_forward(x, L), composed));
    }
}

TEST_CASE("stochastic depth rate schedule") {
    CHECK(stochastic_depth_rate(0, 12, 0.1) == 0.0);
    CHECK(stochastic_depth_rate(11, 12, 0.1) == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(stochastic_depth_rate(5, 12, 0.1) == doctest::Approx(0.1 * 5.0 / 11.0).epsilon(1e-12));
    CHECK(stochastic_depth_rate(0, 1, 0.1) == 0.0);  // N < 2 convention
    CHECK_THROWS_AS(stochastic_depth_rate(3, 2, 0.1), ContractError);
}

TEST_CASE("apply_stochastic_depth semantics") {
    Rng rng(7);
    auto x = rand_tensor<double>(rng, {64, 4}, false);

    SUBCASE("rate 0 is the identity in both modes") {
        Rng r(1);
        CHECK(bit_equal(apply_stochastic_depth(x, 0.0, true, r), x));
        CHECK(bit_equal(apply_stochastic_depth(x, 0.0, false, r), x));
    }
    SUBCASE("eval mode ignores the rate") {
        Rng r(1);
        CHECK(bit_equal(apply_stochastic_depth(x, 0.1, false, r), x));
    }
    SUBCASE("train mode drops about rate fraction, survivors rescaled") {
        Rng r(99);
        int dropped = 0, trials = 0;
        const int reps = 160;  // 160 x 64 samples ~ 1e4 trials
        for (int rep = 0; rep < reps; ++rep) {
            auto out = apply_stochastic_depth(x, 0.1, true, r);
            for (int i = 0; i < 64; ++i) {
                ++trials;
                const double in0 = x.data()[static_cast<std::size_t>(i) * 4];
                const double out0 = out.data()[static_cast<std::size_t>(i) * 4];
                if (out0 == 0.0 && in0 != 0.0) {
                    ++dropped;
                } else {
                    CHECK(out0 == doctest::Approx(in0 / 0.9).epsilon(1e-12));
                }
            }
        }
        const double frac = static_cast<double>(dropped) / trials;
        CHECK(frac == doctest::Approx(0.1).epsilon(0.1));
        CHECK(std::abs(frac - 0.1) < 0.01);
    }
    SUBCASE("rate out of range throws") {
        Rng r(1);
        CHECK_THROWS_AS(apply_stochastic_depth(x, -0.1, true, r), ContractError);
        CHECK_THROWS_AS(apply_stochastic_depth(x, 1.5, true, r), ContractError);
    }
}

TEST_CASE("layer_forward drop semantics") {
    Rng rng(8);
    VisionTransformer<double> model(toy_config(), 3, rng);
    auto x = rand_tensor<double>(rng, {2, 5, 16});

    SUBCASE("drop rate 1 in train mode returns the input") {
        Rng r(1);
        auto out = layer_forward(x, model.layers[0], 2, 1.0, true, r);
        CHECK(bit_equal(out, x));
    }
    SUBCASE("eval mode is deterministic and rng-independent") {
        Rng r1(1), r2(999);
        auto a = layer_forward(x, model.layers[0], 2, 0.5, false, r1);
        auto b = layer_forward(x, model.layers[0], 2, 0.5, false, r2);
        CHECK(bit_equal(a, b));
    }
    SUBCASE("eval equals train with rate 0") {
        Rng r1(1), r2(2);
        auto a = layer_forward(x, model.layers[0], 2, 0.0, false, r1);
        auto b = layer_forward(x, model.layers[0], 2, 0.0, true, r2);
        CHECK(bit_equal(a, b));
    }
}

TEST_CASE("forward pass is pure in eval mode; rate-0 train matches eval") {
    Rng rng(9);
    BackboneConfig cfg = toy_config();
    VisionTransformer<double> model(cfg, 3, rng);
    auto img = rand_tensor<double>(rng, {2, 3, 16, 16}, false, 0, 1);
    Rng r1(5), r2(6);
    CHECK(bit_equal(model.forward(img, false, r1), model.forward(img, false, r2)));

    BackboneConfig no_sd = cfg;
    no_sd.drop_path_max = 0.0;
    Rng rng2(9);
    VisionTransformer<double> model2(no_sd, 3, rng2);
    Rng r3(7), r4(8);
    CHECK(bit_equal(model2.forward(img, true, r3), model2.forward(img, false, r4)));
}

TEST_CASE("freeze_backbone leaves the classifier trainable") {
    Rng rng(10);
    VisionTransformer<double> model(toy_config(), 3, rng);
    freeze_backbone(model);
    for (auto* p : model.parameters()) {
        if (p->name.rfind("backbone.", 0) == 0) {
            CHECK_FALSE(p->trainable);
            CHECK_FALSE(p->tensor.requires_grad());
        } else {
            CHECK(p->trainable);
        }
    }
}

TEST_CASE("full-backbone finite-difference gradient check") {
    Rng rng(11);
    BackboneConfig cfg = toy_config();
    cfg.drop_path_max = 0.0;
    VisionTransformer<double> model(cfg, 3, rng);
    auto img = rand_tensor<double>(rng, {2, 3, 16, 16}, false, 0, 1);
    const std::vector<int> labels{0, 2};
    Rng fwd_rng(0);
    double worst = 0.0;
    for (auto* p : model.parameters()) {
        auto f = [&](Tensor<double>&) {
            return cross_entropy(model.forward(img, false, fwd_rng), labels);
        };
        worst = std::max(worst, finite_diff_grad_check<double>(f, p->tensor, 1e-4));
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("checkpoint round trip is bit exact") {
    Rng rng(12);
    VisionTransformer<float> model(toy_config(), 4, rng);
    freeze_backbone(model);
    const std::string path =
        (std::filesystem::temp_directory_path() / "peftforge_test_ckpt.bin").string();
    save_model(model, path);
    auto loaded = load_model<float>(path);
    auto a = model.parameters();
    auto b = loaded.parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i]->name == b[i]->name);
        CHECK(a[i]->trainable == b[i]->trainable);
        CHECK(bit_equal(a[i]->tensor, b[i]->tensor));
    }
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint load rejects bad version, truncation and dtype") {
    Rng rng(13);
    VisionTransformer<float> model(toy_config(), 4, rng);
    const auto dir = std::filesystem::temp_directory_path();
    const std::string path = (dir / "peftforge_test_ckpt2.bin").string();
    save_model(model, path);

    SUBCASE("version mismatch") {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(8);
        const std::uint32_t bad = 99;
        f.write(reinterpret_cast<const char*>(&bad), sizeof(bad));
        f.close();
        CHECK_THROWS_AS(load_model<float>(path), IoError);
    }
    SUBCASE("truncated file") {
        const auto full = std::filesystem::file_size(path);
        std::filesystem::resize_file(path, full - 64);
        CHECK_THROWS_AS(load_model<float>(path), IoError);
    }
    SUBCASE("dtype mismatch") {
        CHECK_THROWS_AS(load_model<double>(path), IoError);
    }
    std::filesystem::remove(path);
}

TEST_CASE("model clone shares no storage") {
    Rng rng(14);
    VisionTransformer<double> model(toy_config(), 3, rng);
    auto copy = model.clone();
    copy.head_weight.tensor.data()[0] += 1.0;
    CHECK(model.head_weight.tensor.data()[0] != copy.head_weight.tensor.data()[0]);
}

TEST_SUITE_END();
