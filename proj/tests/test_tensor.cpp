#include <doctest.h>

#include <cmath>

#include "peftforge/gradcheck.hpp"
#include "peftforge/tensor.hpp"
#include "test_util.hpp"

using namespace peft;
using testutil::rand_tensor;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("matmul identity and hand cases") {
    auto eye = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
    auto v = Tensor<double>::from_data({2, 1}, {3, 4});
    auto out = matmul(eye, v);
    CHECK(out.data() == std::vector<double>{3, 4});

    auto a = Tensor<double>::from_data({1, 2}, {1, 2});
    auto b = Tensor<double>::from_data({2, 1}, {3, 4});
    CHECK(matmul(a, b).item() == doctest::Approx(11).epsilon(1e-12));
}

TEST_CASE("matmul batched leading dims") {
    Rng rng(3);
    auto a = rand_tensor<double>(rng, {2, 3, 4});
    auto b = rand_tensor<double>(rng, {4, 5});
    auto out = matmul(a, b);
    REQUIRE(out.shape() == Shape{2, 3, 5});
    // slice-by-slice agreement with 2D products
    for (int s = 0; s < 2; ++s) {
        std::vector<double> slice(a.data().begin() + s * 12, a.data().begin() + (s + 1) * 12);
        auto a2 = Tensor<double>::from_data({3, 4}, slice);
        auto ref = matmul(a2, b);
        for (int i = 0; i < 15; ++i) {
            CHECK(out.data()[s * 15 + i] == doctest::Approx(ref.data()[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("matmul shape error names both shapes") {
    auto a = Tensor<double>::from_data({2, 3}, std::vector<double>(6, 0.0));
    auto b = Tensor<double>::from_data({4, 2}, std::vector<double>(8, 0.0));
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2, 3]"), ShapeError);
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[4, 2]"), ShapeError);
}

TEST_CASE("gradient of sum(A x B) w.r.t. A equals ones x B^T") {
    Rng rng(11);
    auto a = rand_tensor<double>(rng, {3, 4}, true);
    auto b = rand_tensor<double>(rng, {4, 2});
    auto loss = sum(matmul(a, b));
    loss.backward();
    // d/dA sum(AB) = ones(3,2) @ B^T
    for (int i = 0; i < 3; ++i) {
        for (int k = 0; k < 4; ++k) {
            double expect = 0.0;
            for (int j = 0; j < 2; ++j) expect += b.data()[k * 2 + j];
            CHECK(a.grad()[i * 4 + k] == doctest::Approx(expect).epsilon(1e-12));
        }
    }
}

TEST_CASE("gelu anchor values") {
    auto x = Tensor<double>::from_data({3}, {0.0, 1.0, -10.0});
    auto y = gelu(x);
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[1] == doctest::Approx(0.8413447).epsilon(1e-6));
    CHECK(std::abs(y.data()[2]) < 1e-8);
}

TEST_CASE("softmax anchors, shift invariance and row sums") {
    auto y = softmax_lastdim(Tensor<double>::from_data({2}, {0, 0}));
    CHECK(y.data()[0] == doctest::Approx(0.5).epsilon(1e-12));

    auto big = softmax_lastdim(Tensor<double>::from_data({2}, {1000, 1000}));
    CHECK(big.data()[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(std::isfinite(big.data()[0]));

    auto logs = softmax_lastdim(
        Tensor<double>::from_data({2}, {std::log(1.0), std::log(3.0)}));
    CHECK(logs.data()[0] == doctest::Approx(0.25).epsilon(1e-9));
    CHECK(logs.data()[1] == doctest::Approx(0.75).epsilon(1e-9));

    Rng rng(5);
    auto x = rand_tensor<double>(rng, {4, 7}, false, -3, 3);
    auto sm = softmax_lastdim(x);
    for (int i = 0; i < 4; ++i) {
        double s = 0;
        for (int j = 0; j < 7; ++j) s += sm.data()[i * 7 + j];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
    // additive shift of a row leaves the distribution unchanged
    auto shifted = x.clone_detached();
    for (int j = 0; j < 7; ++j) shifted.data()[j] += 17.5;
    auto sm2 = softmax_lastdim(shifted);
    for (int j = 0; j < 7; ++j) {
        CHECK(std::abs(sm2.data()[j] - sm.data()[j]) < 1e-6);
    }
}

TEST_CASE("layer_norm anchors") {
    auto gamma = Tensor<double>::filled({3}, 1.0);
    auto beta = Tensor<double>::zeros({3});

    auto constant = layer_norm(Tensor<double>::from_data({1, 3}, {4, 4, 4}), gamma, beta);
    for (double v : constant.data()) CHECK(v == doctest::Approx(0.0).epsilon(1e-9));

    auto y = layer_norm(Tensor<double>::from_data({1, 3}, {1, 2, 3}), gamma, beta);
    CHECK(y.data()[0] == doctest::Approx(-1.22474).epsilon(1e-4));
    CHECK(y.data()[1] == doctest::Approx(0.0).epsilon(1e-4));
    CHECK(y.data()[2] == doctest::Approx(1.22474).epsilon(1e-4));

    auto g0 = Tensor<double>::zeros({3});
    auto b5 = Tensor<double>::filled({3}, 5.0);
    auto fixed = layer_norm(Tensor<double>::from_data({2, 3}, {1, 9, -4, 0, 0, 2}), g0, b5);
    for (double v : fixed.data()) CHECK(v == 5.0);
}

TEST_CASE("layer_norm statistics property") {
    Rng rng(9);
    auto gamma = Tensor<double>::filled({16}, 1.0);
    auto beta = Tensor<double>::zeros({16});
    auto x = rand_tensor<double>(rng, {8, 16}, false, -2, 2);
    auto y = layer_norm(x, gamma, beta);
    for (int i = 0; i < 8; ++i) {
        double mean = 0, var = 0;
        for (int j = 0; j < 16; ++j) mean += y.data()[i * 16 + j];
        mean /= 16;
        for (int j = 0; j < 16; ++j) {
            const double c = y.data()[i * 16 + j] - mean;
            var += c * c;
        }
        var /= 16;
        CHECK(std::abs(mean) < 1e-6);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
    }
}

TEST_CASE("cross_entropy anchors") {
    auto uniform = cross_entropy(Tensor<double>::from_data({1, 2}, {0, 0}), {0});
    CHECK(uniform.item() == doctest::Approx(std::log(2.0)).epsilon(1e-9));

    auto confident = cross_entropy(Tensor<double>::from_data({1, 2}, {1e6, 0}), {0});
    CHECK(confident.item() == doctest::Approx(0.0).epsilon(1e-9));

    // batch of two averages the per-sample losses
    auto l1 = cross_entropy(Tensor<double>::from_data({1, 3}, {0.3, -1.0, 0.9}), {2}).item();
    auto l2 = cross_entropy(Tensor<double>::from_data({1, 3}, {2.0, 0.1, -0.4}), {1}).item();
    auto both = cross_entropy(
        Tensor<double>::from_data({2, 3}, {0.3, -1.0, 0.9, 2.0, 0.1, -0.4}), {2, 1});
    CHECK(both.item() == doctest::Approx(0.5 * (l1 + l2)).epsilon(1e-12));

    CHECK_THROWS_AS(cross_entropy(Tensor<double>::from_data({1, 2}, {0, 0}), {2}),
                    std::out_of_range);
}

TEST_CASE("backward contract: scalar only, accumulation doubles") {
    Rng rng(21);
    auto x = rand_tensor<double>(rng, {5}, true);
    auto y = gelu(x);
    CHECK_THROWS_AS(y.backward(), ContractError);

    auto loss = sum(mul(x, x));
    loss.backward();
    const std::vector<double> once = x.grad();
    loss.backward();
    for (std::size_t i = 0; i < once.size(); ++i) {
        CHECK(x.grad()[i] == 2.0 * once[i]);
    }
}

TEST_CASE("broadcast add/mul semantics") {
    auto a = Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    auto row = Tensor<double>::from_data({3}, {10, 20, 30});
    auto s = Tensor<double>::from_data({1}, {2});
    CHECK(add(a, row).data() == std::vector<double>{11, 22, 33, 14, 25, 36});
    CHECK(mul(a, s).data() == std::vector<double>{2, 4, 6, 8, 10, 12});
    auto bad = Tensor<double>::from_data({2}, {1, 1});
    CHECK_THROWS_AS(add(a, bad), ShapeError);
}

TEST_CASE("finite difference oracle on closed forms") {
    Rng rng(33);
    auto x = rand_tensor<double>(rng, {4, 5}, true);
    // sum of squares: analytic gradient is 2x
    auto err = finite_diff_grad_check<double>(
        [](Tensor<double>& t) { return sum(mul(t, t)); }, x, 1e-5);
    CHECK(err < 1e-7);

    auto x2 = rand_tensor<double>(rng, {3, 4}, true, -2, 2);
    auto err2 = finite_diff_grad_check<double>(
        [](Tensor<double>& t) { return sum(gelu(t)); }, x2, 1e-5);
    CHECK(err2 < 1e-6);
}

TEST_CASE("finite difference sweep over every differentiable op") {
    Rng rng(77);
    const double tol = 1e-5;
    auto check = [&](const char* name, std::function<Tensor<double>(Tensor<double>&)> f,
                     Tensor<double>& x) {
        const double err = finite_diff_grad_check<double>(f, x, 1e-5);
        INFO(name);
        CHECK(err < tol);
    };

    {
        auto x = rand_tensor<double>(rng, {4, 16, 32}, true);
        auto w = rand_tensor<double>(rng, {32, 8});
        check("matmul (lhs)", [&](Tensor<double>& t) { return sum(matmul(t, w)); }, x);
    }
    {
        auto a = rand_tensor<double>(rng, {4, 16, 32});
        auto w = rand_tensor<double>(rng, {32, 8}, true);
        check("matmul (rhs)", [&](Tensor<double>& t) { return sum(matmul(a, t)); }, w);
    }
    {
        auto a = rand_tensor<double>(rng, {3, 4, 5}, true);
        auto b = rand_tensor<double>(rng, {3, 5, 2});
        check("bmm (lhs)", [&](Tensor<double>& t) { return sum(bmm(t, b)); }, a);
        auto b2 = rand_tensor<double>(rng, {3, 5, 2}, true);
        check("bmm (rhs)", [&](Tensor<double>& t) { return sum(bmm(a, t)); }, b2);
    }
    {
        auto x = rand_tensor<double>(rng, {4, 6}, true);
        auto b = rand_tensor<double>(rng, {6}, true);
        check("add (broadcast, lhs)", [&](Tensor<double>& t) { return sum(gelu(add(t, b))); }, x);
        check("add (broadcast, rhs)", [&](Tensor<double>& t) { return sum(gelu(add(x, t))); }, b);
        check("mul (broadcast, rhs)", [&](Tensor<double>& t) { return sum(gelu(mul(x, t))); }, b);
        auto s = rand_tensor<double>(rng, {1}, true);
        check("mul (scalar)", [&](Tensor<double>& t) { return sum(gelu(mul(x, t))); }, s);
    }
    {
        auto x = rand_tensor<double>(rng, {4, 8}, true, -2, 2);
        auto w = rand_tensor<double>(rng, {4, 8});
        check("scale_const", [&](Tensor<double>& t) { return sum(gelu(scale_const(t, 1.7))); }, x);
        check("softmax", [&](Tensor<double>& t) { return sum(mul(softmax_lastdim(t), w)); }, x);
    }
    {
        auto x = rand_tensor<double>(rng, {5, 12}, true);
        auto gamma = rand_tensor<double>(rng, {12}, true, 0.5, 1.5);
        auto beta = rand_tensor<double>(rng, {12}, true);
        check("layer_norm (x)",
              [&](Tensor<double>& t) { return sum(gelu(layer_norm(t, gamma, beta))); }, x);
        check("layer_norm (gamma)",
              [&](Tensor<double>& t) { return sum(gelu(layer_norm(x, t, beta))); }, gamma);
        check("layer_norm (beta)",
              [&](Tensor<double>& t) { return sum(gelu(layer_norm(x, gamma, t))); }, beta);
    }
    {
        auto logits = rand_tensor<double>(rng, {4, 6}, true);
        check("cross_entropy",
              [&](Tensor<double>& t) { return cross_entropy(t, {1, 0, 5, 3}); }, logits);
    }
    {
        auto x = rand_tensor<double>(rng, {2, 5, 6}, true);
        check("transpose_last2", [&](Tensor<double>& t) { return sum(gelu(transpose_last2(t))); }, x);
        check("heads_split", [&](Tensor<double>& t) { return sum(gelu(heads_split(t, 3))); }, x);
        check("select_token", [&](Tensor<double>& t) { return sum(gelu(select_token(t, 2))); }, x);
    }
    {
        auto x = rand_tensor<double>(rng, {6, 5, 2}, true);
        check("heads_merge", [&](Tensor<double>& t) { return sum(gelu(heads_merge(t, 3))); }, x);
    }
    {
        auto x = rand_tensor<double>(rng, {2, 4, 5}, true);
        auto tok = rand_tensor<double>(rng, {5}, true);
        check("prepend_token (x)",
              [&](Tensor<double>& t) { return sum(gelu(prepend_token(t, tok))); }, x);
        check("prepend_token (token)",
              [&](Tensor<double>& t) { return sum(gelu(prepend_token(x, t))); }, tok);
    }
    {
        auto img = rand_tensor<double>(rng, {2, 3, 8, 8}, true);
        check("extract_patches",
              [&](Tensor<double>& t) { return sum(gelu(extract_patches(t, 4))); }, img);
    }
    {
        auto x = rand_tensor<double>(rng, {4, 3, 2}, true);
        std::vector<double> factors{0.0, 1.25, 2.0, 0.5};
        check("scale_rows", [&](Tensor<double>& t) { return sum(gelu(scale_rows(t, factors))); }, x);
        std::vector<double> mask(24);
        Rng mrng(2);
        for (auto& m : mask) m = mrng.bernoulli(0.3) ? 0.0 : 1.4;
        check("mask_mul", [&](Tensor<double>& t) { return sum(gelu(mask_mul(t, mask))); }, x);
    }
    {
        auto x = rand_tensor<double>(rng, {3, 4}, true);
        check("unsqueeze0/squeeze0",
              [&](Tensor<double>& t) { return sum(gelu(squeeze0(unsqueeze0(t)))); }, x);
    }
}

TEST_CASE("requires_grad propagation prunes frozen branches") {
    Rng rng(55);
    auto frozen = rand_tensor<double>(rng, {4, 4}, false);
    auto live = rand_tensor<double>(rng, {4, 4}, true);
    auto out = sum(add(matmul(frozen, frozen), mul(live, live)));
    CHECK(out.requires_grad());
    out.backward();
    CHECK(live.has_grad());
    CHECK_THROWS_AS((void)frozen.grad(), ContractError);
}

TEST_SUITE_END();
