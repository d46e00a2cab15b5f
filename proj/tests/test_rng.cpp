#include <doctest.h>

#include <cmath>
#include <limits>

#include "peftforge/rng.hpp"
#include "peftforge/tensor.hpp"
#include "test_util.hpp"

using namespace peft;

TEST_SUITE_BEGIN("rng");

TEST_CASE("identical seeds give identical streams") {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(43);
    bool same = true;
    Rng a2(42);
    for (int i = 0; i < 10; ++i) same = same && (a2.next_u64() == c.next_u64());
    CHECK_FALSE(same);
}

TEST_CASE("child streams are independent and reproducible") {
    Rng a(7);
    Rng c1 = a.child(1), c2 = a.child(2);
    CHECK(c1.next_u64() != c2.next_u64());
    Rng again = Rng(7).child(1);
    Rng c1b = Rng(7).child(1);
    CHECK(again.next_u64() == c1b.next_u64());
}

TEST_CASE("truncated normal respects the bound") {
    Rng rng(1);
    auto t = sample_truncated_normal<double>(rng, 0.01, 0.02, {64, 64});
    for (double v : t.data()) CHECK(std::abs(v) <= 0.02);
}

TEST_CASE("untruncated draws match the target std within 5%") {
    Rng rng(2);
    const double inf = std::numeric_limits<double>::infinity();
    auto t = sample_truncated_normal<double>(rng, 0.02, inf, {100000});
    double mean = 0;
    for (double v : t.data()) mean += v;
    mean /= static_cast<double>(t.size());
    double var = 0;
    for (double v : t.data()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(t.size() - 1);
    CHECK(std::sqrt(var) == doctest::Approx(0.02).epsilon(0.05));
}

TEST_CASE("fixed seed reproduces the sampled tensor exactly") {
    Rng r1(77), r2(77);
    auto a = sample_truncated_normal<double>(r1, 0.01, 0.02, {33});
    auto b = sample_truncated_normal<double>(r2, 0.01, 0.02, {33});
    CHECK(testutil::bit_equal(a, b));

    Rng k1(78), k2(78);
    auto c = sample_kaiming_uniform<float>(k1, 100, {40});
    auto d = sample_kaiming_uniform<float>(k2, 100, {40});
    CHECK(testutil::bit_equal(c, d));
}

TEST_CASE("kaiming uniform bound for fan_in 768") {
    Rng rng(5);
    const double bound = 1.0 / std::sqrt(768.0);
    auto t = sample_kaiming_uniform<double>(rng, 768, {768, 8});
    for (double v : t.data()) CHECK(std::abs(v) <= bound);
}

TEST_CASE("kaiming uniform mean is near zero") {
    Rng rng(6);
    const int n = 100000;
    auto t = sample_kaiming_uniform<double>(rng, 16, {n});
    double mean = 0;
    for (double v : t.data()) mean += v;
    mean /= n;
    // std of the mean estimator: bound / sqrt(3 n)
    const double bound = 1.0 / std::sqrt(16.0);
    const double se = bound / std::sqrt(3.0 * n);
    CHECK(std::abs(mean) < 3.0 * se);
}

TEST_CASE("sampling contract errors") {
    Rng rng(9);
    CHECK_THROWS_AS(sample_truncated_normal<double>(rng, -0.1, 1.0, {3}), ContractError);
    CHECK_THROWS_AS(sample_truncated_normal<double>(rng, 0.1, 0.0, {3}), ContractError);
    CHECK_THROWS_AS(sample_kaiming_uniform<double>(rng, 0, {3}), ContractError);
}

TEST_SUITE_END();
