#pragma once

#include <vector>

#include "peftforge/rng.hpp"
#include "peftforge/tensor.hpp"

namespace testutil {

template <typename T>
peft::Tensor<T> rand_tensor(peft::Rng& rng, peft::Shape shape, bool requires_grad = false,
                            double lo = -1.0, double hi = 1.0) {
    auto t = peft::Tensor<T>::zeros(std::move(shape), requires_grad);
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
bool bit_equal(const peft::Tensor<T>& a, const peft::Tensor<T>& b) {
    if (a.shape() != b.shape()) return false;
    const auto& da = a.data();
    const auto& db = b.data();
    for (std::size_t i = 0; i < da.size(); ++i) {
        if (da[i] != db[i]) return false;
    }
    return true;
}

template <typename T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    }
    return m;
}

}  // namespace testutil
