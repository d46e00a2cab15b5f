#pragma once

#include <cmath>
#include <functional>

#include "peftforge/tensor.hpp"

namespace peft {

/// Central-difference gradient oracle. f must be a pure tensor-to-scalar
/// function of x (it is re-evaluated with perturbed entries, so it has to
/// rebuild its graph on every call). Returns the maximum relative error
/// between the analytic gradient and (f(x+h) - f(x-h)) / 2h, with the
/// relative denominator max(|analytic|, |numeric|, 1e-8).
///
/// Meant for float64; float32 rounding noise swamps the difference quotient.
template <typename T>
double finite_diff_grad_check(const std::function<Tensor<T>(Tensor<T>&)>& f, Tensor<T>& x,
                              double h = 1e-4) {
    if (!x.requires_grad()) {
        throw ContractError("finite_diff_grad_check: x must require grad");
    }
    x.zero_grad();
    Tensor<T> loss = f(x);
    loss.backward();
    const std::vector<T> analytic = x.grad();

    double max_rel = 0.0;
    auto& values = x.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
        const T saved = values[i];
        values[i] = saved + static_cast<T>(h);
        const double fp = static_cast<double>(f(x).item());
        values[i] = saved - static_cast<T>(h);
        const double fm = static_cast<double>(f(x).item());
        values[i] = saved;
        const double numeric = (fp - fm) / (2.0 * h);
        const double a = static_cast<double>(analytic[i]);
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        max_rel = std::max(max_rel, std::abs(numeric - a) / denom);
    }
    return max_rel;
}

}  // namespace peft
