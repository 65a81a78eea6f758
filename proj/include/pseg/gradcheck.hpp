#pragma once

// Central finite-difference oracle for analytic gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pseg/tensor.hpp"

namespace pseg {

struct FdReport {
    double max_rel_error = 0.0;
    std::size_t param_index = 0;   // location of the worst coordinate
    std::size_t coordinate = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t coordinates_checked = 0;
};

// f maps a parameter list to a scalar tensor; `params` are leaves that
// require gradients. Error per coordinate is
//   |analytic - central| / max(|analytic|, |central|, 1e-8).
// Rejects non-finite values of f with DomainError.
template <class T>
FdReport finite_difference_check(const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& f,
                                 const std::vector<Tensor<T>>& params, T eps) {
    if (!(eps > T(0))) throw DomainError("finite_difference_check: eps must be positive");
    auto eval = [&](const std::vector<Tensor<T>>& ps) {
        Tensor<T> y = f(ps);
        if (y.numel() != 1) throw ShapeError("finite_difference_check: f must return a scalar");
        const T v = y.item();
        if (!std::isfinite(static_cast<double>(v))) {
            throw DomainError("finite_difference_check: non-finite function value");
        }
        return y;
    };

    Tensor<T> y = eval(params);
    backward(y);
    std::vector<std::vector<T>> analytic;
    for (const auto& p : params) {
        if (p.has_grad()) analytic.emplace_back(p.grad().begin(), p.grad().end());
        else analytic.emplace_back(p.numel(), T(0));
    }

    FdReport rep;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        for (std::size_t j = 0; j < params[pi].numel(); ++j) {
            auto perturbed = [&](T delta) {
                std::vector<Tensor<T>> ps;
                ps.reserve(params.size());
                for (std::size_t q = 0; q < params.size(); ++q) {
                    std::vector<T> v(params[q].data().begin(), params[q].data().end());
                    if (q == pi) v[j] += delta;
                    ps.push_back(Tensor<T>::constant(params[q].shape(), std::move(v)));
                }
                return static_cast<double>(eval(ps).item());
            };
            const double numeric = (perturbed(eps) - perturbed(-eps)) / (2.0 * static_cast<double>(eps));
            const double a = static_cast<double>(analytic[pi][j]);
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            const double err = std::abs(a - numeric) / denom;
            ++rep.coordinates_checked;
            if (err > rep.max_rel_error || rep.coordinates_checked == 1) {
                rep.max_rel_error = err;
                rep.param_index = pi;
                rep.coordinate = j;
                rep.analytic = a;
                rep.numeric = numeric;
            }
        }
    }
    return rep;
}

}  // namespace pseg
