// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pcolab/optim.hpp"
#include "pcolab/tensor.hpp"

namespace pcolab {

struct GradcheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t coordinates = 0;
};

/// Central-difference check of the tape gradient of a scalar function of
/// several tensors. Error per coordinate is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
inline GradcheckResult gradcheck_params(const std::function<Tensor<double>()>& f, ParamList<double>& params,
                                        double h = 1e-5) {
    for (auto& p : params) {
        p.tensor.set_requires_grad(true);
        p.tensor.zero_grad();
    }
    Tensor<double> y = f();
    if (y.numel() != 1) {
        throw Error(ErrorKind::shape, "gradcheck: function output must be scalar, got " + shape_str(y.shape()));
    }
    y.backward();
    std::vector<std::vector<double>> analytic;
    for (auto& p : params) {
        if (p.tensor.has_grad()) {
            analytic.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
        } else {
            analytic.emplace_back(p.tensor.numel(), 0.0);
        }
    }
    GradcheckResult res;
    NoGradGuard no_grad;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto data = params[pi].tensor.mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double orig = data[i];
            data[i] = orig + h;
            const double up = f().item();
            data[i] = orig - h;
            const double down = f().item();
            data[i] = orig;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[pi][i];
            const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            ++res.coordinates;
            if (err > res.max_rel_error || res.coordinates == 1) {
                res.max_rel_error = std::max(res.max_rel_error, err);
                res.worst_param = params[pi].name;
                res.worst_index = i;
                res.analytic = a;
                res.numeric = numeric;
            }
        }
    }
    return res;
}

/// Single-input form: returns the max relative error for f at x.
inline double gradcheck(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& x,
                        double h = 1e-5) {
    ParamList<double> params{{"x", x.clone(true)}};
    auto input = params[0].tensor;
    return gradcheck_params([&] { return f(input); }, params, h).max_rel_error;
}

}  // namespace pcolab
