// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pcolab/tensor.hpp"

namespace pcolab {

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

/// AdamW moments and hyperparameters. Defaults follow the reference training
/// setup (beta1 0.9, beta2 0.95, eps 1e-8).
template <typename T>
struct OptimState {
    long step = 0;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;

    void validate() const {
        require(beta1 > 0.0 && beta1 < 1.0, ErrorKind::invalid_argument, "AdamW: beta1 must lie in (0,1)");
        require(beta2 > 0.0 && beta2 < 1.0, ErrorKind::invalid_argument, "AdamW: beta2 must lie in (0,1)");
        require(eps > 0.0, ErrorKind::invalid_argument, "AdamW: eps must be positive");
        require(lr >= 0.0, ErrorKind::invalid_argument, "AdamW: lr must be non-negative");
    }
};

/// One decoupled-weight-decay Adam update with bias correction. `lr` overrides
/// state.lr when non-negative (for schedules).
template <typename T>
void adamw_step(ParamList<T>& params, OptimState<T>& state, double lr = -1.0) {
    state.validate();
    if (state.m.empty()) {
        for (auto& p : params) {
            state.m.emplace_back(p.tensor.numel(), T{0});
            state.v.emplace_back(p.tensor.numel(), T{0});
        }
    }
    require(state.m.size() == params.size(), ErrorKind::invalid_argument,
            "AdamW: moment buffers track " + std::to_string(state.m.size()) + " params, got " +
                std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        require(params[i].tensor.has_grad(), ErrorKind::invalid_argument,
                "AdamW: parameter '" + params[i].name + "' has no gradient");
        require(state.m[i].size() == params[i].tensor.numel(), ErrorKind::shape,
                "AdamW: moment shape mismatch for '" + params[i].name + "'");
    }
    const double rate = lr >= 0.0 ? lr : state.lr;
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].tensor.mutable_data();
        auto g = params[i].tensor.grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = static_cast<double>(g[j]);
            m[j] = static_cast<T>(state.beta1 * m[j] + (1.0 - state.beta1) * gj);
            v[j] = static_cast<T>(state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj);
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            double wj = static_cast<double>(w[j]);
            wj -= rate * state.weight_decay * wj;
            wj -= rate * mhat / (std::sqrt(vhat) + state.eps);
            w[j] = static_cast<T>(wj);
        }
    }
}

template <typename T>
void zero_grads(ParamList<T>& params) {
    for (auto& p : params) {
        p.tensor.zero_grad();
    }
}

}  // namespace pcolab
