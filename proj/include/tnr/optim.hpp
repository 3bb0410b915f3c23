#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "tnr/tensor.hpp"

namespace tnr {

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 5e-4;
};

/// Moments for one parameter list. Bound to the list on the first step; later
/// steps must pass parameters of the same shapes in the same order.
template <typename T>
struct AdamState {
    AdamHyper hyper;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
    long step = 0;
};

/// One Adam step with bias correction. Weight decay is decoupled and applied
/// as theta -= lr * wd * theta before the moment update. Parameters without
/// an allocated gradient are treated as having a zero gradient.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state) {
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.numel(), T(0));
            state.v.emplace_back(p.numel(), T(0));
        }
    }
    if (state.m.size() != params.size()) {
        throw ShapeError("adam_step: state tracks " + std::to_string(state.m.size()) +
                         " tensors, got " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.m[i].size() != params[i].numel()) {
            throw ShapeError("adam_step: parameter " + std::to_string(i) + " has shape " +
                             shape_str(params[i].shape()) + " but state holds " +
                             std::to_string(state.m[i].size()) + " values");
        }
    }

    ++state.step;
    const auto& h = state.hyper;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    const T lr = static_cast<T>(h.lr);
    const T decay = static_cast<T>(h.lr * h.weight_decay);
    const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
    const T c1 = static_cast<T>(1.0 / bc1), c2 = static_cast<T>(1.0 / bc2);
    const T eps = static_cast<T>(h.eps);

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto theta = params[i].data();
        auto grad = params[i].grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < theta.size(); ++j) {
            if (decay != T(0)) theta[j] -= decay * theta[j];
            const T g = grad[j];
            m[j] = b1 * m[j] + (T(1) - b1) * g;
            v[j] = b2 * v[j] + (T(1) - b2) * g * g;
            const T mhat = m[j] * c1;
            const T vhat = v[j] * c2;
            theta[j] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

/// lr0 * (1 + cos(pi * epoch / total)) / 2
inline double cosine_lr(int epoch, int total_epochs, double lr0) {
    if (total_epochs <= 0 || epoch < 0 || epoch >= total_epochs) {
        throw std::out_of_range("cosine_lr: epoch " + std::to_string(epoch) + " outside [0," +
                                std::to_string(total_epochs) + ")");
    }
    return lr0 * 0.5 *
           (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(total_epochs)));
}

}  // namespace tnr
