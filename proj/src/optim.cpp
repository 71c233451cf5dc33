#include "fairproto/optim.hpp"

#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "fairproto/error.hpp"

namespace fairproto {

AdamState AdamState::for_size(std::size_t n) {
    AdamState s;
    s.m.assign(n, 0.0);
    s.v.assign(n, 0.0);
    return s;
}

AdamState AdamState::for_params(HeadParams& params) {
    std::size_t n = 0;
    for (auto v : trainable_views(params)) n += v.size();
    return for_size(n);
}

double cosine_lr(const CosineSchedule& schedule, std::uint64_t t) {
    if (t > schedule.total_steps) {
        throw RangeError(fmt::format("cosine_lr: step {} outside [0, {}]", t, schedule.total_steps));
    }
    if (schedule.total_steps == 0) return schedule.lr_max;
    const double phase = std::numbers::pi * static_cast<double>(t) / static_cast<double>(schedule.total_steps);
    // Convex-combination form: w = 1 gives lr_max exactly, w = 0 gives lr_min exactly.
    const double w = 0.5 * (1.0 + std::cos(phase));
    return w * schedule.lr_max + (1.0 - w) * schedule.lr_min;
}

double global_norm(std::span<const std::span<const double>> grads) {
    double sq = 0.0;
    for (auto g : grads) {
        for (double x : g) sq += x * x;
    }
    return std::sqrt(sq);
}

double clip_grad_norm(std::span<const std::span<double>> grads, double max_norm) {
    double sq = 0.0;
    for (auto g : grads) {
        for (double x : g) {
            if (!std::isfinite(x)) throw NumericError("clip_grad_norm: non-finite gradient");
            sq += x * x;
        }
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("clip_grad_norm: gradient norm overflow");
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto g : grads) {
            for (double& x : g) x *= scale;
        }
    }
    return norm;
}

double clip_grad_norm(HeadGrads& grads, double max_norm) {
    auto views = grad_views(grads);
    return clip_grad_norm(views, max_norm);
}

void adam_step(AdamState& state, std::span<const std::span<double>> params,
               std::span<const std::span<const double>> grads, double lr) {
    if (params.size() != grads.size()) throw ShapeError("adam_step: parameter/gradient list lengths differ");
    std::size_t total = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].size() != grads[i].size()) {
            throw ShapeError(fmt::format("adam_step: tensor {} has {} values but {} gradients", i,
                                         params[i].size(), grads[i].size()));
        }
        total += params[i].size();
    }
    if (total != state.m.size() || total != state.v.size()) {
        throw ShapeError(fmt::format("adam_step: state holds {} moments for {} parameters", state.m.size(), total));
    }
    if (!(lr > 0.0)) throw RangeError("adam_step: learning rate must be positive");

    state.t += 1;
    const double t = static_cast<double>(state.t);
    const double bc1 = 1.0 - std::pow(state.beta1, t);
    const double bc2 = 1.0 - std::pow(state.beta2, t);
    std::size_t k = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i];
        auto g = grads[i];
        for (std::size_t j = 0; j < p.size(); ++j, ++k) {
            state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g[j];
            state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g[j] * g[j];
            const double m_hat = state.m[k] / bc1;
            const double v_hat = state.v[k] / bc2;
            p[j] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
        }
    }
}

void adam_step(AdamState& state, HeadParams& params, const HeadGrads& grads, double lr) {
    auto p = trainable_views(params);
    auto g = grad_views(grads);
    adam_step(state, p, g, lr);
    params.check_finite();
}

}  // namespace fairproto
