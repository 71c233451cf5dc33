#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fairproto/protonet.hpp"

namespace fairproto {

/// Bias-corrected Adam moments over the flattened trainable parameters.
struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState for_size(std::size_t n);
    static AdamState for_params(HeadParams& params);

    bool operator==(const AdamState&) const = default;
};

struct CosineSchedule {
    double lr_max = 1e-4;
    double lr_min = 1e-6;
    std::uint64_t total_steps = 250 * 25;
};

/// lr(t) = lr_min + (lr_max - lr_min) * (1 + cos(pi t / T)) / 2, 0 <= t <= T.
/// Throws RangeError outside [0, T]. Both endpoints are exact.
double cosine_lr(const CosineSchedule& schedule, std::uint64_t t);

/// Global L2 norm over all tensors concatenated.
double global_norm(std::span<const std::span<const double>> grads);

/// Rescales every gradient by max_norm / norm when norm > max_norm.
/// Returns the pre-clip norm. Throws NumericError on non-finite input.
double clip_grad_norm(std::span<const std::span<double>> grads, double max_norm = 1.0);
double clip_grad_norm(HeadGrads& grads, double max_norm = 1.0);

/// One Adam step; params and grads are parallel lists of equally-shaped views.
void adam_step(AdamState& state, std::span<const std::span<double>> params,
               std::span<const std::span<const double>> grads, double lr);
void adam_step(AdamState& state, HeadParams& params, const HeadGrads& grads, double lr);

}  // namespace fairproto
