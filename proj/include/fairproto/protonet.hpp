#pragma once

// Projection head, prototypes, distance classification and the two losses.
//
// The head refines fused backbone features:
//
//   z = BN2(W2 * dropout(ReLU(BN1(W1 x + b1))) + b2)
//
// All computation is in double precision. Batches are row-major matrices,
// one sample per row.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "fairproto/rng.hpp"

namespace fairproto {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline constexpr double kDefaultL2 = 1e-4;
inline constexpr double kDefaultDropout = 0.20;
inline constexpr double kBceEpsilon = 1e-7;

struct BatchNormState {
    Vector gamma;
    Vector beta;
    Vector running_mean;
    Vector running_var;
    double momentum = 0.1;
    double epsilon = 1e-5;

    /// gamma = 1, beta = 0, running stats 0 / 1.
    static BatchNormState fresh(Eigen::Index width);
};

struct HeadDims {
    std::uint32_t input = 0;
    std::uint32_t hidden = 512;
    std::uint32_t output = 256;

    bool operator==(const HeadDims&) const = default;
};

struct HeadParams {
    Matrix w1;  // hidden x input
    Vector b1;
    BatchNormState bn1;
    Matrix w2;  // output x hidden
    Vector b2;
    BatchNormState bn2;
    double dropout_rate = kDefaultDropout;
    double verif_scale = 1.0;
    double verif_bias = 0.0;
    double l2_lambda = kDefaultL2;

    HeadDims dims() const;

    /// Throws NumericError naming the first non-finite tensor.
    void check_finite() const;

    /// Uniform init in +-sqrt(6 / (fan_in + fan_out)); biases 0; fresh BN.
    static HeadParams init(const HeadDims& dims, Rng& rng);
};

/// Gradient set with the shape of the trainable part of HeadParams.
struct HeadGrads {
    Matrix w1;
    Vector b1;
    Vector gamma1;
    Vector beta1;
    Matrix w2;
    Vector b2;
    Vector gamma2;
    Vector beta2;
    double verif_scale = 0.0;
    double verif_bias = 0.0;

    static HeadGrads zeros_like(const HeadParams& params);

    HeadGrads& operator+=(const HeadGrads& other);
    HeadGrads& operator*=(double s);
};

/// Flat views over every trainable tensor, in checkpoint declaration order:
/// w1, b1, gamma1, beta1, w2, b2, gamma2, beta2, verif_scale, verif_bias.
/// Running statistics are not trainable and are not included.
std::vector<std::span<double>> trainable_views(HeadParams& params);
std::vector<std::span<double>> grad_views(HeadGrads& grads);
std::vector<std::span<const double>> grad_views(const HeadGrads& grads);

// -- forward / backward ---------------------------------------------------------

enum class Mode { train, eval };

struct BatchNormCache {
    Matrix xhat;
    Vector inv_std;
    bool batch_stats = false;  // false: normalized with running statistics
    Vector batch_mean;
    Vector batch_var;  // biased
};

struct ForwardCache {
    Mode mode = Mode::eval;
    Matrix input;
    BatchNormCache bn1;
    Matrix pre_relu;   // BN1 output
    Matrix dropout_mask;  // empty when dropout is inactive; entries 0 or 1/(1-p)
    Matrix hidden;     // after ReLU and dropout
    BatchNormCache bn2;
};

struct ForwardResult {
    Matrix z;
    ForwardCache cache;
};

/// Train mode normalizes with batch statistics (running statistics when the
/// batch has a single row) and applies dropout drawn from `rng`. Eval mode
/// is a pure function of (params, x); `rng` may be null.
ForwardResult head_forward(const HeadParams& params, const Matrix& x, Mode mode, Rng* rng);

/// Folds a train-mode forward's batch statistics into the running ones.
void update_running_stats(HeadParams& params, const ForwardCache& cache);

struct BackwardResult {
    HeadGrads grads;
    Matrix input_grad;
};

/// Analytic gradients for every trainable tensor, including the L2 term
/// 2*lambda*W on w1 and w2. verif_scale / verif_bias grads are left at 0;
/// the pairwise loss fills them.
BackwardResult head_backward(const HeadParams& params, const ForwardCache& cache, const Matrix& upstream);

/// lambda * (|W1|^2 + |W2|^2)
double l2_penalty(const HeadParams& params);

// -- prototypes and classification ------------------------------------------

struct PrototypeSet {
    std::vector<std::uint32_t> class_ids;  // ascending
    Matrix prototypes;                     // one row per class
};

/// Per-class arithmetic mean of `embeddings` rows grouped by `labels`.
PrototypeSet compute_prototypes(const Matrix& embeddings, std::span<const std::uint32_t> labels);

double euclidean_distance(std::span<const double> q, std::span<const double> p);

struct Prediction {
    std::uint32_t class_id = 0;
    double distance = 0.0;
};

/// Nearest prototype; ties go to the lowest class id.
Prediction classify(std::span<const double> query, const PrototypeSet& protos);

/// logits(i, c) = -|q_i - p_c|^2
Matrix episode_logits(const Matrix& queries, const PrototypeSet& protos);

// -- losses -----------------------------------------------------------------------

struct CrossEntropyResult {
    double loss = 0.0;
    Matrix grad;  // d loss / d logits
};

/// Mean over rows of -log softmax(logits)[label], max-subtracted.
CrossEntropyResult cross_entropy(const Matrix& logits, std::span<const std::uint32_t> labels);

struct VerificationScore {
    double y_hat = 0.5;
    double d_distance = 0.0;  // d y_hat / d distance
    double d_scale = 0.0;     // d y_hat / d verif_scale
    double d_bias = 0.0;      // d y_hat / d verif_bias
};

/// y_hat = logistic(verif_scale * d + verif_bias), a dissimilarity in (0, 1).
VerificationScore verification_score(double distance, double scale, double bias);
VerificationScore verification_score(double distance, const HeadParams& params);

struct BceResult {
    double loss = 0.0;
    double grad = 0.0;  // d loss / d y_hat; 0 where the clamp is active
};

/// -(y log y_hat + (1 - y) log(1 - y_hat)) with y_hat clamped to
/// [1e-7, 1 - 1e-7]. y is 0 for same class, 1 for different class.
BceResult bce_loss(double y_hat, int y);

}  // namespace fairproto
