#include "fairproto/protonet.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include <fmt/format.h>

#include "fairproto/error.hpp"

namespace fairproto {

namespace {

template <typename M>
std::span<double> view(M& m) {
    return {m.data(), static_cast<std::size_t>(m.size())};
}

template <typename M>
std::span<const double> cview(const M& m) {
    return {m.data(), static_cast<std::size_t>(m.size())};
}

template <typename M>
bool all_finite(const M& m) {
    return m.allFinite();
}

void require_width(const char* layer, Eigen::Index got, Eigen::Index want) {
    if (got != want) {
        throw ShapeError(fmt::format("{}: expected width {}, got {}", layer, want, got));
    }
}

Matrix bn_forward(const BatchNormState& bn, const Matrix& h, bool batch_stats, BatchNormCache& cache) {
    cache.batch_stats = batch_stats;
    Vector mean;
    Vector var;
    if (batch_stats) {
        const double n = static_cast<double>(h.rows());
        mean = h.colwise().sum().transpose() / n;
        Matrix centered = h.rowwise() - mean.transpose();
        var = centered.cwiseProduct(centered).colwise().sum().transpose() / n;
        cache.batch_mean = mean;
        cache.batch_var = var;
    } else {
        mean = bn.running_mean;
        var = bn.running_var;
    }
    cache.inv_std = (var.array() + bn.epsilon).rsqrt().matrix();
    cache.xhat = (h.rowwise() - mean.transpose()) * cache.inv_std.asDiagonal();
    Matrix y = cache.xhat * bn.gamma.asDiagonal();
    y.rowwise() += bn.beta.transpose();
    return y;
}

Matrix bn_backward(const BatchNormState& bn, const BatchNormCache& cache, const Matrix& dy, Vector& dgamma,
                   Vector& dbeta) {
    dgamma = dy.cwiseProduct(cache.xhat).colwise().sum().transpose();
    dbeta = dy.colwise().sum().transpose();
    Matrix dxhat = dy * bn.gamma.asDiagonal();
    if (!cache.batch_stats) {
        return dxhat * cache.inv_std.asDiagonal();
    }
    const double n = static_cast<double>(dy.rows());
    Eigen::RowVectorXd sum_dxhat = dxhat.colwise().sum();
    Eigen::RowVectorXd sum_dxhat_xhat = dxhat.cwiseProduct(cache.xhat).colwise().sum();
    Matrix dx = (n * dxhat).rowwise() - sum_dxhat;
    dx -= cache.xhat * sum_dxhat_xhat.asDiagonal();
    return dx * (cache.inv_std / n).asDiagonal();
}

void fold_running(BatchNormState& bn, const BatchNormCache& cache, Eigen::Index rows) {
    if (!cache.batch_stats) return;
    const double n = static_cast<double>(rows);
    const double m = bn.momentum;
    bn.running_mean = (1.0 - m) * bn.running_mean + m * cache.batch_mean;
    bn.running_var = (1.0 - m) * bn.running_var + m * cache.batch_var * (n / (n - 1.0));
}

double logistic(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

BatchNormState BatchNormState::fresh(Eigen::Index width) {
    BatchNormState bn;
    bn.gamma = Vector::Ones(width);
    bn.beta = Vector::Zero(width);
    bn.running_mean = Vector::Zero(width);
    bn.running_var = Vector::Ones(width);
    return bn;
}

HeadDims HeadParams::dims() const {
    return {static_cast<std::uint32_t>(w1.cols()), static_cast<std::uint32_t>(w1.rows()),
            static_cast<std::uint32_t>(w2.rows())};
}

void HeadParams::check_finite() const {
    auto check = [](const char* name, bool ok) {
        if (!ok) throw NumericError(fmt::format("non-finite value in head parameter {}", name));
    };
    check("w1", all_finite(w1));
    check("b1", all_finite(b1));
    check("bn1.gamma", all_finite(bn1.gamma));
    check("bn1.beta", all_finite(bn1.beta));
    check("bn1.running_mean", all_finite(bn1.running_mean));
    check("bn1.running_var", all_finite(bn1.running_var));
    check("w2", all_finite(w2));
    check("b2", all_finite(b2));
    check("bn2.gamma", all_finite(bn2.gamma));
    check("bn2.beta", all_finite(bn2.beta));
    check("bn2.running_mean", all_finite(bn2.running_mean));
    check("bn2.running_var", all_finite(bn2.running_var));
    check("verif_scale", std::isfinite(verif_scale));
    check("verif_bias", std::isfinite(verif_bias));
}

HeadParams HeadParams::init(const HeadDims& dims, Rng& rng) {
    if (dims.input == 0 || dims.hidden == 0 || dims.output == 0) {
        throw ShapeError("head dimensions must be positive");
    }
    auto glorot = [&rng](Eigen::Index rows, Eigen::Index cols) {
        const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
        std::uniform_real_distribution<double> u(-limit, limit);
        Matrix w(rows, cols);
        for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
        return w;
    };
    HeadParams p;
    p.w1 = glorot(dims.hidden, dims.input);
    p.b1 = Vector::Zero(dims.hidden);
    p.bn1 = BatchNormState::fresh(dims.hidden);
    p.w2 = glorot(dims.output, dims.hidden);
    p.b2 = Vector::Zero(dims.output);
    p.bn2 = BatchNormState::fresh(dims.output);
    return p;
}

HeadGrads HeadGrads::zeros_like(const HeadParams& p) {
    HeadGrads g;
    g.w1 = Matrix::Zero(p.w1.rows(), p.w1.cols());
    g.b1 = Vector::Zero(p.b1.size());
    g.gamma1 = Vector::Zero(p.bn1.gamma.size());
    g.beta1 = Vector::Zero(p.bn1.beta.size());
    g.w2 = Matrix::Zero(p.w2.rows(), p.w2.cols());
    g.b2 = Vector::Zero(p.b2.size());
    g.gamma2 = Vector::Zero(p.bn2.gamma.size());
    g.beta2 = Vector::Zero(p.bn2.beta.size());
    return g;
}

HeadGrads& HeadGrads::operator+=(const HeadGrads& o) {
    w1 += o.w1;
    b1 += o.b1;
    gamma1 += o.gamma1;
    beta1 += o.beta1;
    w2 += o.w2;
    b2 += o.b2;
    gamma2 += o.gamma2;
    beta2 += o.beta2;
    verif_scale += o.verif_scale;
    verif_bias += o.verif_bias;
    return *this;
}

HeadGrads& HeadGrads::operator*=(double s) {
    w1 *= s;
    b1 *= s;
    gamma1 *= s;
    beta1 *= s;
    w2 *= s;
    b2 *= s;
    gamma2 *= s;
    beta2 *= s;
    verif_scale *= s;
    verif_bias *= s;
    return *this;
}

std::vector<std::span<double>> trainable_views(HeadParams& p) {
    return {view(p.w1),       view(p.b1), view(p.bn1.gamma), view(p.bn1.beta),
            view(p.w2),       view(p.b2), view(p.bn2.gamma), view(p.bn2.beta),
            {&p.verif_scale, 1}, {&p.verif_bias, 1}};
}

std::vector<std::span<double>> grad_views(HeadGrads& g) {
    return {view(g.w1), view(g.b1), view(g.gamma1), view(g.beta1),          view(g.w2),
            view(g.b2), view(g.gamma2), view(g.beta2), {&g.verif_scale, 1}, {&g.verif_bias, 1}};
}

std::vector<std::span<const double>> grad_views(const HeadGrads& g) {
    return {cview(g.w1), cview(g.b1), cview(g.gamma1), cview(g.beta1),          cview(g.w2),
            cview(g.b2), cview(g.gamma2), cview(g.beta2), {&g.verif_scale, 1}, {&g.verif_bias, 1}};
}

// -- forward / backward ---------------------------------------------------------

ForwardResult head_forward(const HeadParams& params, const Matrix& x, Mode mode, Rng* rng) {
    if (x.rows() < 1) throw ShapeError("head_forward: empty batch");
    require_width("fc1 input", x.cols(), params.w1.cols());
    require_width("fc2 input", params.w2.cols(), params.w1.rows());

    ForwardResult out;
    auto& c = out.cache;
    c.mode = mode;
    c.input = x;
    const bool batch_stats = mode == Mode::train && x.rows() > 1;

    Matrix h1 = x * params.w1.transpose();
    h1.rowwise() += params.b1.transpose();
    c.pre_relu = bn_forward(params.bn1, h1, batch_stats, c.bn1);
    c.hidden = c.pre_relu.cwiseMax(0.0);

    if (mode == Mode::train && params.dropout_rate > 0.0) {
        if (rng == nullptr) throw ValidationError("head_forward: train-mode dropout needs a generator");
        const double p = params.dropout_rate;
        const double keep_scale = 1.0 / (1.0 - p);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        c.dropout_mask.resize(c.hidden.rows(), c.hidden.cols());
        for (Eigen::Index i = 0; i < c.dropout_mask.size(); ++i) {
            c.dropout_mask.data()[i] = u(*rng) >= p ? keep_scale : 0.0;
        }
        c.hidden = c.hidden.cwiseProduct(c.dropout_mask);
    }

    Matrix h2 = c.hidden * params.w2.transpose();
    h2.rowwise() += params.b2.transpose();
    out.z = bn_forward(params.bn2, h2, batch_stats, c.bn2);
    return out;
}

void update_running_stats(HeadParams& params, const ForwardCache& cache) {
    fold_running(params.bn1, cache.bn1, cache.input.rows());
    fold_running(params.bn2, cache.bn2, cache.input.rows());
}

BackwardResult head_backward(const HeadParams& params, const ForwardCache& cache, const Matrix& upstream) {
    if (upstream.rows() != cache.input.rows() || upstream.cols() != params.w2.rows()) {
        throw ShapeError(fmt::format("head_backward: upstream gradient is {}x{}, expected {}x{}",
                                     upstream.rows(), upstream.cols(), cache.input.rows(),
                                     params.w2.rows()));
    }
    if (cache.input.cols() != params.w1.cols() || cache.hidden.cols() != params.w1.rows()) {
        throw ShapeError("head_backward: cache does not match parameter shapes");
    }

    BackwardResult out;
    auto& g = out.grads;

    Matrix dh2 = bn_backward(params.bn2, cache.bn2, upstream, g.gamma2, g.beta2);
    g.w2 = dh2.transpose() * cache.hidden + 2.0 * params.l2_lambda * params.w2;
    g.b2 = dh2.colwise().sum().transpose();

    Matrix dhidden = dh2 * params.w2;
    if (cache.dropout_mask.size() > 0) dhidden = dhidden.cwiseProduct(cache.dropout_mask);
    Matrix da1 = (cache.pre_relu.array() > 0.0).select(dhidden, 0.0);

    Matrix dh1 = bn_backward(params.bn1, cache.bn1, da1, g.gamma1, g.beta1);
    g.w1 = dh1.transpose() * cache.input + 2.0 * params.l2_lambda * params.w1;
    g.b1 = dh1.colwise().sum().transpose();

    out.input_grad = dh1 * params.w1;
    return out;
}

double l2_penalty(const HeadParams& params) {
    return params.l2_lambda * (params.w1.squaredNorm() + params.w2.squaredNorm());
}

// -- prototypes and classification ------------------------------------------

PrototypeSet compute_prototypes(const Matrix& embeddings, std::span<const std::uint32_t> labels) {
    if (static_cast<std::size_t>(embeddings.rows()) != labels.size()) {
        throw ShapeError(fmt::format("compute_prototypes: {} embeddings but {} labels", embeddings.rows(),
                                     labels.size()));
    }
    if (labels.empty()) throw ValidationError("compute_prototypes: no support embeddings");
    std::map<std::uint32_t, std::size_t> counts;
    for (auto l : labels) ++counts[l];

    PrototypeSet set;
    std::map<std::uint32_t, Eigen::Index> row_of;
    for (const auto& [id, n] : counts) {
        row_of[id] = static_cast<Eigen::Index>(set.class_ids.size());
        set.class_ids.push_back(id);
    }
    set.prototypes = Matrix::Zero(static_cast<Eigen::Index>(set.class_ids.size()), embeddings.cols());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        set.prototypes.row(row_of[labels[i]]) += embeddings.row(static_cast<Eigen::Index>(i));
    }
    for (const auto& [id, n] : counts) {
        set.prototypes.row(row_of[id]) /= static_cast<double>(n);
    }
    return set;
}

namespace {

double squared_distance(const double* q, const double* p, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double d = q[i] - p[i];
        s += d * d;
    }
    return s;
}

}  // namespace

double euclidean_distance(std::span<const double> q, std::span<const double> p) {
    if (q.size() != p.size()) {
        throw ShapeError(fmt::format("euclidean_distance: dimensions {} and {} differ", q.size(), p.size()));
    }
    return std::sqrt(squared_distance(q.data(), p.data(), q.size()));
}

Prediction classify(std::span<const double> query, const PrototypeSet& protos) {
    if (protos.class_ids.empty()) throw ValidationError("classify: empty prototype set");
    const auto dim = static_cast<std::size_t>(protos.prototypes.cols());
    if (query.size() != dim) {
        throw ShapeError(fmt::format("classify: query dimension {} != prototype dimension {}", query.size(), dim));
    }
    // Squared distance has the same argmin as the Euclidean distance.
    std::size_t best = 0;
    double best_sq = squared_distance(query.data(), protos.prototypes.row(0).data(), dim);
    for (std::size_t c = 1; c < protos.class_ids.size(); ++c) {
        double sq = squared_distance(query.data(), protos.prototypes.row(static_cast<Eigen::Index>(c)).data(), dim);
        if (sq < best_sq) {
            best_sq = sq;
            best = c;
        }
    }
    return {protos.class_ids[best], std::sqrt(best_sq)};
}

Matrix episode_logits(const Matrix& queries, const PrototypeSet& protos) {
    if (queries.cols() != protos.prototypes.cols()) {
        throw ShapeError(fmt::format("episode_logits: query dimension {} != prototype dimension {}",
                                     queries.cols(), protos.prototypes.cols()));
    }
    const auto dim = static_cast<std::size_t>(queries.cols());
    Matrix logits(queries.rows(), protos.prototypes.rows());
    for (Eigen::Index i = 0; i < queries.rows(); ++i) {
        for (Eigen::Index c = 0; c < protos.prototypes.rows(); ++c) {
            logits(i, c) = -squared_distance(queries.row(i).data(), protos.prototypes.row(c).data(), dim);
        }
    }
    return logits;
}

// -- losses -----------------------------------------------------------------------

CrossEntropyResult cross_entropy(const Matrix& logits, std::span<const std::uint32_t> labels) {
    if (static_cast<std::size_t>(logits.rows()) != labels.size()) {
        throw ShapeError(fmt::format("cross_entropy: {} rows but {} labels", logits.rows(), labels.size()));
    }
    if (logits.rows() == 0) throw ShapeError("cross_entropy: empty batch");
    if (!logits.allFinite()) throw NumericError("cross_entropy: non-finite logits");

    const double n = static_cast<double>(logits.rows());
    CrossEntropyResult out;
    out.grad.resize(logits.rows(), logits.cols());
    double total = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        auto label = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]);
        if (label >= logits.cols()) {
            throw RangeError(fmt::format("cross_entropy: label {} out of range for {} classes", label,
                                         logits.cols()));
        }
        const double mx = logits.row(i).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index c = 0; c < logits.cols(); ++c) sum += std::exp(logits(i, c) - mx);
        const double log_z = mx + std::log(sum);
        total += log_z - logits(i, label);
        for (Eigen::Index c = 0; c < logits.cols(); ++c) {
            out.grad(i, c) = std::exp(logits(i, c) - log_z) / n;
        }
        out.grad(i, label) -= 1.0 / n;
    }
    out.loss = total / n;
    return out;
}

VerificationScore verification_score(double distance, double scale, double bias) {
    VerificationScore s;
    s.y_hat = logistic(scale * distance + bias);
    const double slope = s.y_hat * (1.0 - s.y_hat);
    s.d_distance = scale * slope;
    s.d_scale = distance * slope;
    s.d_bias = slope;
    return s;
}

VerificationScore verification_score(double distance, const HeadParams& params) {
    return verification_score(distance, params.verif_scale, params.verif_bias);
}

BceResult bce_loss(double y_hat, int y) {
    const double lo = kBceEpsilon;
    const double hi = 1.0 - kBceEpsilon;
    const double c = std::clamp(y_hat, lo, hi);
    const double t = static_cast<double>(y);
    BceResult r;
    r.loss = -(t * std::log(c) + (1.0 - t) * std::log(1.0 - c));
    r.grad = (y_hat >= lo && y_hat <= hi) ? (-t / c + (1.0 - t) / (1.0 - c)) : 0.0;
    return r;
}

}  // namespace fairproto
