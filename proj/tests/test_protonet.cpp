#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "fairproto/error.hpp"
#include "fairproto/protonet.hpp"
#include "fairproto/trainer.hpp"
#include "oracles.hpp"

using namespace fairproto;

namespace {

HeadParams small_head(std::uint64_t seed, std::uint32_t in = 8, std::uint32_t hid = 6, std::uint32_t out = 4) {
    Rng rng(seed);
    auto p = HeadParams::init({in, hid, out}, rng);
    std::mt19937_64 g(seed + 100);
    std::normal_distribution<double> n(0.0, 0.3);
    // Move BN away from its fresh state so every term is exercised.
    for (auto* bn : {&p.bn1, &p.bn2}) {
        for (Eigen::Index i = 0; i < bn->gamma.size(); ++i) {
            bn->gamma(i) = 1.0 + n(g);
            bn->beta(i) = n(g);
            bn->running_mean(i) = n(g);
            bn->running_var(i) = 0.5 + std::abs(n(g));
        }
    }
    for (Eigen::Index i = 0; i < p.b1.size(); ++i) p.b1(i) = n(g);
    for (Eigen::Index i = 0; i < p.b2.size(); ++i) p.b2(i) = n(g);
    return p;
}

PrototypeSet protos_from(const oracle::Rows& rows) {
    PrototypeSet s;
    s.prototypes = oracle::to_matrix(rows);
    for (std::uint32_t c = 0; c < rows.size(); ++c) s.class_ids.push_back(c);
    return s;
}

}  // namespace

TEST(HeadForward, IdentityConfiguration) {
    HeadParams p;
    p.w1 = Matrix::Identity(5, 5);
    p.b1 = Vector::Zero(5);
    p.w2 = Matrix::Identity(5, 5);
    p.b2 = Vector::Zero(5);
    p.bn1 = BatchNormState::fresh(5);
    p.bn2 = BatchNormState::fresh(5);
    p.bn1.epsilon = 0.0;
    p.bn2.epsilon = 0.0;
    p.dropout_rate = 0.0;
    Matrix x(3, 5);
    x << 0, 1, 2, 3, 4, 0.5, 0.25, 7, 9, 1e-3, 10, 0, 0, 3, 2;
    auto z = head_forward(p, x, Mode::eval, nullptr).z;
    EXPECT_EQ(z, x);
}

TEST(HeadForward, EvalMatchesStraightLineOracle) {
    std::mt19937_64 g(5);
    for (int trial = 0; trial < 20; ++trial) {
        auto p = small_head(trial);
        Matrix x = oracle::random_matrix(7, 8, g);
        auto z = head_forward(p, x, Mode::eval, nullptr).z;
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            auto expected = oracle::head_eval(p, oracle::to_rows(x.row(i))[0]);
            for (Eigen::Index j = 0; j < z.cols(); ++j) EXPECT_NEAR(z(i, j), expected[std::size_t(j)], 1e-12);
        }
    }
}

TEST(HeadForward, EvalIsDeterministicAndRowIndependent) {
    std::mt19937_64 g(6);
    auto p = small_head(3);
    Matrix x = oracle::random_matrix(6, 8, g);
    auto a = head_forward(p, x, Mode::eval, nullptr).z;
    auto b = head_forward(p, x, Mode::eval, nullptr).z;
    EXPECT_EQ(a, b);
    Matrix single = x.row(2);
    EXPECT_TRUE(Matrix(a.row(2)).isApprox(head_forward(p, single, Mode::eval, nullptr).z, 1e-14));
}

TEST(HeadForward, RejectsWrongWidth) {
    auto p = small_head(1);
    Matrix x = Matrix::Zero(2, 7);
    EXPECT_THROW(head_forward(p, x, Mode::eval, nullptr), ShapeError);
}

TEST(HeadForward, TrainDropoutNeedsRng) {
    auto p = small_head(1);
    Matrix x = Matrix::Ones(3, 8);
    EXPECT_THROW(head_forward(p, x, Mode::train, nullptr), ValidationError);
}

TEST(HeadForward, SingleRowTrainUsesRunningStats) {
    auto p = small_head(2);
    p.dropout_rate = 0.0;
    std::mt19937_64 g(2);
    Matrix x = oracle::random_matrix(1, 8, g);
    Rng rng(1);
    auto train = head_forward(p, x, Mode::train, &rng).z;
    auto eval = head_forward(p, x, Mode::eval, nullptr).z;
    EXPECT_TRUE(train.isApprox(eval, 1e-14));
}

TEST(HeadForward, DropoutMaskIsInvertedScale) {
    auto p = small_head(4);
    p.dropout_rate = 0.2;
    std::mt19937_64 g(4);
    Matrix x = oracle::random_matrix(50, 8, g);
    Rng rng(9);
    auto fwd = head_forward(p, x, Mode::train, &rng);
    ASSERT_EQ(fwd.cache.dropout_mask.rows(), 50);
    for (Eigen::Index i = 0; i < fwd.cache.dropout_mask.size(); ++i) {
        double m = fwd.cache.dropout_mask.data()[i];
        EXPECT_TRUE(m == 0.0 || std::abs(m - 1.25) < 1e-15);
    }
}

TEST(HeadBackward, ZeroUpstreamLeavesOnlyL2) {
    auto p = small_head(7);
    std::mt19937_64 g(7);
    Matrix x = oracle::random_matrix(5, 8, g);
    Rng rng(7);
    auto fwd = head_forward(p, x, Mode::train, &rng);
    auto back = head_backward(p, fwd.cache, Matrix::Zero(5, 4));
    EXPECT_TRUE(back.grads.w1.isApprox(2.0 * p.l2_lambda * p.w1, 1e-15));
    EXPECT_TRUE(back.grads.w2.isApprox(2.0 * p.l2_lambda * p.w2, 1e-15));
    EXPECT_EQ(back.grads.b1.norm(), 0.0);
    EXPECT_EQ(back.grads.b2.norm(), 0.0);
    EXPECT_EQ(back.grads.gamma1.norm(), 0.0);
    EXPECT_EQ(back.grads.beta2.norm(), 0.0);
}

TEST(HeadBackward, DataTermIsHomogeneous) {
    auto p = small_head(8);
    std::mt19937_64 g(8);
    Matrix x = oracle::random_matrix(6, 8, g);
    Matrix up = oracle::random_matrix(6, 4, g);
    Rng rng(8);
    auto fwd = head_forward(p, x, Mode::train, &rng);
    auto once = head_backward(p, fwd.cache, up).grads;
    auto twice = head_backward(p, fwd.cache, 2.0 * up).grads;
    Matrix l2_1 = 2.0 * p.l2_lambda * p.w1;
    Matrix l2_2 = 2.0 * p.l2_lambda * p.w2;
    EXPECT_TRUE((twice.w1 - l2_1).isApprox(2.0 * (once.w1 - l2_1), 1e-12));
    EXPECT_TRUE((twice.w2 - l2_2).isApprox(2.0 * (once.w2 - l2_2), 1e-12));
    EXPECT_TRUE(twice.b1.isApprox(2.0 * once.b1, 1e-12));
    EXPECT_TRUE(twice.gamma2.isApprox(2.0 * once.gamma2, 1e-12));
}

TEST(HeadBackward, MatchesFiniteDifferencesWithInputGrad) {
    for (std::uint64_t seed : {11u, 12u, 13u}) {
        auto p = small_head(seed);
        std::mt19937_64 g(seed);
        Matrix x = oracle::random_matrix(9, 8, g);
        Matrix up = oracle::random_matrix(9, 4, g);
        // Linear readout of z keeps the check independent of any loss.
        auto loss = [&](const HeadParams& q, const Matrix& in) {
            Rng r(seed);
            auto z = head_forward(q, in, Mode::train, &r).z;
            return (z.array() * up.array()).sum() + l2_penalty(q);
        };
        Rng rng(seed);
        auto fwd = head_forward(p, x, Mode::train, &rng);
        auto back = head_backward(p, fwd.cache, up);
        EXPECT_LT(oracle::fd_check(p, back.grads, [&](const HeadParams& q) { return loss(q, x); }), 1e-4);

        double worst = 0.0;
        const double h = 1e-5;
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            for (Eigen::Index j = 0; j < x.cols(); ++j) {
                Matrix a = x, b = x;
                a(i, j) += h;
                b(i, j) -= h;
                worst = std::max(worst, oracle::rel_error(back.input_grad(i, j), (loss(p, a) - loss(p, b)) / (2 * h)));
            }
        }
        EXPECT_LT(worst, 1e-4);
    }
}

TEST(HeadBackward, RejectsMismatchedUpstream) {
    auto p = small_head(1);
    Matrix x = Matrix::Ones(3, 8);
    Rng rng(1);
    auto fwd = head_forward(p, x, Mode::train, &rng);
    EXPECT_THROW(head_backward(p, fwd.cache, Matrix::Zero(3, 5)), ShapeError);
    EXPECT_THROW(head_backward(p, fwd.cache, Matrix::Zero(2, 4)), ShapeError);
}

TEST(HeadBackward, EpisodeLossGradientsAllObjectives) {
    std::mt19937_64 g(21);
    Matrix features = oracle::random_matrix(5 * 5, 8, g);
    Episode ep;
    for (std::uint32_t c = 0; c < 5; ++c) {
        ep.class_ids.push_back(c);
        for (std::uint32_t s = 0; s < 2; ++s) {
            ep.support.push_back(c * 5 + s);
            ep.support_labels.push_back(c);
        }
        for (std::uint32_t q = 2; q < 5; ++q) {
            ep.query.push_back(c * 5 + q);
            ep.query_labels.push_back(c);
        }
    }
    ep.shots = 2;
    for (auto obj : {Objective::prototypical_ce, Objective::pairwise_bce, Objective::sum_both}) {
        auto p = small_head(21);
        p.verif_scale = 0.3;
        p.verif_bias = -1.0;
        auto loss = [&](const HeadParams& q) {
            Rng r(99);
            return episode_loss(ep, features, q, obj, Mode::train, &r, false).total();
        };
        Rng rng(99);
        auto analytic = episode_loss(ep, features, p, obj, Mode::train, &rng, true);
        EXPECT_LT(oracle::fd_check(p, analytic.grads, loss), 1e-4) << to_string(obj);
    }
}

TEST(Prototypes, ArithmeticMean) {
    Matrix e(3, 2);
    e << 1, 3, 3, 5, 7, 7;
    std::vector<std::uint32_t> labels{4, 4, 2};
    auto p = compute_prototypes(e, labels);
    ASSERT_EQ(p.class_ids, (std::vector<std::uint32_t>{2, 4}));
    EXPECT_EQ(p.prototypes(0, 0), 7.0);
    EXPECT_EQ(p.prototypes(1, 0), 2.0);
    EXPECT_EQ(p.prototypes(1, 1), 4.0);
}

TEST(Prototypes, SingleSupportIsExact) {
    std::mt19937_64 g(3);
    Matrix e = oracle::random_matrix(4, 16, g);
    std::vector<std::uint32_t> labels{0, 1, 2, 3};
    EXPECT_EQ(compute_prototypes(e, labels).prototypes, e);
}

TEST(Prototypes, NaiveMeanOracleAndPermutation) {
    std::mt19937_64 g(4);
    Matrix e = oracle::random_matrix(5, 16, g);
    std::vector<std::uint32_t> labels(5, 0);
    auto p = compute_prototypes(e, labels);
    for (Eigen::Index j = 0; j < 16; ++j) {
        double s = 0;
        for (Eigen::Index i = 0; i < 5; ++i) s += e(i, j);
        EXPECT_NEAR(p.prototypes(0, j), s / 5.0, 1e-12);
    }
    Matrix shuffled = e.colwise().reverse();
    auto q = compute_prototypes(shuffled, labels);
    EXPECT_LT((q.prototypes - p.prototypes).norm() / p.prototypes.norm(), 1e-10);
}

TEST(Prototypes, LabelCountMismatchThrows) {
    Matrix e = Matrix::Zero(3, 2);
    std::vector<std::uint32_t> labels{0, 1};
    EXPECT_ANY_THROW(compute_prototypes(e, labels));
}

TEST(Distance, Basics) {
    std::vector<double> o{0, 0}, p{3, 4};
    EXPECT_EQ(euclidean_distance(o, p), 5.0);
    EXPECT_EQ(euclidean_distance(p, p), 0.0);
    std::vector<double> bad{1, 2, 3};
    EXPECT_THROW(euclidean_distance(o, bad), ShapeError);
    std::mt19937_64 g(5);
    auto a = oracle::to_rows(oracle::random_matrix(1, 32, g))[0];
    auto b = oracle::to_rows(oracle::random_matrix(1, 32, g))[0];
    EXPECT_NEAR(euclidean_distance(a, b), std::sqrt(oracle::sq_dist(a, b)), 1e-12);
}

TEST(Classify, ZeroDistanceAndTies) {
    oracle::Rows rows{{0, 0}, {2, 0}, {5, 5}};
    auto protos = protos_from(rows);
    std::vector<double> on{5, 5};
    EXPECT_EQ(classify(on, protos).class_id, 2u);
    EXPECT_EQ(classify(on, protos).distance, 0.0);
    std::vector<double> mid{1, 0};
    EXPECT_EQ(classify(mid, protos).class_id, 0u);
    protos.class_ids = {3, 7, 9};
    EXPECT_EQ(classify(mid, protos).class_id, 3u);
}

TEST(Classify, BruteForceAndLogitArgmax) {
    std::mt19937_64 g(31);
    std::uniform_int_distribution<int> kd(1, 8), dimd(1, 16), nd(1, 5);
    for (int trial = 0; trial < 1000; ++trial) {
        const int k = kd(g), dim = dimd(g), n = nd(g);
        Matrix support = oracle::random_matrix(k * n, dim, g);
        std::vector<std::uint32_t> labels;
        for (int c = 0; c < k; ++c)
            for (int s = 0; s < n; ++s) labels.push_back(std::uint32_t(c));
        auto protos = compute_prototypes(support, labels);
        Matrix q = oracle::random_matrix(1, dim, g);
        auto expected = oracle::argmin_distance(oracle::to_rows(q)[0], oracle::to_rows(protos.prototypes));
        std::vector<double> qv(q.data(), q.data() + q.size());
        ASSERT_EQ(classify(qv, protos).class_id, expected);
        Eigen::Index arg = 0;
        episode_logits(q, protos).row(0).maxCoeff(&arg);
        ASSERT_EQ(std::size_t(arg), expected);
    }
}

TEST(Logits, ScaleBySquare) {
    std::mt19937_64 g(41);
    Matrix s = oracle::random_matrix(4, 6, g);
    std::vector<std::uint32_t> labels{0, 1, 2, 3};
    Matrix q = oracle::random_matrix(3, 6, g);
    auto base = episode_logits(q, compute_prototypes(s, labels));
    auto scaled = episode_logits(2.5 * q, compute_prototypes(2.5 * s, labels));
    EXPECT_TRUE(scaled.isApprox(6.25 * base, 1e-12));
    for (Eigen::Index i = 0; i < 3; ++i) {
        Eigen::Index a, b;
        base.row(i).maxCoeff(&a);
        scaled.row(i).maxCoeff(&b);
        EXPECT_EQ(a, b);
    }
    EXPECT_EQ(episode_logits(s.row(1), compute_prototypes(s, labels))(0, 1), 0.0);
}

TEST(CrossEntropy, UniformIsLnK) {
    Matrix logits = Matrix::Constant(4, 5, -3.0);
    std::vector<std::uint32_t> labels{0, 1, 2, 4};
    auto ce = cross_entropy(logits, labels);
    EXPECT_NEAR(ce.loss, std::log(5.0), 1e-12);
    EXPECT_NEAR(ce.loss, 1.60944, 1e-5);
}

TEST(CrossEntropy, LargeMarginIsStable) {
    Matrix logits = Matrix::Zero(2, 5);
    logits(0, 3) = 1000.0;
    logits(1, 0) = 1000.0;
    std::vector<std::uint32_t> labels{3, 0};
    auto ce = cross_entropy(logits, labels);
    EXPECT_TRUE(std::isfinite(ce.loss));
    EXPECT_LT(ce.loss, 1e-6);
    EXPECT_TRUE(ce.grad.allFinite());
}

TEST(CrossEntropy, LogSumExpOracleAndFiniteDifferences) {
    std::mt19937_64 g(51);
    Matrix logits = oracle::random_matrix(8, 5, g, 3.0);
    std::vector<std::uint32_t> labels{0, 1, 2, 3, 4, 0, 2, 4};
    auto ce = cross_entropy(logits, labels);
    auto ref = oracle::cross_entropy(oracle::to_rows(logits), labels);
    EXPECT_NEAR(ce.loss, ref.loss, 1e-10);
    double worst = 0.0;
    for (Eigen::Index i = 0; i < 8; ++i) {
        for (Eigen::Index j = 0; j < 5; ++j) {
            EXPECT_NEAR(ce.grad(i, j), ref.grad[std::size_t(i)][std::size_t(j)], 1e-10);
            Matrix a = logits, b = logits;
            a(i, j) += 1e-5;
            b(i, j) -= 1e-5;
            double num = (cross_entropy(a, labels).loss - cross_entropy(b, labels).loss) / 2e-5;
            worst = std::max(worst, oracle::rel_error(ce.grad(i, j), num));
        }
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(CrossEntropy, RejectsNonFiniteAndBadLabels) {
    Matrix logits = Matrix::Zero(1, 3);
    logits(0, 1) = std::numeric_limits<double>::quiet_NaN();
    std::vector<std::uint32_t> labels{0};
    EXPECT_THROW(cross_entropy(logits, labels), NumericError);
    std::vector<std::uint32_t> out_of_range{3};
    EXPECT_ANY_THROW(cross_entropy(Matrix::Zero(1, 3), out_of_range));
}

TEST(Verification, ScoreAndDerivatives) {
    EXPECT_EQ(verification_score(0.0, 1.0, 0.0).y_hat, 0.5);
    EXPECT_GT(verification_score(60.0, 1.0, 0.0).y_hat, 1.0 - 1e-12);
    EXPECT_LT(verification_score(1.0, 1.0, 0.0).y_hat, verification_score(1.5, 1.0, 0.0).y_hat);
    std::mt19937_64 g(61);
    std::uniform_real_distribution<double> u(0.0, 4.0);
    for (int i = 0; i < 50; ++i) {
        const double d = u(g), w = u(g) - 2.0, b = u(g) - 2.0, h = 1e-6;
        auto s = verification_score(d, w, b);
        auto f = [](double dd, double ww, double bb) { return 1.0 / (1.0 + std::exp(-(ww * dd + bb))); };
        EXPECT_NEAR(s.y_hat, f(d, w, b), 1e-15);
        EXPECT_LT(oracle::rel_error(s.d_scale, (f(d, w + h, b) - f(d, w - h, b)) / (2 * h)), 1e-6);
        EXPECT_LT(oracle::rel_error(s.d_bias, (f(d, w, b + h) - f(d, w, b - h)) / (2 * h)), 1e-6);
        EXPECT_LT(oracle::rel_error(s.d_distance, (f(d + h, w, b) - f(d - h, w, b)) / (2 * h)), 1e-6);
    }
}

TEST(Bce, KnownValues) {
    EXPECT_NEAR(bce_loss(0.5, 0).loss, std::log(2.0), 1e-15);
    EXPECT_NEAR(bce_loss(0.5, 1).loss, 0.69315, 1e-5);
    EXPECT_LE(bce_loss(1.0 - kBceEpsilon, 1).loss, 1.2e-7);
    EXPECT_TRUE(std::isfinite(bce_loss(0.0, 1).loss));
    EXPECT_EQ(bce_loss(0.0, 1).grad, 0.0);
    EXPECT_EQ(bce_loss(1.0, 0).grad, 0.0);
}

TEST(Bce, OracleAndFiniteDifferences) {
    std::mt19937_64 g(71);
    std::uniform_real_distribution<double> u(0.01, 0.99);
    std::bernoulli_distribution coin(0.5);
    for (int i = 0; i < 100; ++i) {
        const double y_hat = u(g);
        const int y = coin(g) ? 1 : 0;
        auto r = bce_loss(y_hat, y);
        EXPECT_NEAR(r.loss, -(y * std::log(y_hat) + (1 - y) * std::log(1 - y_hat)), 1e-12);
        const double h = 1e-6;
        double num = (bce_loss(y_hat + h, y).loss - bce_loss(y_hat - h, y).loss) / (2 * h);
        EXPECT_LT(oracle::rel_error(r.grad, num), 1e-6);
    }
}

TEST(Params, InitBoundsAndFinite) {
    Rng rng(3);
    auto p = HeadParams::init({20, 12, 6}, rng);
    const double lim1 = std::sqrt(6.0 / 32.0), lim2 = std::sqrt(6.0 / 18.0);
    EXPECT_LE(p.w1.cwiseAbs().maxCoeff(), lim1);
    EXPECT_LE(p.w2.cwiseAbs().maxCoeff(), lim2);
    EXPECT_EQ(p.b1.norm(), 0.0);
    EXPECT_EQ(p.bn2.running_var, Vector::Ones(6));
    EXPECT_NO_THROW(p.check_finite());
    p.w2(1, 1) = std::numeric_limits<double>::infinity();
    EXPECT_THROW(p.check_finite(), NumericError);
}

TEST(Params, RunningStatsFoldMomentum) {
    auto p = small_head(5);
    p.dropout_rate = 0.0;
    std::mt19937_64 g(5);
    Matrix x = oracle::random_matrix(10, 8, g);
    Rng rng(5);
    auto before = p.bn1.running_mean;
    auto fwd = head_forward(p, x, Mode::train, &rng);
    update_running_stats(p, fwd.cache);
    Matrix pre = (x * p.w1.transpose()).rowwise() + p.b1.transpose();
    Vector mean = pre.colwise().mean().transpose();
    EXPECT_TRUE(p.bn1.running_mean.isApprox(0.9 * before + 0.1 * mean, 1e-12));
    EXPECT_TRUE((p.bn1.running_var.array() >= 0.0).all());
}
