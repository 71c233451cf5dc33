#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "fairproto/checkpoint.hpp"
#include "fairproto/error.hpp"
#include "fairproto/trainer.hpp"

using namespace fairproto;

namespace {

TrainConfig small_config(std::uint64_t seed, std::uint32_t episodes = 6, std::uint32_t mini = 4) {
    TrainConfig c;
    c.hidden = 32;
    c.output = 16;
    c.episode.episodes = episodes;
    c.episode.mini_epochs = mini;
    c.episode.seed = seed;
    c.episode.patience = 1000;
    return c;
}

std::string checkpoint_bytes(const TrainResult& r) {
    std::ostringstream out(std::ios::binary);
    save_checkpoint(r.params, &r.optimizer, out);
    return out.str();
}

// Head that passes its input through unchanged: the hidden bias lifts
// everything above the ReLU kink and the output bias takes it back off.
HeadParams pass_through(std::uint32_t dim) {
    HeadParams p;
    p.w1 = Matrix::Identity(dim, dim);
    p.b1 = Vector::Constant(dim, 100.0);
    p.w2 = Matrix::Identity(dim, dim);
    p.b2 = Vector::Constant(dim, -100.0);
    p.bn1 = BatchNormState::fresh(dim);
    p.bn2 = BatchNormState::fresh(dim);
    p.bn1.epsilon = p.bn2.epsilon = 0.0;
    p.dropout_rate = 0.0;
    return p;
}

}  // namespace

TEST(Sampler, WaysAndShotsAreUniform) {
    auto m = synthesize_clusters(10, 40, 4, 5.0, 1);
    EpisodeConfig cfg;
    Rng rng(42);
    std::map<std::uint32_t, int> ways, shots;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        auto ep = sample_episode(m, cfg, rng);
        ways[ep.ways()]++;
        shots[ep.shots]++;
        ASSERT_GE(ep.ways(), 5u);
        ASSERT_LE(ep.ways(), 8u);
        ASSERT_GE(ep.shots, 1u);
        ASSERT_LE(ep.shots, 5u);
    }
    ASSERT_EQ(ways.size(), 4u);
    for (auto [k, c] : ways) EXPECT_NEAR(double(c) / n, 0.25, 0.02) << "k=" << k;
    ASSERT_EQ(shots.size(), 5u);
    for (auto [s, c] : shots) EXPECT_NEAR(double(c) / n, 0.20, 0.02) << "n=" << s;
}

TEST(Sampler, EveryWayShotPairOccurs) {
    auto m = synthesize_clusters(10, 40, 4, 5.0, 1);
    EpisodeConfig cfg;
    Rng rng(7);
    std::set<std::pair<std::uint32_t, std::uint32_t>> seen;
    for (int i = 0; i < 10000; ++i) {
        auto ep = sample_episode(m, cfg, rng);
        seen.insert({ep.ways(), ep.shots});
    }
    EXPECT_EQ(seen.size(), 20u);
}

TEST(Sampler, EpisodeInvariants) {
    auto m = synthesize_clusters(9, 40, 4, 5.0, 2);
    EpisodeConfig cfg;
    Rng rng(3);
    for (int i = 0; i < 500; ++i) {
        auto ep = sample_episode(m, cfg, rng);
        std::set<std::string> sup, qry;
        for (auto r : ep.support) {
            sup.insert(m.records[r].id);
            ASSERT_EQ(m.records[r].split, Split::train);
        }
        for (auto r : ep.query) qry.insert(m.records[r].id);
        ASSERT_EQ(sup.size(), ep.support.size());
        ASSERT_EQ(qry.size(), ep.query.size());
        for (const auto& id : sup) ASSERT_EQ(qry.count(id), 0u);
        ASSERT_EQ(ep.support.size(), ep.ways() * ep.shots);
        ASSERT_EQ(ep.query.size(), ep.ways() * cfg.q_train);
        std::map<std::uint32_t, int> per_class;
        for (std::size_t j = 0; j < ep.support.size(); ++j) {
            ASSERT_EQ(m.records[ep.support[j]].class_id, ep.support_labels[j]);
            per_class[ep.support_labels[j]]++;
        }
        for (auto [c, count] : per_class) ASSERT_EQ(count, int(ep.shots));
        ASSERT_TRUE(std::is_sorted(ep.class_ids.begin(), ep.class_ids.end()));
    }
}

TEST(Sampler, SameSeedSameSequence) {
    auto m = synthesize_clusters(9, 40, 4, 5.0, 2);
    EpisodeConfig cfg;
    Rng a(11), b(11);
    for (int i = 0; i < 50; ++i) {
        auto x = sample_episode(m, cfg, a);
        auto y = sample_episode(m, cfg, b);
        ASSERT_EQ(x.support, y.support);
        ASSERT_EQ(x.query, y.query);
    }
}

TEST(Sampler, CapacityErrors) {
    auto m = synthesize_clusters(4, 40, 4, 5.0, 2);
    EpisodeConfig cfg;
    Rng rng(1);
    EXPECT_THROW(sample_episode(m, cfg, rng), CapacityError);
    auto seven = synthesize_clusters(7, 40, 4, 5.0, 2);
    auto ep = sample_episode(seven, cfg, rng);
    EXPECT_LE(ep.ways(), 7u);
    auto thin = synthesize_clusters(8, 16, 4, 5.0, 2);  // 8 train records per class < 5 + 5
    EXPECT_THROW(sample_episode(thin, cfg, rng), CapacityError);
}

TEST(Config, ValidateRejectsBadBounds) {
    EpisodeConfig cfg;
    cfg.k_min = 9;
    EXPECT_THROW(cfg.validate(), UsageError);
    cfg = {};
    cfg.k_min = 1;
    EXPECT_THROW(cfg.validate(), UsageError);
    cfg = {};
    cfg.n_min = 0;
    EXPECT_THROW(cfg.validate(), UsageError);
    cfg = {};
    cfg.mini_epochs = 0;
    EXPECT_THROW(cfg.validate(), UsageError);
    EXPECT_EQ(parse_objective("sum_both"), Objective::sum_both);
    EXPECT_THROW(parse_objective("hinge"), UsageError);
}

TEST(EpisodeLoss, DegenerateFeaturesGiveLnK) {
    auto m = synthesize_clusters(8, 40, 4, 5.0, 2);
    for (auto& r : m.records) std::fill(r.vector.begin(), r.vector.end(), 0.5f);
    auto features = feature_matrix(m);
    EpisodeConfig cfg;
    Rng rng(5), init(5);
    auto p = HeadParams::init({4, 16, 8}, init);
    for (int i = 0; i < 20; ++i) {
        auto ep = sample_episode(m, cfg, rng);
        auto loss = episode_loss(ep, features, p, Objective::prototypical_ce, Mode::eval, nullptr, false);
        EXPECT_NEAR(loss.data_loss, std::log(double(ep.ways())), 1e-12);
    }
}

TEST(EpisodeLoss, FlatVerifierGivesLn2) {
    auto m = synthesize_clusters(8, 40, 4, 5.0, 2);
    auto features = feature_matrix(m);
    Rng rng(5), init(5);
    auto p = HeadParams::init({4, 16, 8}, init);
    p.verif_scale = 0.0;
    p.verif_bias = 0.0;
    auto ep = sample_episode(m, EpisodeConfig{}, rng);
    auto loss = episode_loss(ep, features, p, Objective::pairwise_bce, Mode::eval, nullptr, false);
    EXPECT_NEAR(loss.data_loss, std::log(2.0), 1e-12);
    auto both = episode_loss(ep, features, p, Objective::sum_both, Mode::eval, nullptr, false);
    auto ce = episode_loss(ep, features, p, Objective::prototypical_ce, Mode::eval, nullptr, false);
    EXPECT_NEAR(both.data_loss, ce.data_loss + std::log(2.0), 1e-12);
    EXPECT_NEAR(loss.l2, l2_penalty(p), 0.0);
}

TEST(EpisodeLoss, SeparatedClustersPassThroughHeadIsNearZero) {
    auto m = synthesize_clusters(7, 40, 16, 10.0, 3);
    auto features = feature_matrix(m);
    auto p = pass_through(16);
    EpisodeConfig cfg;
    cfg.n_min = cfg.n_max = 5;
    Rng rng(9);
    for (int i = 0; i < 20; ++i) {
        auto ep = sample_episode(m, cfg, rng);
        auto loss = episode_loss(ep, features, p, Objective::prototypical_ce, Mode::eval, nullptr, false);
        EXPECT_LT(loss.data_loss, 0.01);
    }
}

TEST(Train, HistoryShapeAndSchedule) {
    auto m = synthesize_clusters(7, 40, 8, 6.0, 4);
    auto cfg = small_config(4, 5, 3);
    auto r = train(m, cfg);
    const auto& h = r.history;
    ASSERT_EQ(h.steps.size(), 15u);
    ASSERT_EQ(h.val_losses.size(), 5u);
    EXPECT_EQ(h.stop_reason, StopReason::completed);
    CosineSchedule sched{cfg.lr_max, cfg.lr_min, 15};
    for (std::size_t i = 0; i < h.steps.size(); ++i) {
        EXPECT_EQ(h.steps[i].step, i);
        EXPECT_EQ(h.steps[i].episode, i / 3);
        EXPECT_EQ(h.steps[i].mini_epoch, i % 3);
        EXPECT_EQ(h.steps[i].lr, cosine_lr(sched, i));
        EXPECT_LE(h.steps[i].clipped_norm, 1.0 + 1e-12);
        EXPECT_NEAR(h.steps[i].clipped_norm, std::min(h.steps[i].grad_norm, 1.0), 1e-12);
    }
    for (auto [k, n] : h.episode_shapes) {
        EXPECT_GE(k, 5u);
        EXPECT_LE(k, 7u);
        EXPECT_GE(n, 1u);
        EXPECT_LE(n, 5u);
    }
    auto csv = h.to_csv();
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,episode,mini_epoch,lr,train_loss,val_loss");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 16);
}

TEST(Train, PatienceZeroStopsOnFirstNonImprovement) {
    auto m = synthesize_clusters(7, 40, 8, 6.0, 4);
    auto cfg = small_config(4, 40, 2);
    cfg.episode.patience = 0;
    auto r = train(m, cfg);
    const auto& h = r.history;
    EXPECT_EQ(h.stop_reason, StopReason::early_stopped);
    ASSERT_GE(h.val_losses.size(), 2u);
    for (std::size_t e = 1; e + 1 < h.val_losses.size(); ++e) {
        EXPECT_LT(h.val_losses[e], h.val_losses[e - 1] - cfg.episode.min_delta);
    }
    EXPECT_GE(h.val_losses.back(), h.best_val_loss - cfg.episode.min_delta);
    EXPECT_EQ(h.steps.size(), h.val_losses.size() * 2);
}

TEST(Train, EarlyStopReturnsBestSnapshot) {
    auto m = synthesize_clusters(7, 40, 8, 6.0, 4);
    auto cfg = small_config(8, 30, 3);
    cfg.episode.patience = 2;
    auto r = train(m, cfg);
    const auto& h = r.history;
    if (h.stop_reason == StopReason::early_stopped) {
        EXPECT_EQ(h.val_losses.size(), h.best_episode + 1 + 3);
    }
    EXPECT_EQ(r.optimizer.t, std::uint64_t(h.best_episode + 1) * 3);
    Rng vrng = make_rng(cfg.episode.seed, "validation");
    EXPECT_NEAR(validate(m, r.params, cfg.episode, vrng), h.best_val_loss, 1e-12);
}

TEST(Train, SameSeedByteIdenticalCheckpoints) {
    auto m = synthesize_clusters(7, 40, 8, 6.0, 5);
    auto a = train(m, small_config(5));
    auto b = train(m, small_config(5));
    EXPECT_EQ(checkpoint_bytes(a), checkpoint_bytes(b));
    EXPECT_EQ(a.history.to_csv(), b.history.to_csv());
    auto c = train(m, small_config(6));
    EXPECT_NE(checkpoint_bytes(a), checkpoint_bytes(c));
}

TEST(Train, CheckpointRoundTrip) {
    auto m = synthesize_clusters(7, 40, 8, 6.0, 5);
    auto r = train(m, small_config(5, 2, 2));
    auto bytes = checkpoint_bytes(r);
    std::istringstream in(bytes, std::ios::binary);
    auto ck = load_checkpoint(in);
    ASSERT_TRUE(ck.optimizer.has_value());
    EXPECT_EQ(*ck.optimizer, r.optimizer);
    std::ostringstream again(std::ios::binary);
    save_checkpoint(ck.params, &*ck.optimizer, again);
    EXPECT_EQ(again.str(), bytes);
    for (std::size_t cut = 0; cut < bytes.size(); cut += 7) {
        std::istringstream part(bytes.substr(0, cut), std::ios::binary);
        EXPECT_THROW(load_checkpoint(part), Error);
    }
}

TEST(Train, LossDropsOnSeparableData) {
    double first = 0.0, last = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        auto m = synthesize_clusters(7, 40, 8, 3.0, seed);
        auto cfg = small_config(seed, 30, 5);
        cfg.lr_max = 1e-3;
        auto r = train(m, cfg);
        const auto& s = r.history.steps;
        for (int i = 0; i < 5; ++i) {
            first += s[std::size_t(i)].train_loss;
            last += s[s.size() - 1 - std::size_t(i)].train_loss;
        }
    }
    EXPECT_LT(last, first);
}

TEST(Validate, BoundsRepeatabilityAndImprovement) {
    auto m = synthesize_clusters(8, 40, 8, 10.0, 6);
    auto cfg = small_config(6, 20, 5);
    cfg.lr_max = 1e-3;
    Rng init = make_rng(6, "init");
    auto untrained = HeadParams::init({8, 32, 16}, init);
    Rng v1(3), v2(3);
    const double before = validate(m, untrained, cfg.episode, v1);
    EXPECT_EQ(before, validate(m, untrained, cfg.episode, v2));
    EXPECT_LE(before, std::log(8.0) + 0.5);

    auto trained = train(m, cfg);
    Rng v3(3);
    EXPECT_LT(validate(m, trained.params, cfg.episode, v3), before);
}

TEST(Train, NumericFailureKeepsHistory) {
    auto m = synthesize_clusters(7, 40, 4, 5.0, 7);
    auto cfg = small_config(7, 5, 2);
    cfg.lr_max = 1e306;
    cfg.lr_min = 1e305;
    try {
        train(m, cfg);
        FAIL() << "expected an abort";
    } catch (const TrainingAborted& e) {
        EXPECT_EQ(e.kind(), ErrorKind::numeric);
        EXPECT_LE(e.history().steps.size(), 10u);
    }
}

TEST(Train, CapacityFailureIsReported) {
    auto m = synthesize_clusters(4, 40, 4, 5.0, 7);
    try {
        train(m, small_config(1));
        FAIL();
    } catch (const TrainingAborted& e) {
        EXPECT_EQ(e.kind(), ErrorKind::capacity);
    } catch (const CapacityError&) {
    }
}
