#include "fairproto/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include <fmt/format.h>

namespace fairproto {

const char* to_string(Objective objective) {
    switch (objective) {
        case Objective::prototypical_ce: return "prototypical_ce";
        case Objective::pairwise_bce: return "pairwise_bce";
        case Objective::sum_both: return "sum_both";
    }
    return "?";
}

Objective parse_objective(const std::string& name) {
    if (name == "prototypical_ce") return Objective::prototypical_ce;
    if (name == "pairwise_bce") return Objective::pairwise_bce;
    if (name == "sum_both") return Objective::sum_both;
    throw UsageError("unknown objective '" + name + "' (prototypical_ce, pairwise_bce, sum_both)");
}

void EpisodeConfig::validate() const {
    if (k_min < 2 || k_min > k_max) throw UsageError("need 2 <= k_min <= k_max");
    if (n_min < 1 || n_min > n_max) throw UsageError("need 1 <= n_min <= n_max");
    if (q_train < 1) throw UsageError("q_train must be >= 1");
    if (episodes < 1) throw UsageError("episodes must be >= 1");
    if (mini_epochs < 1) throw UsageError("mini_epochs must be >= 1");
    if (val_episodes < 1) throw UsageError("val_episodes must be >= 1");
    if (!(min_delta >= 0.0)) throw UsageError("min_delta must be >= 0");
}

Episode sample_episode(const DatasetManifest& manifest, const EpisodeConfig& config, Rng& rng, Split split) {
    auto groups = records_by_class(manifest, split);
    const std::size_t need = config.n_max + config.q_train;
    std::vector<std::uint32_t> eligible;
    for (const auto& [id, recs] : groups) {
        if (recs.size() >= need) eligible.push_back(id);
    }
    if (eligible.size() < config.k_min) {
        std::string short_class;
        for (const auto& [id, name] : manifest.class_table) {
            if (groups[id].size() < need) {
                short_class = name;
                break;
            }
        }
        throw CapacityError(fmt::format("{} split has {} classes with >= {} records, need {}", to_string(split),
                                        eligible.size(), need, config.k_min),
                            short_class);
    }

    const auto k_hi = std::min<std::size_t>(config.k_max, eligible.size());
    std::uniform_int_distribution<std::uint32_t> pick_k(config.k_min, static_cast<std::uint32_t>(k_hi));
    std::uniform_int_distribution<std::uint32_t> pick_n(config.n_min, config.n_max);
    const auto k = pick_k(rng);
    const auto n = pick_n(rng);

    std::shuffle(eligible.begin(), eligible.end(), rng);
    eligible.resize(k);
    std::sort(eligible.begin(), eligible.end());

    Episode ep;
    ep.class_ids = eligible;
    ep.shots = n;
    for (auto id : ep.class_ids) {
        auto recs = groups[id];
        std::shuffle(recs.begin(), recs.end(), rng);
        for (std::uint32_t i = 0; i < n; ++i) {
            ep.support.push_back(recs[i]);
            ep.support_labels.push_back(id);
        }
        for (std::uint32_t i = 0; i < config.q_train; ++i) {
            ep.query.push_back(recs[n + i]);
            ep.query_labels.push_back(id);
        }
    }
    return ep;
}

Matrix feature_matrix(const DatasetManifest& manifest) {
    Matrix f(static_cast<Eigen::Index>(manifest.records.size()), manifest.dim_total());
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        const auto& v = manifest.records[i].vector;
        for (std::size_t j = 0; j < v.size(); ++j) {
            f(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v[j];
        }
    }
    return f;
}

EpisodeLoss episode_loss(const Episode& episode, const Matrix& features, const HeadParams& params,
                         Objective objective, Mode mode, Rng* rng, bool with_grads) {
    const auto n_support = static_cast<Eigen::Index>(episode.support.size());
    const auto n_query = static_cast<Eigen::Index>(episode.query.size());
    if (n_support == 0 || n_query == 0) throw ValidationError("episode_loss: empty support or query set");

    Matrix x(n_support + n_query, features.cols());
    for (Eigen::Index i = 0; i < n_support; ++i) x.row(i) = features.row(static_cast<Eigen::Index>(episode.support[i]));
    for (Eigen::Index i = 0; i < n_query; ++i) {
        x.row(n_support + i) = features.row(static_cast<Eigen::Index>(episode.query[i]));
    }

    auto fwd = head_forward(params, x, mode, rng);
    const Matrix& z = fwd.z;
    Matrix dz = Matrix::Zero(z.rows(), z.cols());
    EpisodeLoss out;
    double d_scale = 0.0;
    double d_bias = 0.0;

    if (objective == Objective::prototypical_ce || objective == Objective::sum_both) {
        Matrix zs = z.topRows(n_support);
        Matrix zq = z.bottomRows(n_query);
        auto protos = compute_prototypes(zs, episode.support_labels);
        std::map<std::uint32_t, std::uint32_t> index_of;
        for (std::size_t c = 0; c < protos.class_ids.size(); ++c) {
            index_of[protos.class_ids[c]] = static_cast<std::uint32_t>(c);
        }
        std::vector<std::uint32_t> labels;
        labels.reserve(episode.query_labels.size());
        for (auto id : episode.query_labels) {
            auto it = index_of.find(id);
            if (it == index_of.end()) throw ValidationError(fmt::format("episode_loss: query class {} has no support", id));
            labels.push_back(it->second);
        }
        auto ce = cross_entropy(episode_logits(zq, protos), labels);
        out.data_loss += ce.loss;

        if (with_grads) {
            // logits(i, c) = -|z_i - p_c|^2
            const Matrix& g = ce.grad;
            const Matrix& p = protos.prototypes;
            Vector row_sum = g.rowwise().sum();
            Vector col_sum = g.colwise().sum().transpose();
            dz.bottomRows(n_query) += -2.0 * (row_sum.asDiagonal() * zq - g * p);
            Matrix dp = 2.0 * (g.transpose() * zq - col_sum.asDiagonal() * p);
            std::vector<double> count(protos.class_ids.size(), 0.0);
            for (auto id : episode.support_labels) count[index_of[id]] += 1.0;
            for (Eigen::Index i = 0; i < n_support; ++i) {
                auto c = index_of[episode.support_labels[static_cast<std::size_t>(i)]];
                dz.row(i) += dp.row(c) / count[c];
            }
        }
    }

    if (objective == Objective::pairwise_bce || objective == Objective::sum_both) {
        const double pairs = static_cast<double>(n_support * n_query);
        double loss = 0.0;
        for (Eigen::Index s = 0; s < n_support; ++s) {
            for (Eigen::Index q = 0; q < n_query; ++q) {
                Eigen::RowVectorXd diff = z.row(s) - z.row(n_support + q);
                const double d = diff.norm();
                const int y = episode.support_labels[static_cast<std::size_t>(s)] ==
                                      episode.query_labels[static_cast<std::size_t>(q)]
                                  ? 0
                                  : 1;
                auto score = verification_score(d, params);
                auto bce = bce_loss(score.y_hat, y);
                loss += bce.loss;
                if (with_grads) {
                    const double upstream = bce.grad / pairs;
                    d_scale += upstream * score.d_scale;
                    d_bias += upstream * score.d_bias;
                    if (d > 0.0) {
                        Eigen::RowVectorXd unit = diff / d;
                        const double dd = upstream * score.d_distance;
                        dz.row(s) += dd * unit;
                        dz.row(n_support + q) -= dd * unit;
                    }
                }
            }
        }
        out.data_loss += loss / pairs;
    }

    if (!std::isfinite(out.data_loss)) throw NumericError("episode_loss: non-finite loss");
    out.l2 = l2_penalty(params);
    if (with_grads) {
        out.grads = head_backward(params, fwd.cache, dz).grads;
        out.grads.verif_scale = d_scale;
        out.grads.verif_bias = d_bias;
    }
    out.cache = std::move(fwd.cache);
    return out;
}

std::string TrainHistory::to_csv() const {
    std::string out = "step,episode,mini_epoch,lr,train_loss,val_loss\n";
    for (std::size_t i = 0; i < steps.size(); ++i) {
        const auto& s = steps[i];
        const bool boundary = i + 1 == steps.size() || steps[i + 1].episode != s.episode;
        std::string val;
        if (boundary && s.episode < val_losses.size()) val = fmt::format("{}", val_losses[s.episode]);
        out += fmt::format("{},{},{},{},{},{}\n", s.step, s.episode, s.mini_epoch, s.lr, s.train_loss, val);
    }
    return out;
}

double validation_loss(const std::vector<Episode>& episodes, const Matrix& features, const HeadParams& params,
                       Objective objective) {
    if (episodes.empty()) throw ValidationError("validation_loss: no episodes");
    double sum = 0.0;
    for (const auto& ep : episodes) {
        sum += episode_loss(ep, features, params, objective, Mode::eval, nullptr, false).data_loss;
    }
    return sum / static_cast<double>(episodes.size());
}

namespace {

std::vector<Episode> sample_set(const DatasetManifest& manifest, const EpisodeConfig& config, Rng& rng,
                                Split split, std::uint32_t count) {
    std::vector<Episode> set;
    set.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) set.push_back(sample_episode(manifest, config, rng, split));
    return set;
}

}  // namespace

double validate(const DatasetManifest& manifest, const HeadParams& params, const EpisodeConfig& config, Rng& rng) {
    auto set = sample_set(manifest, config, rng, Split::val, config.val_episodes);
    return validation_loss(set, feature_matrix(manifest), params, config.objective);
}

TrainResult train(const DatasetManifest& manifest, const TrainConfig& config) {
    const auto& ec = config.episode;
    ec.validate();
    if (!(config.clip > 0.0)) throw UsageError("clip must be positive");
    if (!(config.dropout >= 0.0 && config.dropout < 1.0)) throw UsageError("dropout must be in [0, 1)");
    if (!(config.lr_max > 0.0) || !(config.lr_min > 0.0) || config.lr_min > config.lr_max) {
        throw UsageError("need 0 < lr_min <= lr_max");
    }

    TrainHistory history;
    try {
        const Matrix features = feature_matrix(manifest);

        Rng init_rng = make_rng(ec.seed, "init");
        Rng sampler = make_rng(ec.seed, "sampler");
        Rng dropout = make_rng(ec.seed, "dropout");
        Rng val_rng = make_rng(ec.seed, "validation");

        HeadParams params = HeadParams::init({manifest.dim_total(), config.hidden, config.output}, init_rng);
        params.dropout_rate = config.dropout;
        params.l2_lambda = config.l2;
        AdamState adam = AdamState::for_params(params);
        const CosineSchedule schedule{config.lr_max, config.lr_min,
                                      static_cast<std::uint64_t>(ec.episodes) * ec.mini_epochs};

        const auto val_set = sample_set(manifest, ec, val_rng, Split::val, ec.val_episodes);

        TrainResult result{params, adam, {}};
        std::uint32_t stale = 0;
        std::uint64_t step = 0;
        for (std::uint32_t e = 0; e < ec.episodes; ++e) {
            const Episode ep = sample_episode(manifest, ec, sampler, Split::train);
            history.episode_shapes.emplace_back(ep.ways(), ep.shots);
            for (std::uint32_t m = 0; m < ec.mini_epochs; ++m, ++step) {
                const double lr = cosine_lr(schedule, step);
                auto loss = episode_loss(ep, features, params, ec.objective, Mode::train, &dropout);
                update_running_stats(params, loss.cache);
                const double pre = clip_grad_norm(loss.grads, config.clip);
                const double post = global_norm(grad_views(std::as_const(loss.grads)));
                adam_step(adam, params, loss.grads, lr);
                history.steps.push_back({step, e, m, lr, loss.data_loss, pre, post});
            }

            const double val = validation_loss(val_set, features, params, ec.objective);
            history.val_losses.push_back(val);
            if (val < history.best_val_loss - ec.min_delta) {
                history.best_val_loss = val;
                history.best_episode = e;
                result.params = params;
                result.optimizer = adam;
                stale = 0;
            } else if (++stale > ec.patience) {
                history.stop_reason = StopReason::early_stopped;
                break;
            }
        }
        result.history = std::move(history);
        return result;
    } catch (const TrainingAborted&) {
        throw;
    } catch (const Error& err) {
        throw TrainingAborted(err.kind(), err.what(), std::move(history));
    }
}

}  // namespace fairproto
