#include "fairproto/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <map>
#include <mutex>
#include <thread>

#include <fmt/format.h>

#include "fairproto/error.hpp"
#include "fairproto/rng.hpp"
#include "fairproto/trainer.hpp"

namespace fairproto {

const char* to_string(Ablation ablation) {
    return ablation == Ablation::full ? "full" : "vit_only";
}

Ablation parse_ablation(const std::string& name) {
    if (name == "full") return Ablation::full;
    if (name == "vit_only") return Ablation::vit_only;
    throw UsageError("unknown ablation mode '" + name + "' (full, vit_only)");
}

ConfusionCounts ConfusionCounts::tally(std::span<const std::uint32_t> class_ids, std::span<const std::uint32_t> truth,
                                       std::span<const std::uint32_t> predicted) {
    if (truth.size() != predicted.size()) throw ShapeError("tally: truth and prediction counts differ");
    ConfusionCounts c;
    c.class_ids.assign(class_ids.begin(), class_ids.end());
    std::sort(c.class_ids.begin(), c.class_ids.end());
    const auto k = c.class_ids.size();
    c.tp.assign(k, 0);
    c.fp.assign(k, 0);
    c.tn.assign(k, 0);
    c.fn.assign(k, 0);
    c.total = truth.size();
    for (std::size_t j = 0; j < k; ++j) {
        const auto id = c.class_ids[j];
        for (std::size_t i = 0; i < truth.size(); ++i) {
            const bool is = truth[i] == id;
            const bool said = predicted[i] == id;
            if (is && said) {
                ++c.tp[j];
            } else if (said) {
                ++c.fp[j];
            } else if (is) {
                ++c.fn[j];
            } else {
                ++c.tn[j];
            }
        }
    }
    return c;
}

std::uint64_t ConfusionCounts::correct() const {
    std::uint64_t s = 0;
    for (auto v : tp) s += v;
    return s;
}

Matrix prepare_features(const Matrix& raw, const BlockLayout& layout, std::uint32_t head_input, Ablation ablation) {
    const std::uint32_t total = layout.dim_vit + layout.dim_resnet;
    if (raw.cols() != total) throw ShapeError("prepare_features: feature width does not match block layout");
    if (head_input == total) {
        if (ablation == Ablation::vit_only && layout.dim_resnet > 0) {
            Matrix out = raw;
            out.rightCols(layout.dim_resnet).setZero();
            return out;
        }
        return raw;
    }
    if (ablation == Ablation::vit_only && head_input == layout.dim_vit) {
        return raw.leftCols(layout.dim_vit);
    }
    throw ValidationError(fmt::format("checkpoint expects {} input features but the manifest provides {} ({} ViT + {} ResNet)",
                                      head_input, total, layout.dim_vit, layout.dim_resnet));
}

AssignmentResult classify_embedded(const Matrix& support, std::span<const std::uint32_t> support_labels,
                                   const Matrix& query, std::span<const std::uint32_t> query_labels) {
    if (static_cast<std::size_t>(query.rows()) != query_labels.size()) {
        throw ShapeError("classify_embedded: query rows and labels differ");
    }
    auto protos = compute_prototypes(support, support_labels);
    for (auto l : query_labels) {
        if (!std::binary_search(protos.class_ids.begin(), protos.class_ids.end(), l)) {
            throw ValidationError(fmt::format("query class {} has no support samples", l));
        }
    }
    AssignmentResult result;
    std::vector<std::uint32_t> predicted;
    predicted.reserve(query_labels.size());
    for (Eigen::Index i = 0; i < query.rows(); ++i) {
        auto p = classify({query.row(i).data(), static_cast<std::size_t>(query.cols())}, protos);
        result.predictions.push_back({query_labels[static_cast<std::size_t>(i)], p.class_id, p.distance});
        predicted.push_back(p.class_id);
    }
    result.counts = ConfusionCounts::tally(protos.class_ids, query_labels, predicted);
    return result;
}

AssignmentResult run_assignment(const LabeledBatch& support, const LabeledBatch& query, const HeadParams& params,
                                Ablation ablation, const BlockLayout& layout) {
    const auto input = params.dims().input;
    auto zs = head_forward(params, prepare_features(support.features, layout, input, ablation), Mode::eval, nullptr).z;
    auto zq = head_forward(params, prepare_features(query.features, layout, input, ablation), Mode::eval, nullptr).z;
    auto result = classify_embedded(zs, support.labels, zq, query.labels);
    std::map<std::uint32_t, int> per_class;
    for (auto l : support.labels) ++per_class[l];
    result.shot = per_class.empty() ? 0 : per_class.begin()->second;
    return result;
}

Metrics metrics(const ConfusionCounts& counts) {
    if (counts.total == 0) throw ValidationError("metrics: no queries");
    Metrics m;
    m.accuracy = static_cast<double>(counts.correct()) / static_cast<double>(counts.total);
    const auto k = counts.class_ids.size();
    if (k == 0) return m;
    double p = 0.0;
    double r = 0.0;
    bool balanced = true;
    std::uint64_t tp_sum = 0;
    for (std::size_t j = 0; j < k; ++j) {
        const auto predicted = counts.tp[j] + counts.fp[j];
        const auto actual = counts.tp[j] + counts.fn[j];
        if (predicted > 0) p += static_cast<double>(counts.tp[j]) / static_cast<double>(predicted);
        if (actual > 0) r += static_cast<double>(counts.tp[j]) / static_cast<double>(actual);
        balanced = balanced && actual > 0 && actual == counts.tp[0] + counts.fn[0];
        tp_sum += counts.tp[j];
    }
    m.precision = p / static_cast<double>(k);
    m.recall = r / static_cast<double>(k);
    // Equal class sizes share one denominator; summing integers first keeps
    // recall bit-identical to accuracy instead of off by rounding.
    if (balanced) {
        m.recall = static_cast<double>(tp_sum) /
                   (static_cast<double>(counts.tp[0] + counts.fn[0]) * static_cast<double>(k));
    }
    return m;
}

std::vector<std::optional<AuthenticationRates>> tar_far(const ConfusionCounts& counts) {
    std::vector<std::optional<AuthenticationRates>> out;
    out.reserve(counts.class_ids.size());
    for (std::size_t j = 0; j < counts.class_ids.size(); ++j) {
        const auto negatives = counts.fp[j] + counts.tn[j];
        if (negatives == 0) {
            out.emplace_back();
            continue;
        }
        const double n = static_cast<double>(negatives);
        out.push_back(AuthenticationRates{static_cast<double>(counts.tn[j]) / n, static_cast<double>(counts.fp[j]) / n});
    }
    return out;
}

MeanStd aggregate_trials(std::span<const double> values) {
    if (values.empty()) throw ValidationError("aggregate_trials: empty list");
    const double n = static_cast<double>(values.size());
    double sum = 0.0;
    for (double v : values) sum += v;
    const double mean = sum / n;
    double sq = 0.0;
    for (double v : values) sq += (v - mean) * (v - mean);
    return {mean, std::sqrt(sq / n)};
}

namespace {

struct RateAccumulator {
    double tar_sum = 0.0;
    double far_sum = 0.0;
    std::uint64_t n = 0;
};

// Results of one trial for every shot.
struct TrialOutcome {
    std::vector<Metrics> per_shot;
    std::vector<std::map<std::uint32_t, RateAccumulator>> rates;
    std::vector<std::vector<std::uint64_t>> queries;  // per shot, per assignment
};

unsigned resolve_threads(unsigned requested, int trials) {
    unsigned n = requested == 0 ? std::max(1u, std::thread::hardware_concurrency()) : requested;
    return std::max(1u, std::min<unsigned>(n, static_cast<unsigned>(trials)));
}

}  // namespace

std::uint64_t assignment_seed(std::uint64_t seed, const std::string& category, int trial, int assignment) {
    const auto trial_seed = derive_seed(seed, "protocol:" + category, static_cast<std::uint64_t>(trial));
    return derive_seed(trial_seed, "assignment", static_cast<std::uint64_t>(assignment));
}

EvalReport run_protocol(const DatasetManifest& manifest, const HeadParams& params, const ProtocolConfig& config) {
    if (config.trials < 1) throw UsageError("trials must be >= 1");
    if (config.assignments < 1) throw UsageError("assignments must be >= 1");

    const BlockLayout layout{manifest.dim_vit, manifest.dim_resnet};
    const auto input = params.dims().input;
    EvalReport report;

    for (const auto& task : category_tasks(manifest)) {
        const DatasetManifest sub = subset(manifest, task.record_indices);
        // Eval mode embeds rows independently, so the whole task is embedded once.
        const Matrix z =
            head_forward(params, prepare_features(feature_matrix(sub), layout, input, config.ablation), Mode::eval,
                         nullptr)
                .z;

        const std::size_t n_shots = config.shots.size();
        std::vector<TrialOutcome> trials(static_cast<std::size_t>(config.trials));

        auto run_trial = [&](int t) {
            TrialOutcome out;
            out.per_shot.assign(n_shots, Metrics{});
            out.rates.resize(n_shots);
            out.queries.resize(n_shots);
            for (int a = 0; a < config.assignments; ++a) {
                auto sets = nested_support_query(sub, config.shots, config.queries_per_class,
                                                 assignment_seed(config.seed, task.name, t, a));
                for (std::size_t s = 0; s < n_shots; ++s) {
                    const auto& set = sets[s];
                    Matrix zs(static_cast<Eigen::Index>(set.support.size()), z.cols());
                    Matrix zq(static_cast<Eigen::Index>(set.query.size()), z.cols());
                    std::vector<std::uint32_t> ls, lq;
                    for (std::size_t i = 0; i < set.support.size(); ++i) {
                        zs.row(static_cast<Eigen::Index>(i)) = z.row(static_cast<Eigen::Index>(set.support[i]));
                        ls.push_back(sub.records[set.support[i]].class_id);
                    }
                    for (std::size_t i = 0; i < set.query.size(); ++i) {
                        zq.row(static_cast<Eigen::Index>(i)) = z.row(static_cast<Eigen::Index>(set.query[i]));
                        lq.push_back(sub.records[set.query[i]].class_id);
                    }
                    auto result = classify_embedded(zs, ls, zq, lq);
                    out.queries[s].push_back(result.counts.total);
                    auto m = metrics(result.counts);
                    out.per_shot[s].accuracy += m.accuracy;
                    out.per_shot[s].precision += m.precision;
                    out.per_shot[s].recall += m.recall;
                    auto rates = tar_far(result.counts);
                    for (std::size_t j = 0; j < rates.size(); ++j) {
                        if (!rates[j]) continue;
                        auto& acc = out.rates[s][result.counts.class_ids[j]];
                        acc.tar_sum += rates[j]->tar;
                        acc.far_sum += rates[j]->far;
                        ++acc.n;
                    }
                }
            }
            const double na = static_cast<double>(config.assignments);
            for (auto& m : out.per_shot) {
                m.accuracy /= na;
                m.precision /= na;
                m.recall /= na;
            }
            trials[static_cast<std::size_t>(t)] = std::move(out);
        };

        const unsigned workers = resolve_threads(config.threads, config.trials);
        if (workers == 1) {
            for (int t = 0; t < config.trials; ++t) run_trial(t);
        } else {
            std::exception_ptr failure;
            std::mutex failure_mutex;
            std::vector<std::thread> pool;
            for (unsigned w = 0; w < workers; ++w) {
                pool.emplace_back([&, w] {
                    try {
                        for (int t = static_cast<int>(w); t < config.trials; t += static_cast<int>(workers)) run_trial(t);
                    } catch (...) {
                        std::lock_guard lock(failure_mutex);
                        if (!failure) failure = std::current_exception();
                    }
                });
            }
            for (auto& th : pool) th.join();
            if (failure) std::rethrow_exception(failure);
        }

        for (std::size_t s = 0; s < n_shots; ++s) {
            ShotReport entry;
            entry.category = task.name;
            entry.backbone = config.backbone;
            entry.shot = config.shots[s];
            entry.trials = config.trials;
            entry.assignments = config.assignments;
            for (const auto& t : trials) {
                entry.assignment_queries.insert(entry.assignment_queries.end(), t.queries[s].begin(),
                                                t.queries[s].end());
            }
            std::vector<double> acc, prec, rec;
            std::map<std::uint32_t, RateAccumulator> rates;
            for (const auto& t : trials) {
                entry.trial_metrics.push_back(t.per_shot[s]);
                acc.push_back(t.per_shot[s].accuracy);
                prec.push_back(t.per_shot[s].precision);
                rec.push_back(t.per_shot[s].recall);
                for (const auto& [id, r] : t.rates[s]) {
                    auto& into = rates[id];
                    into.tar_sum += r.tar_sum;
                    into.far_sum += r.far_sum;
                    into.n += r.n;
                }
            }
            entry.accuracy = aggregate_trials(acc);
            entry.precision = aggregate_trials(prec);
            entry.recall = aggregate_trials(rec);
            for (const auto& [id, name] : sub.class_table) {
                ClassRates cr;
                cr.class_id = id;
                cr.class_name = name;
                auto it = rates.find(id);
                if (it != rates.end() && it->second.n > 0) {
                    cr.tar_mean = it->second.tar_sum / static_cast<double>(it->second.n);
                    cr.far_mean = it->second.far_sum / static_cast<double>(it->second.n);
                }
                entry.classes.push_back(std::move(cr));
            }
            report.entries.push_back(std::move(entry));
        }
    }
    return report;
}

}  // namespace fairproto
