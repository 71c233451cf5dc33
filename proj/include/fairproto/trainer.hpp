#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "fairproto/embedding_store.hpp"
#include "fairproto/error.hpp"
#include "fairproto/optim.hpp"
#include "fairproto/protonet.hpp"
#include "fairproto/rng.hpp"

namespace fairproto {

enum class Objective { prototypical_ce, pairwise_bce, sum_both };

const char* to_string(Objective objective);
Objective parse_objective(const std::string& name);

struct EpisodeConfig {
    std::uint32_t k_min = 5;
    std::uint32_t k_max = 8;
    std::uint32_t n_min = 1;
    std::uint32_t n_max = 5;
    std::uint32_t q_train = 5;
    std::uint32_t episodes = 250;
    std::uint32_t mini_epochs = 25;
    Objective objective = Objective::prototypical_ce;
    std::uint32_t patience = 20;
    double min_delta = 1e-4;
    std::uint32_t val_episodes = 10;
    std::uint64_t seed = 0;

    /// Throws UsageError on inconsistent bounds.
    void validate() const;
};

struct TrainConfig {
    EpisodeConfig episode;
    std::uint32_t hidden = 512;
    std::uint32_t output = 256;
    double dropout = kDefaultDropout;
    double l2 = kDefaultL2;
    double lr_max = 1e-4;
    double lr_min = 1e-6;
    double clip = 1.0;
};

/// One k-way n-shot task. Record indices are grouped by class in class_ids
/// order (ascending).
struct Episode {
    std::vector<std::uint32_t> class_ids;
    std::uint32_t shots = 0;
    std::vector<std::size_t> support;
    std::vector<std::size_t> query;
    std::vector<std::uint32_t> support_labels;  // class ids, parallel to support
    std::vector<std::uint32_t> query_labels;

    std::uint32_t ways() const { return static_cast<std::uint32_t>(class_ids.size()); }
};

/// k ~ U{k_min..min(k_max, eligible)}, n ~ U{n_min..n_max}; classes and
/// records drawn without replacement from `split`. A class is eligible when
/// it holds at least n_max + q_train records in the split. Throws
/// CapacityError when fewer than k_min classes are eligible.
Episode sample_episode(const DatasetManifest& manifest, const EpisodeConfig& config, Rng& rng,
                       Split split = Split::train);

/// Every manifest vector as one row, widened to double.
Matrix feature_matrix(const DatasetManifest& manifest);

struct EpisodeLoss {
    double data_loss = 0.0;   // objective value without the L2 term
    double l2 = 0.0;          // lambda * (|W1|^2 + |W2|^2)
    double total() const { return data_loss + l2; }
    HeadGrads grads;          // d total / d params; empty unless requested
    ForwardCache cache;
};

/// Embeds support and query rows in one batch, then:
///   prototypical_ce  prototypes -> logits (-d^2) -> cross entropy
///   pairwise_bce     every support/query pair -> dissimilarity score -> mean BCE
///   sum_both         the unweighted sum
EpisodeLoss episode_loss(const Episode& episode, const Matrix& features, const HeadParams& params,
                         Objective objective, Mode mode, Rng* rng, bool with_grads = true);

struct StepRecord {
    std::uint64_t step = 0;
    std::uint32_t episode = 0;
    std::uint32_t mini_epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;  // data loss, without the L2 term
    double grad_norm = 0.0;   // before clipping
    double clipped_norm = 0.0;
};

enum class StopReason { completed, early_stopped };

struct TrainHistory {
    std::vector<StepRecord> steps;
    std::vector<double> val_losses;  // one per finished episode
    std::vector<std::pair<std::uint32_t, std::uint32_t>> episode_shapes;  // (k, n)
    StopReason stop_reason = StopReason::completed;
    std::uint32_t best_episode = 0;
    double best_val_loss = std::numeric_limits<double>::infinity();

    /// step, episode, mini_epoch, lr, train_loss, val_loss
    std::string to_csv() const;
};

struct TrainResult {
    HeadParams params;     // best-validation snapshot
    AdamState optimizer;   // optimizer state at that snapshot
    TrainHistory history;
};

/// Raised when training stops on a capacity or numeric failure; carries the
/// history recorded so far.
class TrainingAborted : public Error {
public:
    TrainingAborted(ErrorKind kind, const std::string& what, TrainHistory history)
        : Error(kind, what), history_(std::move(history)) {}

    const TrainHistory& history() const noexcept { return history_; }

private:
    TrainHistory history_;
};

/// Mean eval-mode episode loss (data loss) over the given episodes.
double validation_loss(const std::vector<Episode>& episodes, const Matrix& features, const HeadParams& params,
                       Objective objective);

/// Samples config.val_episodes episodes from the val split with `rng` and
/// returns their mean eval-mode loss.
double validate(const DatasetManifest& manifest, const HeadParams& params, const EpisodeConfig& config, Rng& rng);

/// Episodic meta-training: per episode, mini_epochs updates of
/// loss -> clip -> Adam at the cosine learning rate, then validation on a
/// frozen episode set with early stopping.
TrainResult train(const DatasetManifest& manifest, const TrainConfig& config);

}  // namespace fairproto
