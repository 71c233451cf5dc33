#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fairproto/embedding_store.hpp"
#include "fairproto/protonet.hpp"

namespace fairproto {

enum class Ablation { full, vit_only };

const char* to_string(Ablation ablation);
Ablation parse_ablation(const std::string& name);

/// One-vs-rest tallies per class over a multiclass prediction run.
struct ConfusionCounts {
    std::vector<std::uint32_t> class_ids;  // ascending
    std::vector<std::uint64_t> tp, fp, tn, fn;
    std::uint64_t total = 0;

    static ConfusionCounts tally(std::span<const std::uint32_t> class_ids, std::span<const std::uint32_t> truth,
                                 std::span<const std::uint32_t> predicted);

    std::uint64_t correct() const;
};

struct QueryOutcome {
    std::uint32_t truth = 0;
    std::uint32_t predicted = 0;
    double distance = 0.0;
};

struct AssignmentResult {
    int shot = 0;
    std::vector<QueryOutcome> predictions;
    ConfusionCounts counts;
};

/// Raw (un-embedded) features with class labels, one sample per row.
struct LabeledBatch {
    Matrix features;
    std::vector<std::uint32_t> labels;
};

/// Width of each feature block in the manifest the batches came from.
struct BlockLayout {
    std::uint32_t dim_vit = 0;
    std::uint32_t dim_resnet = 0;
};

/// Adapts raw features to the head's input width. vit_only zeroes the
/// ResNet block for a fused-width head, or drops it for a ViT-width head.
/// Throws ValidationError when the widths cannot be reconciled.
Matrix prepare_features(const Matrix& raw, const BlockLayout& layout, std::uint32_t head_input, Ablation ablation);

/// Eval-mode embedding -> prototypes -> nearest-prototype classification.
AssignmentResult run_assignment(const LabeledBatch& support, const LabeledBatch& query, const HeadParams& params,
                                Ablation ablation, const BlockLayout& layout);

/// Same as run_assignment for inputs that are already embedded.
AssignmentResult classify_embedded(const Matrix& support, std::span<const std::uint32_t> support_labels,
                                   const Matrix& query, std::span<const std::uint32_t> query_labels);

struct Metrics {
    double accuracy = 0.0;
    double precision = 0.0;  // macro; classes with no positive predictions count as 0
    double recall = 0.0;     // macro
};

Metrics metrics(const ConfusionCounts& counts);

/// Per class, TAR = TN / (FP + TN) and FAR = FP / (FP + TN). Empty when
/// FP + TN == 0.
struct AuthenticationRates {
    double tar = 0.0;
    double far = 0.0;
};

std::vector<std::optional<AuthenticationRates>> tar_far(const ConfusionCounts& counts);

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // population (divisor N)
};

MeanStd aggregate_trials(std::span<const double> values);

struct ProtocolConfig {
    std::vector<int> shots{1, 3, 5};
    int assignments = 5;
    int trials = 10;
    int queries_per_class = 10;
    Ablation ablation = Ablation::full;
    std::uint64_t seed = 0;
    std::string backbone;   // report label
    unsigned threads = 0;   // 0: hardware concurrency
};

struct ClassRates {
    std::uint32_t class_id = 0;
    std::string class_name;
    std::optional<double> tar_mean;
    std::optional<double> far_mean;
};

struct ShotReport {
    std::string category;
    std::string backbone;
    int shot = 0;
    MeanStd accuracy;
    MeanStd precision;
    MeanStd recall;
    std::vector<Metrics> trial_metrics;  // one per trial, averaged over assignments
    std::vector<ClassRates> classes;
    int trials = 0;
    int assignments = 0;
    std::vector<std::uint64_t> assignment_queries;  // query tally per (trial, assignment), trial-major
};

struct EvalReport {
    std::vector<ShotReport> entries;  // category-major, then shot
};

/// Seed handed to nested_support_query for one assignment of one trial.
std::uint64_t assignment_seed(std::uint64_t seed, const std::string& category, int trial, int assignment);

/// Per category task and trial: `assignments` draws of nested supports and
/// static queries; every shot is scored on each draw. Trial values are the
/// assignment means; the report holds mean +- std across trials.
EvalReport run_protocol(const DatasetManifest& manifest, const HeadParams& params, const ProtocolConfig& config);

}  // namespace fairproto
