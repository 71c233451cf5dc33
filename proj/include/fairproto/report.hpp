#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "fairproto/evaluator.hpp"

namespace fairproto {

/// One (category, backbone, shot, metric) cell; mean and std are fractions.
struct MetricRow {
    std::string category;
    std::string backbone;
    int shot = 0;
    std::string metric;  // accuracy | precision | recall
    double mean = 0.0;
    double std = 0.0;

    bool operator==(const MetricRow&) const = default;
};

std::vector<MetricRow> metric_rows(const EvalReport& report);

/// category,backbone,shot,metric,mean,std
std::string metrics_csv(const std::vector<MetricRow>& rows);

/// Inverse of metrics_csv. Throws FormatError naming the bad line.
std::vector<MetricRow> parse_metrics_csv(std::string_view text);

/// Shot x Model x Metric rows, one column per category, cells as
/// percentages "mm.mm ± s.ss".
std::string render_table(const std::vector<MetricRow>& rows);

/// category,class,shot,tar_mean,far_mean ("NA" where undefined)
std::string tar_far_csv(const EvalReport& report);

/// Mean accuracy per (category, shot) for the fused and the ViT-only runs.
struct AblationRow {
    std::string category;
    int shot = 0;
    double full_accuracy = 0.0;
    double vit_only_accuracy = 0.0;
};

std::vector<AblationRow> ablation_rows(const EvalReport& full, const EvalReport& vit_only);

/// category,shot,full_accuracy,vit_only_accuracy
std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace fairproto
