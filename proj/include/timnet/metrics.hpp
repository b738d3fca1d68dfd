#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace timnet {

/// Threshold metrics at a fixed decision threshold. Undefined components
/// (zero-denominator cases) are surfaced as nullopt, never coerced to 0.
struct ThresholdMetrics {
    std::optional<double> acc;
    std::optional<double> precision;
    std::optional<double> recall;
    std::optional<double> f1;
};

struct PerClassMetrics {
    std::optional<double> auroc;
    std::optional<double> ap;
    bool degenerate = false;  // class missing one outcome in the eval set
};

struct MetricReport {
    std::optional<double> acc;
    std::optional<double> auroc;
    std::optional<double> f1;
    std::optional<double> precision;
    std::optional<double> recall;
    std::optional<double> ap;
    std::int64_t n_samples = 0;
    std::vector<PerClassMetrics> per_class;  // multi-label only
    std::vector<std::string> warnings;
};

/// Mann-Whitney auROC: fraction of (positive, negative) pairs ranked
/// correctly, ties counted 0.5. Sort-based, O(n log n). Undefined when only
/// one class is present.
std::optional<double> auroc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Mean over positives, in descending score order, of precision at each
/// positive's rank. Ties keep their original relative order (stable sort).
/// Undefined when there are no positives.
std::optional<double> average_precision(const std::vector<double>& scores, const std::vector<int>& labels);

/// Predictions are score >= threshold.
ThresholdMetrics threshold_metrics(const std::vector<double>& scores, const std::vector<int>& labels,
                                   double threshold = 0.5);

/// All six binary metrics at threshold 0.5.
MetricReport binary_report(const std::vector<double>& scores, const std::vector<int>& labels);

/// Per-class auROC/AP plus unweighted macro averages. Degenerate classes are
/// flagged, excluded from the macro average, and reported in warnings.
MetricReport multilabel_report(const std::vector<std::vector<double>>& scores_per_class,
                               const std::vector<std::vector<int>>& labels_per_class);

/// Formats a metric for CSV output: 17 significant digits, empty if undefined.
std::string metric_to_string(const std::optional<double>& m);

}  // namespace timnet
