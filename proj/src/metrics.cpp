#include "timnet/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace timnet {

namespace {

void check_sizes(const std::vector<double>& scores, const std::vector<int>& labels, const char* fn) {
    if (scores.size() != labels.size())
        throw std::invalid_argument(std::string(fn) + ": scores and labels differ in length");
    for (int l : labels)
        if (l != 0 && l != 1) throw std::invalid_argument(std::string(fn) + ": labels must be 0 or 1");
}

}  // namespace

std::optional<double> auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_sizes(scores, labels, "auroc");
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (int l : labels) n_pos += static_cast<std::size_t>(l);
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) return std::nullopt;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Rank-sum of positives with average ranks over tie groups.
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));  // 1-based
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]] == 1) rank_sum_pos += avg_rank;
        i = j;
    }
    const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

std::optional<double> average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_sizes(scores, labels, "average_precision");
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (int l : labels) n_pos += static_cast<std::size_t>(l);
    if (n_pos == 0) return std::nullopt;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    double sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t r = 0; r < n; ++r) {
        if (labels[order[r]] == 1) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(r + 1);
        }
    }
    return sum / static_cast<double>(n_pos);
}

ThresholdMetrics threshold_metrics(const std::vector<double>& scores, const std::vector<int>& labels,
                                   double threshold) {
    check_sizes(scores, labels, "threshold_metrics");
    ThresholdMetrics out;
    if (scores.empty()) return out;
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool pred = scores[i] >= threshold;
        if (pred && labels[i] == 1) ++tp;
        else if (pred && labels[i] == 0) ++fp;
        else if (!pred && labels[i] == 0) ++tn;
        else ++fn;
    }
    out.acc = static_cast<double>(tp + tn) / static_cast<double>(scores.size());
    if (tp + fp > 0) out.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    if (tp + fn > 0) out.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    if (out.precision && out.recall && (*out.precision + *out.recall) > 0.0)
        out.f1 = 2.0 * *out.precision * *out.recall / (*out.precision + *out.recall);
    return out;
}

MetricReport binary_report(const std::vector<double>& scores, const std::vector<int>& labels) {
    MetricReport r;
    r.n_samples = static_cast<std::int64_t>(scores.size());
    const auto tm = threshold_metrics(scores, labels, 0.5);
    r.acc = tm.acc;
    r.precision = tm.precision;
    r.recall = tm.recall;
    r.f1 = tm.f1;
    r.auroc = auroc(scores, labels);
    r.ap = average_precision(scores, labels);
    return r;
}

MetricReport multilabel_report(const std::vector<std::vector<double>>& scores_per_class,
                               const std::vector<std::vector<int>>& labels_per_class) {
    if (scores_per_class.size() != labels_per_class.size())
        throw std::invalid_argument("multilabel_report: class count mismatch");
    MetricReport r;
    double sum_auroc = 0.0, sum_ap = 0.0;
    std::size_t defined = 0;
    for (std::size_t k = 0; k < scores_per_class.size(); ++k) {
        PerClassMetrics pc;
        pc.auroc = auroc(scores_per_class[k], labels_per_class[k]);
        pc.ap = average_precision(scores_per_class[k], labels_per_class[k]);
        pc.degenerate = !pc.auroc.has_value();
        if (pc.degenerate) {
            r.warnings.push_back("class " + std::to_string(k) +
                                 " has a single outcome in the eval set; excluded from macro averages");
        } else {
            sum_auroc += *pc.auroc;
            sum_ap += pc.ap.value_or(0.0);
            ++defined;
        }
        r.per_class.push_back(pc);
        r.n_samples = static_cast<std::int64_t>(labels_per_class[k].size());
    }
    if (defined > 0) {
        r.auroc = sum_auroc / static_cast<double>(defined);
        r.ap = sum_ap / static_cast<double>(defined);
    }
    return r;
}

std::string metric_to_string(const std::optional<double>& m) {
    if (!m.has_value()) return "";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", *m);
    return buf;
}

}  // namespace timnet
