#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "timnet/cam.hpp"
#include "timnet/config.hpp"
#include "timnet/csv.hpp"
#include "timnet/downstream.hpp"
#include "timnet/matcher.hpp"
#include "timnet/metrics.hpp"
#include "timnet/weights.hpp"

namespace timnet {

// Fixed default corpus seeds: "the default synthetic corpus" is the same
// dataset for every run seed unless data.seed overrides it.
constexpr std::uint64_t kDefaultPairedDataSeed = 0xDA7A0001ULL;
constexpr std::uint64_t kDefaultLabeledDataSeed = 0xDA7A0002ULL;

inline void apply_threads(const RunConfig& cfg) {
    if (cfg.threads > 0) ThreadPool::instance().set_threads(cfg.threads);
}

inline std::uint64_t paired_data_seed(const RunConfig& cfg) {
    return cfg.data.seed ? cfg.data.seed : kDefaultPairedDataSeed;
}

inline std::uint64_t labeled_data_seed(const RunConfig& cfg) {
    return cfg.data.seed ? cfg.data.seed : kDefaultLabeledDataSeed;
}

struct PairedSplits {
    Corpus train, val;
};

struct LabeledSplits {
    LabeledDataset train, val, test;
    Corpus raw;  // kept for CAM inputs (images + scene truth)
};

inline Corpus build_source_corpus(const RunConfig& cfg, std::int64_t n, std::uint64_t seed) {
    if (cfg.data.source == "synthetic") {
        return generate_corpus(datagen_config(cfg.data, n, seed, static_cast<int>(cfg.arch.max_len)));
    }
    auto ingested = ingest_external(cfg.data.images_dir, cfg.data.reports_tsv, cfg.data.labels_tsv,
                                    cfg.data.vocab_tsv, static_cast<int>(cfg.arch.max_len));
    for (const auto& w : ingested.warnings) std::cerr << "ingest warning: " << w << "\n";
    if (ingested.n_skipped) std::cerr << "ingest: skipped " << ingested.n_skipped << " ids\n";
    if (ingested.corpus.size() < n)
        throw std::runtime_error("external dataset has " + std::to_string(ingested.corpus.size()) +
                                 " usable items, config asks for " + std::to_string(n));
    return slice_corpus(ingested.corpus, 0, n);
}

inline PairedSplits paired_splits(const RunConfig& cfg) {
    const std::int64_t n = cfg.data.n_train + cfg.data.n_val;
    Corpus all = build_source_corpus(cfg, n, paired_data_seed(cfg));
    return PairedSplits{slice_corpus(all, 0, cfg.data.n_train), slice_corpus(all, cfg.data.n_train, cfg.data.n_val)};
}

inline LabeledSplits labeled_splits(const RunConfig& cfg) {
    const std::int64_t n = cfg.data.n_train + cfg.data.n_val + cfg.data.n_test;
    Corpus all = build_source_corpus(cfg, n, labeled_data_seed(cfg));
    LabeledSplits s;
    s.train = labeled_from_corpus(slice_corpus(all, 0, cfg.data.n_train));
    s.val = labeled_from_corpus(slice_corpus(all, cfg.data.n_train, cfg.data.n_val));
    s.test = labeled_from_corpus(slice_corpus(all, cfg.data.n_train + cfg.data.n_val, cfg.data.n_test));
    s.raw = slice_corpus(all, cfg.data.n_train + cfg.data.n_val, cfg.data.n_test);
    return s;
}

// ---------------------------------------------------------------------------
// Training-log CSV
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline CsvTable epoch_log_table(const std::vector<EpochRecord>& log) {
    CsvTable t;
    t.header = {"epoch", "split", "loss", "acc", "auroc", "f1", "prec", "recall", "ap"};
    for (const auto& r : log) {
        t.rows.push_back({std::to_string(r.epoch), r.split, format_double(r.loss), metric_to_string(r.metrics.acc),
                          metric_to_string(r.metrics.auroc), metric_to_string(r.metrics.f1),
                          metric_to_string(r.metrics.precision), metric_to_string(r.metrics.recall),
                          metric_to_string(r.metrics.ap)});
    }
    return t;
}

inline std::vector<std::string> metric_row(const MetricReport& m) {
    return {metric_to_string(m.acc),       metric_to_string(m.auroc),  metric_to_string(m.f1),
            metric_to_string(m.precision), metric_to_string(m.recall), metric_to_string(m.ap)};
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

struct PretrainOutcome {
    std::vector<EpochRecord> log;
    MetricReport final_val;
    std::string weights_path;
    std::string log_path;
};

template <typename T>
PretrainOutcome run_pretrain(const RunConfig& cfg) {
    apply_threads(cfg);
    std::filesystem::create_directories(cfg.out_dir);
    auto splits = paired_splits(cfg);

    TimNet<T> net(splits.train.vocab.size(), cfg.arch, cfg.seed);
    MatchTrainOptions opt;
    opt.lr = cfg.train.lr;
    opt.epochs = cfg.train.epochs;
    opt.batch_size = cfg.train.batch_size;
    opt.negative_ratio = cfg.train.negative_ratio;
    opt.seed = cfg.seed;

    PretrainOutcome out;
    out.log = pretrain(net, splits.train, splits.val, opt);
    for (auto it = out.log.rbegin(); it != out.log.rend(); ++it) {
        if (it->split == "val") {
            out.final_val = it->metrics;
            break;
        }
    }
    out.weights_path = (std::filesystem::path(cfg.out_dir) / "matcher.timw").string();
    save_weights(out.weights_path, net.store());
    out.log_path = (std::filesystem::path(cfg.out_dir) / "pretrain_log.csv").string();
    write_csv(out.log_path, epoch_log_table(out.log));
    return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

template <typename T>
void reset_bn_running_stats(ParamStore<T>& store) {
    for (auto& [name, b] : store.buffers) {
        if (name.size() >= 13 && name.compare(name.size() - 13, 13, ".running_mean") == 0)
            std::fill(b->data.begin(), b->data.end(), T(0));
        if (name.size() >= 12 && name.compare(name.size() - 12, 12, ".running_var") == 0)
            std::fill(b->data.begin(), b->data.end(), T(1));
    }
}

struct FinetuneOutcome {
    std::vector<EpochRecord> log;
    MetricReport test;
    std::string weights_path;  // empty unless written
    std::string log_path;
    PartialLoadReport load_report;  // init = pretrained only
};

/// Builds, initializes (scratch or from a matcher/downstream checkpoint),
/// subsamples the labeled fraction, trains and evaluates on the test split.
template <typename T>
FinetuneOutcome finetune_run(const RunConfig& cfg, const LabeledSplits& splits, DownstreamModel<T>* model_out = nullptr) {
    const Task task = cfg.task == "multilabel" ? Task::multilabel : Task::binary;
    const std::int64_t n_outputs = task == Task::binary ? 2 : kNumFindingKinds;

    DownstreamModel<T> model(cfg.arch, n_outputs, cfg.seed);
    FinetuneOutcome out;
    const std::string pre_path = pretrained_path_from_init(cfg.init);
    if (!pre_path.empty()) {
        out.load_report = load_partial(model.store(), load_weight_file(pre_path));
        if (cfg.reset_bn_stats) reset_bn_running_stats(model.store());
    }

    const auto keys = stratification_keys(splits.train, task);
    const auto picked = subsample_fraction(keys, cfg.fraction, mix64(cfg.seed, hash_str("subsample")));
    const LabeledDataset train = select_items(splits.train, picked);

    FinetuneOptions opt;
    opt.lr = cfg.train.lr;
    opt.epochs = cfg.train.finetune_epochs;
    opt.batch_size = cfg.train.batch_size;
    opt.seed = cfg.seed;
    opt.freeze_extractor = cfg.freeze_extractor;
    opt.task = task;
    out.log = finetune(model, train, splits.val.size() > 0 ? &splits.val : nullptr, opt);
    out.test = evaluate_downstream(model, splits.test, task, cfg.train.batch_size);
    if (model_out) *model_out = model;
    return out;
}

template <typename T>
FinetuneOutcome run_finetune(const RunConfig& cfg) {
    apply_threads(cfg);
    std::filesystem::create_directories(cfg.out_dir);
    auto splits = labeled_splits(cfg);
    DownstreamModel<T> model(cfg.arch, 2, 0);
    auto out = finetune_run(cfg, splits, &model);
    out.weights_path = (std::filesystem::path(cfg.out_dir) / (cfg.task + "_model.timw")).string();
    save_weights(out.weights_path, model.store());
    out.log_path = (std::filesystem::path(cfg.out_dir) / (cfg.task + "_finetune_log.csv")).string();
    write_csv(out.log_path, epoch_log_table(out.log));
    for (const auto& n : out.load_report.initialized)
        std::cout << "freshly initialized: " << n << "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

template <typename T>
MetricReport run_eval(const RunConfig& cfg, const std::string& weights_path) {
    apply_threads(cfg);
    const WeightFile wf = load_weight_file(weights_path);
    if (cfg.task == "match") {
        auto splits = paired_splits(cfg);
        TimNet<T> net(splits.val.vocab.size(), cfg.arch, 0);
        load_strict(net.store(), wf);
        const auto pairs =
            build_pairs(splits.val.size(), cfg.train.negative_ratio, mix64(cfg.seed, hash_str("val_pairs")));
        return evaluate_matching(net, splits.val, pairs, cfg.train.batch_size);
    }
    const Task task = cfg.task == "multilabel" ? Task::multilabel : Task::binary;
    auto splits = labeled_splits(cfg);
    DownstreamModel<T> model(cfg.arch, task == Task::binary ? 2 : kNumFindingKinds, 0);
    load_strict(model.store(), wf);
    return evaluate_downstream(model, splits.test, task, cfg.train.batch_size);
}

// ---------------------------------------------------------------------------
// CAM
// ---------------------------------------------------------------------------

template <typename T>
std::string run_cam(const RunConfig& cfg, const std::string& weights_path, const std::string& image_path,
                    int class_index, const std::string& out_path) {
    apply_threads(cfg);
    const Task task = cfg.task == "multilabel" ? Task::multilabel : Task::binary;
    DownstreamModel<T> model(cfg.arch, task == Task::binary ? 2 : kNumFindingKinds, 0);
    load_strict(model.store(), load_weight_file(weights_path));
    const PgmImage img = read_pgm(image_path);
    std::vector<float> image(img.pixels.size());
    for (std::size_t i = 0; i < image.size(); ++i) image[i] = static_cast<float>(img.pixels[i]) / 255.0f;
    const Heatmap h = compute_cam(model, image, img.height, img.width, class_index);
    write_heatmap(out_path, h, image);
    return out_path;
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

/// hash(base_seed, fraction, seed, init) per the determinism contract; cells
/// are independently reproducible from this value.
inline std::uint64_t sweep_cell_seed(std::uint64_t base_seed, double fraction, std::uint64_t seed,
                                     const std::string& init) {
    std::uint64_t fbits = 0;
    std::memcpy(&fbits, &fraction, sizeof(fraction));
    return mix64(mix64(mix64(base_seed, fbits), seed), hash_str(init));
}

struct SweepCell {
    std::string task, init;
    double fraction = 0.0;
    std::uint64_t seed = 0;
    MetricReport test;
};

template <typename T>
SweepCell run_sweep_cell(const RunConfig& base, const LabeledSplits& splits, const std::string& init, double fraction,
                         std::uint64_t seed) {
    RunConfig cfg = base;
    cfg.seed = sweep_cell_seed(base.seed, fraction, seed, init);
    cfg.init = init;
    cfg.fraction = fraction;
    cfg.data.n_val = 0;  // no per-epoch validation inside sweep cells
    LabeledSplits cell_splits;
    cell_splits.train = splits.train;
    cell_splits.test = splits.test;
    SweepCell cell;
    cell.task = base.task;
    cell.init = init;
    cell.fraction = fraction;
    cell.seed = seed;
    cell.test = finetune_run<T>(cfg, cell_splits).test;
    return cell;
}

inline std::vector<std::string> sweep_row(const SweepCell& c) {
    std::vector<std::string> row{c.task, c.init, format_double(c.fraction), std::to_string(c.seed)};
    for (auto& m : metric_row(c.test)) row.push_back(m);
    return row;
}

struct SweepSummary {
    // (init, fraction) -> mean metrics over seeds
    struct Row {
        std::string init;
        double fraction = 0.0;
        double mean_acc = 0.0, mean_auroc = 0.0, mean_ap = 0.0;
        int n = 0;
    };
    std::vector<Row> rows;
    bool reduction_defined = false;
    double best_scratch_acc = 0.0;
    double best_scratch_fraction = 0.0;
    double smallest_pretrained_fraction = 0.0;
    double label_reduction = 0.0;  // (f_scratch_best - f_pretrained_min) / f_scratch_best
};

inline SweepSummary summarize_sweep(const std::vector<SweepCell>& cells) {
    std::map<std::pair<std::string, double>, std::vector<const SweepCell*>> groups;
    for (const auto& c : cells) groups[{c.init, c.fraction}].push_back(&c);
    SweepSummary s;
    for (const auto& [key, members] : groups) {
        SweepSummary::Row r;
        r.init = key.first;
        r.fraction = key.second;
        for (const auto* c : members) {
            r.mean_acc += c->test.acc.value_or(0.0);
            r.mean_auroc += c->test.auroc.value_or(0.0);
            r.mean_ap += c->test.ap.value_or(0.0);
            ++r.n;
        }
        r.mean_acc /= r.n;
        r.mean_auroc /= r.n;
        r.mean_ap /= r.n;
        s.rows.push_back(r);
    }
    // Label-reduction statistic: smallest pretrained fraction whose mean
    // accuracy meets or beats the best scratch mean accuracy.
    double best_scratch = -1.0, best_scratch_frac = 0.0;
    for (const auto& r : s.rows) {
        if (r.init == "scratch" && r.mean_acc > best_scratch) {
            best_scratch = r.mean_acc;
            best_scratch_frac = r.fraction;
        }
    }
    double smallest_pre = -1.0;
    for (const auto& r : s.rows) {
        if (r.init != "scratch" && best_scratch >= 0.0 && r.mean_acc >= best_scratch) {
            if (smallest_pre < 0.0 || r.fraction < smallest_pre) smallest_pre = r.fraction;
        }
    }
    if (best_scratch >= 0.0 && smallest_pre >= 0.0) {
        s.reduction_defined = true;
        s.best_scratch_acc = best_scratch;
        s.best_scratch_fraction = best_scratch_frac;
        s.smallest_pretrained_fraction = smallest_pre;
        s.label_reduction = (best_scratch_frac - smallest_pre) / best_scratch_frac;
    }
    return s;
}

struct SweepOutcome {
    std::vector<SweepCell> cells;
    SweepSummary summary;
    std::string results_path, summary_path;
};

template <typename T>
SweepOutcome run_sweep(const RunConfig& cfg) {
    apply_threads(cfg);
    std::filesystem::create_directories(cfg.out_dir);
    RunConfig base = cfg;
    base.data.seed = labeled_data_seed(cfg);  // one shared dataset for every cell
    auto splits = labeled_splits(base);

    SweepOutcome out;
    for (const auto& init : cfg.sweep.inits)
        for (double fraction : cfg.sweep.fractions)
            for (std::uint64_t seed : cfg.sweep.seeds)
                out.cells.push_back(run_sweep_cell<T>(base, splits, init, fraction, seed));

    CsvTable results;
    results.header = {"task", "init", "fraction", "seed", "acc", "auroc", "f1", "prec", "recall", "ap"};
    for (const auto& c : out.cells) results.rows.push_back(sweep_row(c));
    out.results_path = (std::filesystem::path(cfg.out_dir) / "sweep_results.csv").string();
    write_csv(out.results_path, results);

    out.summary = summarize_sweep(out.cells);
    CsvTable summary;
    summary.header = {"init", "fraction", "mean_acc", "mean_auroc", "mean_ap", "n_seeds"};
    for (const auto& r : out.summary.rows)
        summary.rows.push_back({r.init, format_double(r.fraction), format_double(r.mean_acc),
                                format_double(r.mean_auroc), format_double(r.mean_ap), std::to_string(r.n)});
    out.summary_path = (std::filesystem::path(cfg.out_dir) / "sweep_summary.csv").string();
    write_csv(out.summary_path, summary);

    std::ofstream red(std::filesystem::path(cfg.out_dir) / "label_reduction.txt");
    if (out.summary.reduction_defined) {
        red << "best scratch mean accuracy " << out.summary.best_scratch_acc << " at fraction "
            << out.summary.best_scratch_fraction << "\n"
            << "smallest pretrained fraction at or above it: " << out.summary.smallest_pretrained_fraction << "\n"
            << "label reduction: (" << out.summary.best_scratch_fraction << " - "
            << out.summary.smallest_pretrained_fraction << ") / " << out.summary.best_scratch_fraction << " = "
            << out.summary.label_reduction << "\n";
    } else {
        red << "label reduction undefined: no pretrained fraction reached the best scratch accuracy\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Data export (gen-data command)
// ---------------------------------------------------------------------------

inline std::string run_gen_data(const RunConfig& cfg) {
    std::filesystem::create_directories(cfg.out_dir);
    const std::uint64_t seed = cfg.data.seed ? cfg.data.seed : cfg.seed;
    const std::int64_t n = cfg.data.n_train + cfg.data.n_val + cfg.data.n_test;
    const auto gcfg = datagen_config(cfg.data, n, seed, static_cast<int>(cfg.arch.max_len));
    const Corpus corpus = generate_corpus(gcfg);
    export_corpus(corpus, cfg.out_dir, &gcfg);
    return cfg.out_dir;
}

}  // namespace timnet
