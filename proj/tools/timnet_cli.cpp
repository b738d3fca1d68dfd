// Command-line front end: gen-data, pretrain, finetune, eval, cam, sweep.
// Exit codes: 0 success, 2 configuration/usage error, 1 runtime failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "timnet/harness.hpp"

using namespace timnet;

namespace {

struct CliOverrides {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    std::optional<int> threads;
    std::optional<std::string> precision;
    std::optional<double> fraction;
    std::optional<std::string> init;
    std::optional<std::int64_t> epochs;
    std::optional<std::int64_t> batch_size;
    std::optional<std::string> task;
    std::optional<bool> freeze;
    std::string weights, image;
    int class_index = 1;
};

void add_common_flags(CLI::App* cmd, CliOverrides& o) {
    cmd->add_option("--config", o.config_path, "JSON run configuration");
    cmd->add_option("--seed", o.seed, "run seed");
    cmd->add_option("--out", o.out_dir, "output directory");
    cmd->add_option("--threads", o.threads, "kernel threads (0 = auto)");
    cmd->add_option("--precision", o.precision, "f32 or f64");
}

RunConfig resolve_config(const CliOverrides& o, bool finetune_epochs) {
    RunConfig cfg = o.config_path.empty() ? RunConfig{} : load_config_file(o.config_path);
    if (o.seed) cfg.seed = *o.seed;
    if (o.out_dir) cfg.out_dir = *o.out_dir;
    if (o.threads) cfg.threads = *o.threads;
    if (o.precision) cfg.precision = *o.precision;
    if (o.fraction) cfg.fraction = *o.fraction;
    if (o.init) cfg.init = *o.init;
    if (o.epochs) (finetune_epochs ? cfg.train.finetune_epochs : cfg.train.epochs) = *o.epochs;
    if (o.batch_size) cfg.train.batch_size = *o.batch_size;
    if (o.task) cfg.task = *o.task;
    if (o.freeze) cfg.freeze_extractor = *o.freeze;
    // Re-validate after overrides.
    return parse_config_json(config_to_json(cfg));
}

void echo_config(const RunConfig& cfg) {
    const std::string text = config_to_json(cfg);
    std::cout << text << "\n";
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream f(std::filesystem::path(cfg.out_dir) / "config.json");
    f << text << "\n";
}

void print_metric_csv(const MetricReport& m) {
    std::cout << "acc,auroc,f1,prec,recall,ap,n\n";
    std::cout << metric_to_string(m.acc) << "," << metric_to_string(m.auroc) << "," << metric_to_string(m.f1) << ","
              << metric_to_string(m.precision) << "," << metric_to_string(m.recall) << "," << metric_to_string(m.ap)
              << "," << m.n_samples << "\n";
}

template <typename Fn32, typename Fn64>
int dispatch_precision(const RunConfig& cfg, Fn32&& f32, Fn64&& f64) {
    if (cfg.precision == "f64") return f64();
    return f32();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"TIMNet: contrastive text-image matching pre-training and label-efficient fine-tuning"};
    app.require_subcommand(1);

    CliOverrides o;
    auto* gen = app.add_subcommand("gen-data", "generate and export a synthetic paired corpus");
    auto* pre = app.add_subcommand("pretrain", "pre-train the matching network");
    auto* fin = app.add_subcommand("finetune", "fine-tune a downstream classifier");
    auto* eva = app.add_subcommand("eval", "evaluate a weight file");
    auto* cam = app.add_subcommand("cam", "write a class activation heatmap for one image");
    auto* swp = app.add_subcommand("sweep", "fraction x seed x init experiment grid");

    for (auto* cmd : {gen, pre, fin, eva, cam, swp}) add_common_flags(cmd, o);
    pre->add_option("--epochs", o.epochs, "pre-training epochs");
    pre->add_option("--batch-size", o.batch_size, "batch size");
    fin->add_option("--fraction", o.fraction, "labeled fraction in (0,1]");
    fin->add_option("--init", o.init, "scratch or pretrained:<path>");
    fin->add_option("--epochs", o.epochs, "fine-tuning epochs");
    fin->add_option("--batch-size", o.batch_size, "batch size");
    fin->add_option("--task", o.task, "binary or multilabel");
    fin->add_flag("--freeze", [&o](std::int64_t) { o.freeze = true; }, "freeze the feature extractor");
    eva->add_option("--weights", o.weights, "weight file")->required();
    eva->add_option("--task", o.task, "match, binary or multilabel");
    cam->add_option("--weights", o.weights, "downstream weight file")->required();
    cam->add_option("--image", o.image, "input PGM image")->required();
    cam->add_option("--class", o.class_index, "class index");
    cam->add_option("--task", o.task, "binary or multilabel");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << "\n";
        return 2;
    }

    try {
        if (gen->parsed()) {
            RunConfig cfg = resolve_config(o, false);
            echo_config(cfg);
            const auto dir = run_gen_data(cfg);
            std::cout << "corpus written to " << dir << "\n";
            return 0;
        }
        if (pre->parsed()) {
            RunConfig cfg = resolve_config(o, false);
            cfg.task = "match";
            echo_config(cfg);
            return dispatch_precision(
                cfg,
                [&] {
                    auto out = run_pretrain<float>(cfg);
                    std::cout << "weights: " << out.weights_path << "\nlog: " << out.log_path << "\n";
                    print_metric_csv(out.final_val);
                    return 0;
                },
                [&] {
                    auto out = run_pretrain<double>(cfg);
                    std::cout << "weights: " << out.weights_path << "\nlog: " << out.log_path << "\n";
                    print_metric_csv(out.final_val);
                    return 0;
                });
        }
        if (fin->parsed()) {
            RunConfig cfg = resolve_config(o, true);
            if (cfg.task == "match") cfg.task = "binary";
            echo_config(cfg);
            return dispatch_precision(
                cfg,
                [&] {
                    auto out = run_finetune<float>(cfg);
                    std::cout << "weights: " << out.weights_path << "\nlog: " << out.log_path << "\n";
                    print_metric_csv(out.test);
                    return 0;
                },
                [&] {
                    auto out = run_finetune<double>(cfg);
                    std::cout << "weights: " << out.weights_path << "\nlog: " << out.log_path << "\n";
                    print_metric_csv(out.test);
                    return 0;
                });
        }
        if (eva->parsed()) {
            RunConfig cfg = resolve_config(o, false);
            echo_config(cfg);
            return dispatch_precision(
                cfg,
                [&] {
                    print_metric_csv(run_eval<float>(cfg, o.weights));
                    return 0;
                },
                [&] {
                    print_metric_csv(run_eval<double>(cfg, o.weights));
                    return 0;
                });
        }
        if (cam->parsed()) {
            RunConfig cfg = resolve_config(o, false);
            if (cfg.task == "match") cfg.task = "binary";
            echo_config(cfg);
            const std::string out_path =
                (std::filesystem::path(cfg.out_dir) / ("cam_class" + std::to_string(o.class_index) + ".pgm")).string();
            return dispatch_precision(
                cfg,
                [&] {
                    std::cout << "heatmap: " << run_cam<float>(cfg, o.weights, o.image, o.class_index, out_path) << "\n";
                    return 0;
                },
                [&] {
                    std::cout << "heatmap: " << run_cam<double>(cfg, o.weights, o.image, o.class_index, out_path)
                              << "\n";
                    return 0;
                });
        }
        if (swp->parsed()) {
            RunConfig cfg = resolve_config(o, true);
            if (cfg.task == "match") cfg.task = "binary";
            echo_config(cfg);
            return dispatch_precision(
                cfg,
                [&] {
                    auto out = run_sweep<float>(cfg);
                    std::cout << "results: " << out.results_path << "\nsummary: " << out.summary_path << "\n";
                    return 0;
                },
                [&] {
                    auto out = run_sweep<double>(cfg);
                    std::cout << "results: " << out.results_path << "\nsummary: " << out.summary_path << "\n";
                    return 0;
                });
        }
    } catch (const ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
