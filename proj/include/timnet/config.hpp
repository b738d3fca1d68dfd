#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "timnet/datagen.hpp"
#include "timnet/encoders.hpp"

namespace timnet {

/// Raised for malformed run configuration; the CLI maps it to exit code 2.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string key, const std::string& message)
        : std::runtime_error("config error at '" + key + "': " + message), key_(std::move(key)) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

struct TrainConfig {
    double lr = 1e-4;
    std::int64_t epochs = 10;           // matching pre-training
    std::int64_t finetune_epochs = 30;  // downstream
    std::int64_t batch_size = 16;
    double negative_ratio = 1.0;
};

struct DataConfig {
    std::string source = "synthetic";  // synthetic | external
    std::int64_t n_train = 1000;
    std::int64_t n_val = 200;
    std::int64_t n_test = 500;
    int image_size = 32;
    double noise_sigma = 0.05;
    double p_abnormal = 0.5;
    double omission_epsilon = 0.05;
    double hedge_prob = 0.25;
    std::uint64_t seed = 0;  // 0 -> derived from the run seed and task family
    std::string images_dir, reports_tsv, labels_tsv, vocab_tsv;
};

struct SweepConfig {
    std::vector<double> fractions = {0.005, 0.01, 0.02, 0.05, 0.1, 0.3, 0.5, 1.0};
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    std::vector<std::string> inits = {"scratch"};
};

struct RunConfig {
    std::uint64_t seed = 1;
    std::string precision = "f32";  // f32 | f64
    int threads = 0;                // 0 = hardware default
    std::string out_dir = "out";
    ArchConfig arch;
    TrainConfig train;
    DataConfig data;
    std::string task = "match";  // match | binary | multilabel
    std::string init = "scratch";
    double fraction = 1.0;
    bool freeze_extractor = false;
    bool reset_bn_stats = false;
    SweepConfig sweep;
};

/// Strict parser: unknown keys are ConfigErrors naming the key; values are
/// type- and range-checked.
RunConfig parse_config_json(const std::string& json_text);
RunConfig load_config_file(const std::string& path);

/// Effective config serialized back to JSON; feeding the echo back in
/// reproduces the same run.
std::string config_to_json(const RunConfig& cfg);

/// "scratch" -> empty; "pretrained:<path>" -> the path. Anything else is a
/// ConfigError.
std::string pretrained_path_from_init(const std::string& init);

inline DatagenConfig datagen_config(const DataConfig& d, std::int64_t n, std::uint64_t seed, int max_len) {
    DatagenConfig g;
    g.n = n;
    g.seed = seed;
    g.height = d.image_size;
    g.width = d.image_size;
    g.noise_sigma = d.noise_sigma;
    g.p_abnormal = d.p_abnormal;
    g.omission_epsilon = d.omission_epsilon;
    g.hedge_prob = d.hedge_prob;
    g.max_len = max_len;
    return g;
}

}  // namespace timnet
