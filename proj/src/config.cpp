#include "timnet/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace timnet {

namespace {

using nlohmann::json;

void check_keys(const json& obj, const std::string& scope, const std::set<std::string>& known) {
    for (const auto& [key, value] : obj.items()) {
        (void)value;
        if (!known.count(key))
            throw ConfigError(scope.empty() ? key : scope + "." + key, "unknown key");
    }
}

template <typename T>
T get_number(const json& obj, const std::string& scope, const std::string& key, T fallback) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_number())
        throw ConfigError(scope.empty() ? key : scope + "." + key, "expected a number");
    return v.get<T>();
}

std::string get_string(const json& obj, const std::string& scope, const std::string& key, std::string fallback) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_string())
        throw ConfigError(scope.empty() ? key : scope + "." + key, "expected a string");
    return v.get<std::string>();
}

bool get_bool(const json& obj, const std::string& scope, const std::string& key, bool fallback) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_boolean())
        throw ConfigError(scope.empty() ? key : scope + "." + key, "expected a boolean");
    return v.get<bool>();
}

void parse_arch(const json& obj, ArchConfig& a) {
    check_keys(obj, "arch",
               {"d_emb", "d_tok", "text_layers", "text_ff", "text_channels", "max_len", "image_stages", "base_width",
                "in_channels", "head_hidden", "cls_hidden"});
    a.d_emb = get_number<std::int64_t>(obj, "arch", "d_emb", a.d_emb);
    a.d_tok = get_number<std::int64_t>(obj, "arch", "d_tok", a.d_tok);
    a.text_layers = get_number<std::int64_t>(obj, "arch", "text_layers", a.text_layers);
    a.text_ff = get_number<std::int64_t>(obj, "arch", "text_ff", a.text_ff);
    a.text_channels = get_number<std::int64_t>(obj, "arch", "text_channels", a.text_channels);
    a.max_len = get_number<std::int64_t>(obj, "arch", "max_len", a.max_len);
    a.image_stages = get_number<std::int64_t>(obj, "arch", "image_stages", a.image_stages);
    a.base_width = get_number<std::int64_t>(obj, "arch", "base_width", a.base_width);
    a.in_channels = get_number<std::int64_t>(obj, "arch", "in_channels", a.in_channels);
    a.head_hidden = get_number<std::int64_t>(obj, "arch", "head_hidden", a.head_hidden);
    a.cls_hidden = get_number<std::int64_t>(obj, "arch", "cls_hidden", a.cls_hidden);
    for (auto [k, v] : std::initializer_list<std::pair<const char*, std::int64_t>>{
             {"d_emb", a.d_emb}, {"d_tok", a.d_tok}, {"text_layers", a.text_layers}, {"text_ff", a.text_ff},
             {"text_channels", a.text_channels}, {"max_len", a.max_len}, {"image_stages", a.image_stages},
             {"base_width", a.base_width}, {"in_channels", a.in_channels}, {"head_hidden", a.head_hidden},
             {"cls_hidden", a.cls_hidden}}) {
        if (v < 1) throw ConfigError(std::string("arch.") + k, "must be a positive integer");
    }
}

void parse_train(const json& obj, TrainConfig& t) {
    check_keys(obj, "train", {"lr", "epochs", "finetune_epochs", "batch_size", "negative_ratio"});
    t.lr = get_number<double>(obj, "train", "lr", t.lr);
    t.epochs = get_number<std::int64_t>(obj, "train", "epochs", t.epochs);
    t.finetune_epochs = get_number<std::int64_t>(obj, "train", "finetune_epochs", t.finetune_epochs);
    t.batch_size = get_number<std::int64_t>(obj, "train", "batch_size", t.batch_size);
    t.negative_ratio = get_number<double>(obj, "train", "negative_ratio", t.negative_ratio);
    if (!(t.lr > 0)) throw ConfigError("train.lr", "must be > 0");
    if (t.epochs < 1) throw ConfigError("train.epochs", "must be >= 1");
    if (t.finetune_epochs < 1) throw ConfigError("train.finetune_epochs", "must be >= 1");
    if (t.batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
    if (!(t.negative_ratio > 0)) throw ConfigError("train.negative_ratio", "must be > 0");
}

void parse_data(const json& obj, DataConfig& d) {
    check_keys(obj, "data",
               {"source", "n_train", "n_val", "n_test", "image_size", "noise_sigma", "p_abnormal", "omission_epsilon",
                "hedge_prob", "seed", "images_dir", "reports_tsv", "labels_tsv", "vocab_tsv"});
    d.source = get_string(obj, "data", "source", d.source);
    if (d.source != "synthetic" && d.source != "external")
        throw ConfigError("data.source", "must be 'synthetic' or 'external'");
    d.n_train = get_number<std::int64_t>(obj, "data", "n_train", d.n_train);
    d.n_val = get_number<std::int64_t>(obj, "data", "n_val", d.n_val);
    d.n_test = get_number<std::int64_t>(obj, "data", "n_test", d.n_test);
    d.image_size = get_number<int>(obj, "data", "image_size", d.image_size);
    d.noise_sigma = get_number<double>(obj, "data", "noise_sigma", d.noise_sigma);
    d.p_abnormal = get_number<double>(obj, "data", "p_abnormal", d.p_abnormal);
    d.omission_epsilon = get_number<double>(obj, "data", "omission_epsilon", d.omission_epsilon);
    d.hedge_prob = get_number<double>(obj, "data", "hedge_prob", d.hedge_prob);
    d.seed = get_number<std::uint64_t>(obj, "data", "seed", d.seed);
    d.images_dir = get_string(obj, "data", "images_dir", d.images_dir);
    d.reports_tsv = get_string(obj, "data", "reports_tsv", d.reports_tsv);
    d.labels_tsv = get_string(obj, "data", "labels_tsv", d.labels_tsv);
    d.vocab_tsv = get_string(obj, "data", "vocab_tsv", d.vocab_tsv);
    if (d.n_train < 2) throw ConfigError("data.n_train", "must be >= 2");
    if (d.n_val < 0 || d.n_test < 0) throw ConfigError("data.n_val", "counts must be >= 0");
    if (d.image_size < 8) throw ConfigError("data.image_size", "must be >= 8");
    if (d.source == "external" && (d.images_dir.empty() || d.reports_tsv.empty()))
        throw ConfigError("data.images_dir", "external source needs images_dir and reports_tsv");
}

void parse_sweep(const json& obj, SweepConfig& s) {
    check_keys(obj, "sweep", {"fractions", "seeds", "inits"});
    if (obj.contains("fractions")) {
        if (!obj.at("fractions").is_array()) throw ConfigError("sweep.fractions", "expected an array");
        s.fractions.clear();
        for (const auto& v : obj.at("fractions")) {
            if (!v.is_number()) throw ConfigError("sweep.fractions", "expected numbers");
            s.fractions.push_back(v.get<double>());
        }
        if (s.fractions.empty()) throw ConfigError("sweep.fractions", "must be non-empty");
    }
    if (obj.contains("seeds")) {
        if (!obj.at("seeds").is_array()) throw ConfigError("sweep.seeds", "expected an array");
        s.seeds.clear();
        for (const auto& v : obj.at("seeds")) {
            if (!v.is_number()) throw ConfigError("sweep.seeds", "expected numbers");
            s.seeds.push_back(v.get<std::uint64_t>());
        }
        if (s.seeds.empty()) throw ConfigError("sweep.seeds", "must be non-empty");
    }
    if (obj.contains("inits")) {
        if (!obj.at("inits").is_array()) throw ConfigError("sweep.inits", "expected an array");
        s.inits.clear();
        for (const auto& v : obj.at("inits")) {
            if (!v.is_string()) throw ConfigError("sweep.inits", "expected strings");
            s.inits.push_back(v.get<std::string>());
        }
        if (s.inits.empty()) throw ConfigError("sweep.inits", "must be non-empty");
    }
}

}  // namespace

std::string pretrained_path_from_init(const std::string& init) {
    if (init == "scratch") return "";
    const std::string prefix = "pretrained:";
    if (init.rfind(prefix, 0) == 0 && init.size() > prefix.size()) return init.substr(prefix.size());
    throw ConfigError("init", "must be 'scratch' or 'pretrained:<path>', got '" + init + "'");
}

RunConfig parse_config_json(const std::string& json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError("<json>", e.what());
    }
    if (!root.is_object()) throw ConfigError("<json>", "top level must be an object");
    check_keys(root, "",
               {"seed", "precision", "threads", "out_dir", "arch", "train", "data", "task", "init", "fraction",
                "freeze_extractor", "reset_bn_stats", "sweep"});

    RunConfig cfg;
    cfg.seed = get_number<std::uint64_t>(root, "", "seed", cfg.seed);
    cfg.precision = get_string(root, "", "precision", cfg.precision);
    if (cfg.precision != "f32" && cfg.precision != "f64")
        throw ConfigError("precision", "must be 'f32' or 'f64'");
    cfg.threads = get_number<int>(root, "", "threads", cfg.threads);
    if (cfg.threads < 0) throw ConfigError("threads", "must be >= 0");
    cfg.out_dir = get_string(root, "", "out_dir", cfg.out_dir);
    if (root.contains("arch")) {
        if (!root.at("arch").is_object()) throw ConfigError("arch", "expected an object");
        parse_arch(root.at("arch"), cfg.arch);
    }
    if (root.contains("train")) {
        if (!root.at("train").is_object()) throw ConfigError("train", "expected an object");
        parse_train(root.at("train"), cfg.train);
    }
    if (root.contains("data")) {
        if (!root.at("data").is_object()) throw ConfigError("data", "expected an object");
        parse_data(root.at("data"), cfg.data);
    }
    cfg.task = get_string(root, "", "task", cfg.task);
    if (cfg.task != "match" && cfg.task != "binary" && cfg.task != "multilabel")
        throw ConfigError("task", "must be 'match', 'binary' or 'multilabel'");
    cfg.init = get_string(root, "", "init", cfg.init);
    pretrained_path_from_init(cfg.init);  // validates
    cfg.fraction = get_number<double>(root, "", "fraction", cfg.fraction);
    if (!(cfg.fraction > 0.0) || cfg.fraction > 1.0) throw ConfigError("fraction", "must be in (0, 1]");
    cfg.freeze_extractor = get_bool(root, "", "freeze_extractor", cfg.freeze_extractor);
    cfg.reset_bn_stats = get_bool(root, "", "reset_bn_stats", cfg.reset_bn_stats);
    if (root.contains("sweep")) {
        if (!root.at("sweep").is_object()) throw ConfigError("sweep", "expected an object");
        parse_sweep(root.at("sweep"), cfg.sweep);
    }
    for (const auto& init : cfg.sweep.inits) pretrained_path_from_init(init);
    return cfg;
}

RunConfig load_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("--config", "cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_config_json(ss.str());
}

std::string config_to_json(const RunConfig& cfg) {
    json root;
    root["seed"] = cfg.seed;
    root["precision"] = cfg.precision;
    root["threads"] = cfg.threads;
    root["out_dir"] = cfg.out_dir;
    root["arch"] = {{"d_emb", cfg.arch.d_emb},
                    {"d_tok", cfg.arch.d_tok},
                    {"text_layers", cfg.arch.text_layers},
                    {"text_ff", cfg.arch.text_ff},
                    {"text_channels", cfg.arch.text_channels},
                    {"max_len", cfg.arch.max_len},
                    {"image_stages", cfg.arch.image_stages},
                    {"base_width", cfg.arch.base_width},
                    {"in_channels", cfg.arch.in_channels},
                    {"head_hidden", cfg.arch.head_hidden},
                    {"cls_hidden", cfg.arch.cls_hidden}};
    root["train"] = {{"lr", cfg.train.lr},
                     {"epochs", cfg.train.epochs},
                     {"finetune_epochs", cfg.train.finetune_epochs},
                     {"batch_size", cfg.train.batch_size},
                     {"negative_ratio", cfg.train.negative_ratio}};
    root["data"] = {{"source", cfg.data.source},
                    {"n_train", cfg.data.n_train},
                    {"n_val", cfg.data.n_val},
                    {"n_test", cfg.data.n_test},
                    {"image_size", cfg.data.image_size},
                    {"noise_sigma", cfg.data.noise_sigma},
                    {"p_abnormal", cfg.data.p_abnormal},
                    {"omission_epsilon", cfg.data.omission_epsilon},
                    {"hedge_prob", cfg.data.hedge_prob},
                    {"seed", cfg.data.seed},
                    {"images_dir", cfg.data.images_dir},
                    {"reports_tsv", cfg.data.reports_tsv},
                    {"labels_tsv", cfg.data.labels_tsv},
                    {"vocab_tsv", cfg.data.vocab_tsv}};
    root["task"] = cfg.task;
    root["init"] = cfg.init;
    root["fraction"] = cfg.fraction;
    root["freeze_extractor"] = cfg.freeze_extractor;
    root["reset_bn_stats"] = cfg.reset_bn_stats;
    root["sweep"] = {{"fractions", cfg.sweep.fractions}, {"seeds", cfg.sweep.seeds}, {"inits", cfg.sweep.inits}};
    return root.dump(2);
}

}  // namespace timnet
