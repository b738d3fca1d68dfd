#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "timnet/adam.hpp"
#include "timnet/datagen.hpp"
#include "timnet/encoders.hpp"
#include "timnet/matcher.hpp"
#include "timnet/metrics.hpp"

namespace timnet {

enum class Task { binary, multilabel };

/// Image-only labeled data; no tokenizer or text anywhere on this path.
struct LabeledDataset {
    int height = 0, width = 0;
    std::vector<std::vector<float>> images;
    std::vector<int> binary;                               // 0/1
    std::vector<std::array<int, kNumFindingKinds>> multihot;
    std::int64_t size() const { return static_cast<std::int64_t>(images.size()); }
};

inline LabeledDataset labeled_from_corpus(const Corpus& corpus) {
    LabeledDataset ds;
    ds.height = corpus.height;
    ds.width = corpus.width;
    for (const auto& it : corpus.items) {
        ds.images.push_back(it.image);
        ds.binary.push_back(it.binary_label);
        ds.multihot.push_back(it.multihot);
    }
    return ds;
}

inline LabeledDataset select_items(const LabeledDataset& ds, const std::vector<std::int64_t>& idx) {
    LabeledDataset out;
    out.height = ds.height;
    out.width = ds.width;
    for (auto i : idx) {
        out.images.push_back(ds.images[static_cast<std::size_t>(i)]);
        out.binary.push_back(ds.binary[static_cast<std::size_t>(i)]);
        out.multihot.push_back(ds.multihot[static_cast<std::size_t>(i)]);
    }
    return out;
}

/// Stratified subsample: per group key, max(1, round(fraction * group size))
/// items drawn without replacement from a seeded shuffle. Fraction 1.0 is the
/// identity. Returned indices are in ascending original order.
inline std::vector<std::int64_t> subsample_fraction(const std::vector<std::string>& group_keys, double fraction,
                                                    std::uint64_t seed) {
    const std::int64_t n = static_cast<std::int64_t>(group_keys.size());
    if (!(fraction > 0.0) || fraction > 1.0)
        throw std::invalid_argument("subsample_fraction: fraction must be in (0,1], got " + std::to_string(fraction));
    std::vector<std::int64_t> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), 0);
    if (fraction == 1.0) return all;

    std::map<std::string, std::vector<std::int64_t>> groups;
    for (std::int64_t i = 0; i < n; ++i) groups[group_keys[static_cast<std::size_t>(i)]].push_back(i);
    if (fraction * static_cast<double>(n) < static_cast<double>(groups.size()))
        throw std::invalid_argument("subsample_fraction: fraction " + std::to_string(fraction) +
                                    " too small to give every class one item (" + std::to_string(groups.size()) +
                                    " classes, " + std::to_string(n) + " items)");
    std::vector<std::int64_t> picked;
    for (auto& [key, members] : groups) {
        Rng rng(mix64(seed, hash_str(key)));
        rng.shuffle(members.begin(), members.end());
        const auto k = std::max<std::int64_t>(
            1, static_cast<std::int64_t>(std::llround(fraction * static_cast<double>(members.size()))));
        for (std::int64_t i = 0; i < k && i < static_cast<std::int64_t>(members.size()); ++i)
            picked.push_back(members[static_cast<std::size_t>(i)]);
    }
    std::sort(picked.begin(), picked.end());
    return picked;
}

/// Group keys for stratification: the binary class, or the multi-hot label
/// signature for the multi-label task.
inline std::vector<std::string> stratification_keys(const LabeledDataset& ds, Task task) {
    std::vector<std::string> keys;
    keys.reserve(ds.images.size());
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        if (task == Task::binary) {
            keys.push_back(ds.binary[i] ? "1" : "0");
        } else {
            std::string sig;
            for (int k = 0; k < kNumFindingKinds; ++k) sig += ds.multihot[i][static_cast<std::size_t>(k)] ? '1' : '0';
            keys.push_back(sig);
        }
    }
    return keys;
}

/// Classifier over the transferred feature extractor: 1x1 conv + BN + ReLU,
/// GAP, FC + ReLU, output layer (2 logits binary, K logits multi-label).
/// Extractor tensors keep the "image_encoder." prefix so matcher checkpoints
/// load by name.
template <typename T>
class DownstreamModel {
public:
    DownstreamModel(const ArchConfig& arch, std::int64_t n_outputs, std::uint64_t seed)
        : arch_(arch), n_outputs_(n_outputs) {
        Rng rng(mix64(seed, hash_str("downstream.init")));
        extractor_ = FeatureExtractor<T>(store_, "image_encoder", arch, rng);
        const std::int64_t cf = extractor_.out_channels();
        head_conv_ = Conv2dLayer<T>(store_, "cls_head.conv", cf, cf, 1, 1, 0, rng);
        head_bn_ = BatchNormLayer<T>(store_, "cls_head.bn", cf);
        head_fc_ = Linear<T>(store_, "cls_head.fc1", cf, arch.cls_hidden, rng, InitMode::he);
        head_out_ = Linear<T>(store_, "cls_head.out", arch.cls_hidden, n_outputs, rng, InitMode::zero);
    }

    ParamStore<T>& store() { return store_; }
    const ParamStore<T>& store() const { return store_; }
    std::int64_t n_outputs() const { return n_outputs_; }
    const ArchConfig& arch() const { return arch_; }
    const FeatureExtractor<T>& extractor() const { return extractor_; }

    struct ForwardDetail {
        TensorPtr<T> pre_gap;  // what GAP consumes: [N, C_f, H_f, W_f]
        TensorPtr<T> gap_vec;  // [N, C_f]
        TensorPtr<T> logits;   // [N, K]
    };

    /// train_extractor lets a frozen extractor keep its batchnorm in eval
    /// mode while the head trains.
    ForwardDetail forward_detail(Tape<T>& tape, const TensorPtr<T>& images, bool train_head,
                                 bool train_extractor) const {
        ForwardDetail d;
        auto f = extractor_.forward(tape, images, train_extractor);
        d.pre_gap = relu(tape, head_bn_.forward(tape, head_conv_.forward(tape, f), train_head));
        d.gap_vec = global_avg_pool(tape, d.pre_gap);
        d.logits = head_out_.forward(tape, relu(tape, head_fc_.forward(tape, d.gap_vec)));
        return d;
    }

    TensorPtr<T> forward(Tape<T>& tape, const TensorPtr<T>& images, bool training) const {
        return forward_detail(tape, images, training, training).logits;
    }

    /// Parameters owned by the feature extractor (frozen under
    /// freeze_extractor).
    static bool is_extractor_tensor(const std::string& name) { return name.rfind("image_encoder.", 0) == 0; }

private:
    ArchConfig arch_;
    std::int64_t n_outputs_ = 0;
    ParamStore<T> store_;
    FeatureExtractor<T> extractor_;
    Conv2dLayer<T> head_conv_;
    BatchNormLayer<T> head_bn_;
    Linear<T> head_fc_;
    Linear<T> head_out_;
};

template <typename T>
TensorPtr<T> labeled_images_to_tensor(const LabeledDataset& ds, const std::vector<std::int64_t>& indices) {
    const std::int64_t n = static_cast<std::int64_t>(indices.size());
    const std::int64_t hw = static_cast<std::int64_t>(ds.height) * ds.width;
    std::vector<T> data(static_cast<std::size_t>(n * hw));
    for (std::int64_t i = 0; i < n; ++i) {
        const auto& img = ds.images[static_cast<std::size_t>(indices[static_cast<std::size_t>(i)])];
        for (std::int64_t p = 0; p < hw; ++p)
            data[static_cast<std::size_t>(i * hw + p)] = static_cast<T>(img[static_cast<std::size_t>(p)]);
    }
    return make_tensor<T>({n, 1, ds.height, ds.width}, std::move(data));
}

// ---------------------------------------------------------------------------
// Prediction and evaluation
// ---------------------------------------------------------------------------

/// Binary: P(class 1). Multi-label: per-class sigmoid probabilities, flattened
/// row-major [n, K]. Eval mode throughout.
template <typename T>
std::vector<double> predict(const DownstreamModel<T>& model, const LabeledDataset& ds, std::int64_t batch_size = 16) {
    std::vector<double> out;
    const std::int64_t K = model.n_outputs();
    for (std::int64_t start = 0; start < ds.size(); start += batch_size) {
        const std::int64_t end = std::min(ds.size(), start + batch_size);
        std::vector<std::int64_t> idx;
        for (std::int64_t i = start; i < end; ++i) idx.push_back(i);
        Tape<T> tape(false);
        auto logits = model.forward(tape, labeled_images_to_tensor<T>(ds, idx), false);
        for (std::int64_t i = 0; i < end - start; ++i) {
            if (K == 2) {
                const double z0 = static_cast<double>(logits->data[static_cast<std::size_t>(i * K)]);
                const double z1 = static_cast<double>(logits->data[static_cast<std::size_t>(i * K + 1)]);
                const double m = std::max(z0, z1);
                const double e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
                out.push_back(e1 / (e0 + e1));
            } else {
                for (std::int64_t k = 0; k < K; ++k) {
                    const double z = static_cast<double>(logits->data[static_cast<std::size_t>(i * K + k)]);
                    out.push_back(1.0 / (1.0 + std::exp(-z)));
                }
            }
        }
    }
    return out;
}

template <typename T>
MetricReport evaluate_downstream(const DownstreamModel<T>& model, const LabeledDataset& test, Task task,
                                 std::int64_t batch_size = 16) {
    if (test.size() == 0) throw std::invalid_argument("evaluate_downstream: empty test set");
    const auto probs = predict(model, test, batch_size);
    if (task == Task::binary) {
        return binary_report(probs, test.binary);
    }
    const std::int64_t K = model.n_outputs();
    std::vector<std::vector<double>> scores(static_cast<std::size_t>(K));
    std::vector<std::vector<int>> labels(static_cast<std::size_t>(K));
    for (std::int64_t i = 0; i < test.size(); ++i)
        for (std::int64_t k = 0; k < K; ++k) {
            scores[static_cast<std::size_t>(k)].push_back(probs[static_cast<std::size_t>(i * K + k)]);
            labels[static_cast<std::size_t>(k)].push_back(test.multihot[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)]);
        }
    return multilabel_report(scores, labels);
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

struct FinetuneOptions {
    double lr = 1e-4;
    std::int64_t epochs = 30;
    std::int64_t batch_size = 16;
    std::uint64_t seed = 1;
    bool freeze_extractor = false;
    Task task = Task::binary;
};

/// Cross-entropy (binary) or per-class sigmoid BCE (multi-label); no text
/// input anywhere. Returns per-epoch records (train loss + val metrics when a
/// validation set is given).
template <typename T>
std::vector<EpochRecord> finetune(DownstreamModel<T>& model, const LabeledDataset& train, const LabeledDataset* val,
                                  const FinetuneOptions& opt) {
    if (train.size() == 0) throw std::invalid_argument("finetune: empty training set");
    std::vector<std::pair<std::string, TensorPtr<T>>> trainable;
    for (const auto& [name, p] : model.store().params) {
        if (opt.freeze_extractor && DownstreamModel<T>::is_extractor_tensor(name)) continue;
        trainable.emplace_back(name, p);
    }
    AdamOptions<T> aopt;
    aopt.lr = static_cast<T>(opt.lr);
    Adam<T> adam(std::move(trainable), aopt);

    const std::int64_t K = model.n_outputs();
    std::vector<EpochRecord> log;
    for (std::int64_t epoch = 0; epoch < opt.epochs; ++epoch) {
        std::vector<std::int64_t> order(static_cast<std::size_t>(train.size()));
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(mix64(opt.seed, mix64(hash_str("finetune_epoch"), static_cast<std::uint64_t>(epoch))));
        shuffle_rng.shuffle(order.begin(), order.end());

        double loss_sum = 0.0;
        std::int64_t n_batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
            std::vector<std::int64_t> idx(order.begin() + static_cast<std::int64_t>(start),
                                          order.begin() + static_cast<std::int64_t>(end));
            Tape<T> tape;
            adam.zero_grad();
            auto detail = model.forward_detail(tape, labeled_images_to_tensor<T>(train, idx), true,
                                               !opt.freeze_extractor);
            TensorPtr<T> loss;
            if (opt.task == Task::binary) {
                std::vector<int> targets;
                for (auto i : idx) targets.push_back(train.binary[static_cast<std::size_t>(i)]);
                loss = cross_entropy(tape, detail.logits, targets);
            } else {
                std::vector<T> targets;
                for (auto i : idx)
                    for (std::int64_t k = 0; k < K; ++k)
                        targets.push_back(static_cast<T>(train.multihot[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)]));
                loss = bce_multilabel(tape, detail.logits, targets);
            }
            tape.backward(loss);
            adam.step();
            loss_sum += static_cast<double>(loss->item());
            ++n_batches;
        }
        EpochRecord tr;
        tr.epoch = epoch;
        tr.split = "train";
        tr.loss = n_batches ? loss_sum / static_cast<double>(n_batches) : 0.0;
        log.push_back(tr);
        if (val && val->size() > 0) {
            EpochRecord vr;
            vr.epoch = epoch;
            vr.split = "val";
            vr.metrics = evaluate_downstream(model, *val, opt.task, opt.batch_size);
            log.push_back(vr);
        }
    }
    return log;
}

}  // namespace timnet
