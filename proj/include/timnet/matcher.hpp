#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "timnet/adam.hpp"
#include "timnet/datagen.hpp"
#include "timnet/encoders.hpp"
#include "timnet/metrics.hpp"
#include "timnet/nn.hpp"

namespace timnet {

/// A text-image pair by corpus index. Negative pairs have report_index !=
/// image_index.
struct PairedExample {
    std::int32_t image_index = 0;
    std::int32_t report_index = 0;
    bool match = false;
};

/// One true pair per corpus item plus round(negative_ratio * n) negatives;
/// negatives cycle over images and draw a report from a different item.
/// Output order is a seeded shuffle.
inline std::vector<PairedExample> build_pairs(std::int64_t n_items, double negative_ratio, std::uint64_t seed) {
    if (n_items < 2) throw std::invalid_argument("build_pairs: need at least 2 items to form negative pairs");
    if (!(negative_ratio > 0.0)) throw std::invalid_argument("build_pairs: negative_ratio must be > 0");
    Rng rng(seed);
    std::vector<PairedExample> pairs;
    const std::int64_t n_neg = static_cast<std::int64_t>(std::llround(negative_ratio * static_cast<double>(n_items)));
    pairs.reserve(static_cast<std::size_t>(n_items + n_neg));
    for (std::int64_t i = 0; i < n_items; ++i)
        pairs.push_back({static_cast<std::int32_t>(i), static_cast<std::int32_t>(i), true});
    for (std::int64_t k = 0; k < n_neg; ++k) {
        const std::int64_t img = k % n_items;
        std::int64_t rep = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(n_items - 1)));
        if (rep >= img) ++rep;
        pairs.push_back({static_cast<std::int32_t>(img), static_cast<std::int32_t>(rep), false});
    }
    rng.shuffle(pairs.begin(), pairs.end());
    return pairs;
}

/// Shallow match/mismatch classifier over |v_t - v_i|. The output layer is
/// zero-initialized, so an untrained network scores every pair 0.5.
template <typename T>
class MatchingHead {
public:
    MatchingHead() = default;
    MatchingHead(ParamStore<T>& store, const std::string& prefix, std::int64_t d_emb, std::int64_t hidden, Rng& rng) {
        fc1_ = Linear<T>(store, prefix + ".fc1", d_emb, hidden, rng, InitMode::he);
        fc2_ = Linear<T>(store, prefix + ".fc2", hidden, 2, rng, InitMode::zero);
    }

    TensorPtr<T> forward(Tape<T>& tape, const TensorPtr<T>& x) const {
        return fc2_.forward(tape, relu(tape, fc1_.forward(tape, x)));
    }

private:
    Linear<T> fc1_, fc2_;
};

/// The full matching network: h_cls(|h_t(text) - h_i(image)|).
/// Logit index 1 is "match".
template <typename T>
class TimNet {
public:
    TimNet(std::int64_t vocab_size, const ArchConfig& arch, std::uint64_t seed) : arch_(arch) {
        Rng rng(mix64(seed, hash_str("timnet.init")));
        text_ = TextEncoder<T>(store_, "text_encoder", vocab_size, arch, rng);
        image_ = ImageEncoder<T>(store_, "image_encoder", arch, rng);
        head_ = MatchingHead<T>(store_, "head", arch.d_emb, arch.head_hidden, rng);
    }

    const ArchConfig& arch() const { return arch_; }
    ParamStore<T>& store() { return store_; }
    const ParamStore<T>& store() const { return store_; }
    const TextEncoder<T>& text_encoder() const { return text_; }
    const ImageEncoder<T>& image_encoder() const { return image_; }
    const MatchingHead<T>& head() const { return head_; }

    /// tokens: N sequences; images: [N,C,H,W]. Returns logits [N,2].
    TensorPtr<T> forward(Tape<T>& tape, const std::vector<std::vector<int>>& tokens, const TensorPtr<T>& images,
                         bool training) const {
        auto vt = text_.encode(tape, tokens);
        auto vi = image_.encode(tape, images, training);
        return head_.forward(tape, abs_diff(tape, vt, vi));
    }

private:
    ArchConfig arch_;
    ParamStore<T> store_;
    TextEncoder<T> text_;
    ImageEncoder<T> image_;
    MatchingHead<T> head_;
};

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> images_to_tensor(const Corpus& corpus, const std::vector<std::int32_t>& indices) {
    const std::int64_t n = static_cast<std::int64_t>(indices.size());
    const std::int64_t hw = static_cast<std::int64_t>(corpus.height) * corpus.width;
    std::vector<T> data(static_cast<std::size_t>(n * hw));
    for (std::int64_t i = 0; i < n; ++i) {
        const auto& img = corpus.items[static_cast<std::size_t>(indices[static_cast<std::size_t>(i)])].image;
        for (std::int64_t p = 0; p < hw; ++p)
            data[static_cast<std::size_t>(i * hw + p)] = static_cast<T>(img[static_cast<std::size_t>(p)]);
    }
    return make_tensor<T>({n, 1, corpus.height, corpus.width}, std::move(data));
}

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

struct MatchTrainOptions {
    double lr = 1e-4;
    std::int64_t epochs = 10;
    std::int64_t batch_size = 16;
    double negative_ratio = 1.0;
    std::uint64_t seed = 1;
};

struct EpochRecord {
    std::int64_t epoch = 0;
    std::string split;  // "train" or "val"
    double loss = 0.0;
    MetricReport metrics;
};

/// Scores every pair with P(match); eval mode, no gradients.
template <typename T>
void score_pairs(const TimNet<T>& net, const Corpus& corpus, const std::vector<PairedExample>& pairs,
                 std::int64_t batch_size, std::vector<double>& scores, std::vector<int>& labels,
                 double* mean_loss = nullptr) {
    scores.clear();
    labels.clear();
    double loss_sum = 0.0;
    std::int64_t loss_batches = 0;
    for (std::size_t start = 0; start < pairs.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(pairs.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<std::int32_t> img_idx;
        std::vector<std::vector<int>> tokens;
        std::vector<int> targets;
        for (std::size_t i = start; i < end; ++i) {
            img_idx.push_back(pairs[i].image_index);
            tokens.push_back(corpus.items[static_cast<std::size_t>(pairs[i].report_index)].tokens);
            targets.push_back(pairs[i].match ? 1 : 0);
        }
        Tape<T> tape(false);
        auto logits = net.forward(tape, tokens, images_to_tensor<T>(corpus, img_idx), false);
        if (mean_loss) {
            loss_sum += static_cast<double>(cross_entropy(tape, logits, targets)->item());
            ++loss_batches;
        }
        const std::int64_t k = logits->dim(1);
        for (std::size_t i = 0; i < targets.size(); ++i) {
            const T z0 = logits->data[i * static_cast<std::size_t>(k)];
            const T z1 = logits->data[i * static_cast<std::size_t>(k) + 1];
            const double m = std::max(static_cast<double>(z0), static_cast<double>(z1));
            const double e0 = std::exp(static_cast<double>(z0) - m);
            const double e1 = std::exp(static_cast<double>(z1) - m);
            scores.push_back(e1 / (e0 + e1));
            labels.push_back(targets[i]);
        }
    }
    if (mean_loss) *mean_loss = loss_batches ? loss_sum / static_cast<double>(loss_batches) : 0.0;
}

/// All six metrics on P(match). Requires both classes present.
template <typename T>
MetricReport evaluate_matching(const TimNet<T>& net, const Corpus& corpus, const std::vector<PairedExample>& pairs,
                               std::int64_t batch_size = 16) {
    if (pairs.empty()) throw std::invalid_argument("evaluate_matching: no pairs");
    bool has_pos = false, has_neg = false;
    for (const auto& p : pairs) (p.match ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg)
        throw std::invalid_argument("evaluate_matching: pair set has a single class; auROC undefined");
    std::vector<double> scores;
    std::vector<int> labels;
    score_pairs(net, corpus, pairs, batch_size, scores, labels);
    return binary_report(scores, labels);
}

/// Weakly supervised pre-training. Negative pairs are redrawn every epoch
/// from an epoch-derived seed; held-out pairs are fixed.
template <typename T>
std::vector<EpochRecord> pretrain(TimNet<T>& net, const Corpus& train, const Corpus& heldout,
                                  const MatchTrainOptions& opt) {
    if (train.size() < 2) throw std::invalid_argument("pretrain: training corpus too small");
    AdamOptions<T> aopt;
    aopt.lr = static_cast<T>(opt.lr);
    Adam<T> adam(net.store().params, aopt);

    std::vector<PairedExample> val_pairs;
    if (heldout.size() >= 2)
        val_pairs = build_pairs(heldout.size(), opt.negative_ratio, mix64(opt.seed, hash_str("val_pairs")));

    std::vector<EpochRecord> log;
    for (std::int64_t epoch = 0; epoch < opt.epochs; ++epoch) {
        const auto pairs =
            build_pairs(train.size(), opt.negative_ratio, mix64(opt.seed, mix64(hash_str("epoch_pairs"),
                                                                                static_cast<std::uint64_t>(epoch))));
        double loss_sum = 0.0;
        std::int64_t n_batches = 0;
        std::vector<double> train_scores;
        std::vector<int> train_labels;
        for (std::size_t start = 0; start < pairs.size(); start += static_cast<std::size_t>(opt.batch_size)) {
            const std::size_t end = std::min(pairs.size(), start + static_cast<std::size_t>(opt.batch_size));
            std::vector<std::int32_t> img_idx;
            std::vector<std::vector<int>> tokens;
            std::vector<int> targets;
            for (std::size_t i = start; i < end; ++i) {
                img_idx.push_back(pairs[i].image_index);
                tokens.push_back(train.items[static_cast<std::size_t>(pairs[i].report_index)].tokens);
                targets.push_back(pairs[i].match ? 1 : 0);
            }
            Tape<T> tape;
            adam.zero_grad();
            auto logits = net.forward(tape, tokens, images_to_tensor<T>(train, img_idx), true);
            auto loss = cross_entropy(tape, logits, targets);
            tape.backward(loss);
            adam.step();
            loss_sum += static_cast<double>(loss->item());
            ++n_batches;
            const std::int64_t k = logits->dim(1);
            for (std::size_t i = 0; i < targets.size(); ++i) {
                const double z0 = static_cast<double>(logits->data[i * static_cast<std::size_t>(k)]);
                const double z1 = static_cast<double>(logits->data[i * static_cast<std::size_t>(k) + 1]);
                const double m = std::max(z0, z1);
                const double e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
                train_scores.push_back(e1 / (e0 + e1));
                train_labels.push_back(targets[i]);
            }
        }
        EpochRecord tr;
        tr.epoch = epoch;
        tr.split = "train";
        tr.loss = n_batches ? loss_sum / static_cast<double>(n_batches) : 0.0;
        tr.metrics = binary_report(train_scores, train_labels);
        log.push_back(tr);

        if (!val_pairs.empty()) {
            EpochRecord vr;
            vr.epoch = epoch;
            vr.split = "val";
            std::vector<double> scores;
            std::vector<int> labels;
            score_pairs(net, heldout, val_pairs, opt.batch_size, scores, labels, &vr.loss);
            vr.metrics = binary_report(scores, labels);
            log.push_back(vr);
        }
    }
    return log;
}

}  // namespace timnet
