#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "timnet/nn.hpp"

namespace timnet {

/// Architecture hyperparameters shared by both branches and the heads.
struct ArchConfig {
    std::int64_t d_emb = 64;         // joint embedding length
    std::int64_t d_tok = 32;         // token feature width
    std::int64_t text_layers = 2;    // self-attention blocks
    std::int64_t text_ff = 64;       // feed-forward width inside a block
    std::int64_t text_channels = 64; // channels of the text branch 1x1 conv
    std::int64_t max_len = 32;       // token sequence length
    std::int64_t image_stages = 3;   // residual stages
    std::int64_t base_width = 16;    // channels of the first stage
    std::int64_t in_channels = 1;    // image channels
    std::int64_t head_hidden = 32;   // matching head hidden width
    std::int64_t cls_hidden = 64;    // downstream head hidden width
};

/// Text branch: token + learned positional embeddings, a stack of single-head
/// self-attention blocks, a per-position 1x1 conv (+ReLU), masked GAP over
/// non-pad positions, and a final FC to d_emb.
///
/// Pad positions (token id 0) are masked out of attention keys and excluded
/// from the GAP mean, so embeddings are invariant to trailing padding. An
/// all-pad sequence falls back to treating position 0 as active.
template <typename T>
class TextEncoder {
public:
    TextEncoder() = default;
    TextEncoder(ParamStore<T>& store, const std::string& prefix, std::int64_t vocab_size, const ArchConfig& arch,
                Rng& rng)
        : arch_(arch), vocab_size_(vocab_size) {
        token_emb_ = store.add_param(prefix + ".token_emb", randn<T>({vocab_size, arch.d_tok}, rng, 0.25));
        pos_emb_ = store.add_param(prefix + ".pos_emb", randn<T>({arch.max_len, arch.d_tok}, rng, 0.25));
        for (std::int64_t i = 0; i < arch.text_layers; ++i)
            blocks_.emplace_back(store, prefix + ".block" + std::to_string(i), arch.d_tok, arch.text_ff, rng);
        conv1x1_ = Linear<T>(store, prefix + ".conv1x1", arch.d_tok, arch.text_channels, rng, InitMode::he);
        fc_ = Linear<T>(store, prefix + ".fc", arch.text_channels, arch.d_emb, rng, InitMode::xavier);
        positions_.resize(static_cast<std::size_t>(arch.max_len));
        std::iota(positions_.begin(), positions_.end(), 0);
    }

    std::int64_t vocab_size() const { return vocab_size_; }

    /// tokens: N sequences of exactly max_len ids. Returns [N, d_emb].
    TensorPtr<T> encode(Tape<T>& tape, const std::vector<std::vector<int>>& tokens) const {
        if (tokens.empty()) throw std::invalid_argument("encode_text: empty batch");
        std::vector<TensorPtr<T>> pooled;
        pooled.reserve(tokens.size());
        for (const auto& ids : tokens) pooled.push_back(encode_pooled(tape, ids));
        auto g = concat_rows(tape, pooled);  // [N, text_channels]
        return fc_.forward(tape, g);
    }

private:
    /// One sequence up to the masked GAP: [text_channels].
    TensorPtr<T> encode_pooled(Tape<T>& tape, const std::vector<int>& ids) const {
        if (static_cast<std::int64_t>(ids.size()) != arch_.max_len)
            throw std::invalid_argument("encode_text: sequence length " + std::to_string(ids.size()) +
                                        " does not match max_len " + std::to_string(arch_.max_len));
        std::vector<std::uint8_t> active(ids.size(), 0);
        bool any = false;
        for (std::size_t l = 0; l < ids.size(); ++l) {
            active[l] = ids[l] != 0 ? 1 : 0;
            any = any || active[l];
        }
        if (!any) active[0] = 1;  // all-pad fallback
        auto x = add(tape, embedding_gather(tape, token_emb_, ids), embedding_gather(tape, pos_emb_, positions_));
        for (const auto& block : blocks_) x = block.forward(tape, x, active);
        auto f = relu(tape, conv1x1_.forward(tape, x));  // [L, text_channels]
        return masked_mean_rows(tape, f, active);
    }

    ArchConfig arch_;
    std::int64_t vocab_size_ = 0;
    TensorPtr<T> token_emb_;
    TensorPtr<T> pos_emb_;
    std::vector<AttentionBlock<T>> blocks_;
    Linear<T> conv1x1_;
    Linear<T> fc_;
    std::vector<int> positions_;
};

/// Convolutional trunk of the image branch: stem conv, S identity-skip
/// residual units with stride-2 channel-doubling transitions between them,
/// then a 1x1 conv + batchnorm + ReLU neck. This sub-network is the feature
/// extractor transferred to downstream tasks.
template <typename T>
class FeatureExtractor {
public:
    FeatureExtractor() = default;
    FeatureExtractor(ParamStore<T>& store, const std::string& prefix, const ArchConfig& arch, Rng& rng) : arch_(arch) {
        const std::int64_t S = arch.image_stages;
        std::int64_t width = arch.base_width;
        stem_ = Conv2dLayer<T>(store, prefix + ".stem", arch.in_channels, width, 3, 1, 1, rng);
        for (std::int64_t s = 0; s < S; ++s) {
            const std::string sp = prefix + ".stage" + std::to_string(s + 1);
            stages_.push_back(Stage{
                Conv2dLayer<T>(store, sp + ".conv1", width, width, 3, 1, 1, rng),
                BatchNormLayer<T>(store, sp + ".bn1", width),
                Conv2dLayer<T>(store, sp + ".conv2", width, width, 3, 1, 1, rng),
                BatchNormLayer<T>(store, sp + ".bn2", width),
            });
            if (s + 1 < S) {
                // 2x2 stride-2 kernels halve even spatial sizes exactly.
                const std::string tp = prefix + ".trans" + std::to_string(s + 1);
                transitions_.push_back(Transition{
                    Conv2dLayer<T>(store, tp + ".conv", width, width * 2, 2, 2, 0, rng),
                    BatchNormLayer<T>(store, tp + ".bn", width * 2),
                });
                width *= 2;
            }
        }
        out_channels_ = width;
        neck_conv_ = Conv2dLayer<T>(store, prefix + ".neck.conv", width, width, 1, 1, 0, rng);
        neck_bn_ = BatchNormLayer<T>(store, prefix + ".neck.bn", width);
    }

    std::int64_t out_channels() const { return out_channels_; }
    std::int64_t downsample_factor() const { return std::int64_t(1) << (arch_.image_stages - 1); }

    /// x: [N, C, H, W] with H and W divisible by 2^(stages-1).
    /// Returns [N, out_channels, H/f, W/f].
    TensorPtr<T> forward(Tape<T>& tape, const TensorPtr<T>& x, bool training) const {
        if (x->rank() != 4)
            throw std::invalid_argument("feature extractor: expects [N,C,H,W], got " + shape_str(x->shape()));
        const std::int64_t f = downsample_factor();
        if (x->dim(2) % f != 0 || x->dim(3) % f != 0)
            throw std::invalid_argument("feature extractor: spatial size " + shape_str({x->dim(2), x->dim(3)}) +
                                        " not divisible by " + std::to_string(f));
        auto h = stem_.forward(tape, x);
        for (std::size_t s = 0; s < stages_.size(); ++s) {
            const auto& st = stages_[s];
            auto u = relu(tape, st.bn1.forward(tape, st.conv1.forward(tape, h), training));
            u = relu(tape, st.bn2.forward(tape, st.conv2.forward(tape, u), training));
            h = add(tape, h, u);
            if (s < transitions_.size()) {
                const auto& tr = transitions_[s];
                h = relu(tape, tr.bn.forward(tape, tr.conv.forward(tape, h), training));
            }
        }
        return relu(tape, neck_bn_.forward(tape, neck_conv_.forward(tape, h), training));
    }

private:
    struct Stage {
        Conv2dLayer<T> conv1;
        BatchNormLayer<T> bn1;
        Conv2dLayer<T> conv2;
        BatchNormLayer<T> bn2;
    };
    struct Transition {
        Conv2dLayer<T> conv;
        BatchNormLayer<T> bn;
    };

    ArchConfig arch_;
    Conv2dLayer<T> stem_;
    std::vector<Stage> stages_;
    std::vector<Transition> transitions_;
    Conv2dLayer<T> neck_conv_;
    BatchNormLayer<T> neck_bn_;
    std::int64_t out_channels_ = 0;
};

/// Image branch: feature extractor, GAP, FC to d_emb.
template <typename T>
class ImageEncoder {
public:
    ImageEncoder() = default;
    ImageEncoder(ParamStore<T>& store, const std::string& prefix, const ArchConfig& arch, Rng& rng)
        : extractor_(store, prefix, arch, rng) {
        fc_ = Linear<T>(store, prefix + ".fc", extractor_.out_channels(), arch.d_emb, rng, InitMode::xavier);
    }

    const FeatureExtractor<T>& extractor() const { return extractor_; }
    const Linear<T>& fc() const { return fc_; }

    /// Activations after the neck, before GAP: [N, C_f, H_f, W_f].
    TensorPtr<T> extract_feature_maps(Tape<T>& tape, const TensorPtr<T>& x, bool training) const {
        return extractor_.forward(tape, x, training);
    }

    /// x: [N, C, H, W]. Returns [N, d_emb].
    TensorPtr<T> encode(Tape<T>& tape, const TensorPtr<T>& x, bool training) const {
        return fc_.forward(tape, global_avg_pool(tape, extract_feature_maps(tape, x, training)));
    }

private:
    FeatureExtractor<T> extractor_;
    Linear<T> fc_;
};

}  // namespace timnet
