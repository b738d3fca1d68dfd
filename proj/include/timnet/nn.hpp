#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "timnet/ops.hpp"
#include "timnet/tensor.hpp"

namespace timnet {

/// Named registry of a model's trainable parameters and non-trainable
/// buffers (batchnorm running statistics). Names are dotted paths; weight
/// files and partial loads are keyed on them.
template <typename T>
struct ParamStore {
    std::vector<std::pair<std::string, TensorPtr<T>>> params;
    std::vector<std::pair<std::string, TensorPtr<T>>> buffers;

    TensorPtr<T> add_param(const std::string& name, TensorPtr<T> t) {
        t->requires_grad = true;
        params.emplace_back(name, t);
        return t;
    }

    TensorPtr<T> add_buffer(const std::string& name, TensorPtr<T> t) {
        t->requires_grad = false;
        buffers.emplace_back(name, t);
        return t;
    }

    std::int64_t param_count() const {
        std::int64_t n = 0;
        for (const auto& [name, p] : params) {
            (void)name;
            n += p->size();
        }
        return n;
    }

    TensorPtr<T> find(const std::string& name) const {
        for (const auto& [n, p] : params)
            if (n == name) return p;
        for (const auto& [n, p] : buffers)
            if (n == name) return p;
        return nullptr;
    }
};

// ---------------------------------------------------------------------------
// Layers. Constructors draw their initial values from the given Rng in a
// fixed order, so a (seed, architecture) pair fully determines the model.
// ---------------------------------------------------------------------------

enum class InitMode { he, xavier, zero };

template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(ParamStore<T>& store, const std::string& prefix, std::int64_t in, std::int64_t out, Rng& rng,
           InitMode init = InitMode::he) {
        double std_dev = 0.0;
        switch (init) {
            case InitMode::he: std_dev = std::sqrt(2.0 / static_cast<double>(in)); break;
            case InitMode::xavier: std_dev = std::sqrt(1.0 / static_cast<double>(in)); break;
            case InitMode::zero: std_dev = 0.0; break;
        }
        weight_ = store.add_param(prefix + ".weight",
                                  std_dev > 0 ? randn<T>({in, out}, rng, std_dev) : zeros<T>({in, out}));
        bias_ = store.add_param(prefix + ".bias", zeros<T>({out}));
    }

    TensorPtr<T> forward(Tape<T>& tape, const TensorPtr<T>& x) const {
        return bias_add(tape, matmul(tape, x, weight_), bias_);
    }

    const TensorPtr<T>& weight() const { return weight_; }
    const TensorPtr<T>& bias() const { return bias_; }

private:
    TensorPtr<T> weight_;
    TensorPtr<T> bias_;
};

template <typename T>
class Conv2dLayer {
public:
    Conv2dLayer() = default;
    Conv2dLayer(ParamStore<T>& store, const std::string& prefix, std::int64_t in_ch, std::int64_t out_ch,
                std::int64_t kernel, std::int64_t stride, std::int64_t padding, Rng& rng)
        : stride_(stride), padding_(padding) {
        const double std_dev = std::sqrt(2.0 / static_cast<double>(in_ch * kernel * kernel));
        weight_ = store.add_param(prefix + ".weight", randn<T>({out_ch, in_ch, kernel, kernel}, rng, std_dev));
    }

    TensorPtr<T> forward(Tape<T>& tape, const TensorPtr<T>& x) const {
        return conv2d(tape, x, weight_, stride_, padding_);
    }

    const TensorPtr<T>& weight() const { return weight_; }

private:
    TensorPtr<T> weight_;
    std::int64_t stride_ = 1;
    std::int64_t padding_ = 0;
};

template <typename T>
class BatchNormLayer {
public:
    BatchNormLayer() = default;
    BatchNormLayer(ParamStore<T>& store, const std::string& prefix, std::int64_t channels) {
        gamma_ = store.add_param(prefix + ".gamma", full<T>({channels}, T(1)));
        beta_ = store.add_param(prefix + ".beta", zeros<T>({channels}));
        stats_.running_mean = store.add_buffer(prefix + ".running_mean", zeros<T>({channels}));
        stats_.running_var = store.add_buffer(prefix + ".running_var", full<T>({channels}, T(1)));
    }

    TensorPtr<T> forward(Tape<T>& tape, const TensorPtr<T>& x, bool training) const {
        return batch_norm(tape, x, gamma_, beta_, const_cast<BnStats<T>*>(&stats_), training);
    }

    const BnStats<T>& stats() const { return stats_; }

private:
    TensorPtr<T> gamma_;
    TensorPtr<T> beta_;
    BnStats<T> stats_;
};

template <typename T>
class LayerNormLayer {
public:
    LayerNormLayer() = default;
    LayerNormLayer(ParamStore<T>& store, const std::string& prefix, std::int64_t dim) {
        gamma_ = store.add_param(prefix + ".gamma", full<T>({dim}, T(1)));
        beta_ = store.add_param(prefix + ".beta", zeros<T>({dim}));
    }

    TensorPtr<T> forward(Tape<T>& tape, const TensorPtr<T>& x) const {
        return layer_norm(tape, x, gamma_, beta_);
    }

private:
    TensorPtr<T> gamma_;
    TensorPtr<T> beta_;
};

/// Single-head transformer encoder block: scaled dot-product self-attention
/// with key masking, position-wise feed-forward, residuals, post-layernorm.
template <typename T>
class AttentionBlock {
public:
    AttentionBlock() = default;
    AttentionBlock(ParamStore<T>& store, const std::string& prefix, std::int64_t d_model, std::int64_t d_ff, Rng& rng)
        : d_model_(d_model) {
        wq_ = Linear<T>(store, prefix + ".wq", d_model, d_model, rng, InitMode::xavier);
        wk_ = Linear<T>(store, prefix + ".wk", d_model, d_model, rng, InitMode::xavier);
        wv_ = Linear<T>(store, prefix + ".wv", d_model, d_model, rng, InitMode::xavier);
        wo_ = Linear<T>(store, prefix + ".wo", d_model, d_model, rng, InitMode::xavier);
        ln1_ = LayerNormLayer<T>(store, prefix + ".ln1", d_model);
        ff1_ = Linear<T>(store, prefix + ".ff1", d_model, d_ff, rng, InitMode::he);
        ff2_ = Linear<T>(store, prefix + ".ff2", d_ff, d_model, rng, InitMode::xavier);
        ln2_ = LayerNormLayer<T>(store, prefix + ".ln2", d_model);
    }

    /// x: [L, d_model]; active marks non-pad positions (used as key mask).
    TensorPtr<T> forward(Tape<T>& tape, const TensorPtr<T>& x, const std::vector<std::uint8_t>& active) const {
        auto q = wq_.forward(tape, x);
        auto k = wk_.forward(tape, x);
        auto v = wv_.forward(tape, x);
        auto scores = scale(tape, matmul(tape, q, transpose2d(tape, k)),
                            T(1) / static_cast<T>(std::sqrt(static_cast<double>(d_model_))));
        auto probs = masked_softmax_rows(tape, scores, active);
        auto att = wo_.forward(tape, matmul(tape, probs, v));
        auto x1 = ln1_.forward(tape, add(tape, x, att));
        auto ff = ff2_.forward(tape, relu(tape, ff1_.forward(tape, x1)));
        return ln2_.forward(tape, add(tape, x1, ff));
    }

private:
    std::int64_t d_model_ = 0;
    Linear<T> wq_, wk_, wv_, wo_;
    LayerNormLayer<T> ln1_, ln2_;
    Linear<T> ff1_, ff2_;
};

}  // namespace timnet
