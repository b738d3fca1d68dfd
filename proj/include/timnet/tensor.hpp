#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "timnet/common.hpp"

namespace timnet {

/// N-dimensional array of T (float or double), row-major and contiguous.
/// `grad` is allocated lazily on first accumulation and has the same length
/// as `data`. Shape is fixed at construction.
template <typename T>
class Tensor {
public:
    std::vector<T> data;
    std::vector<T> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;

    Tensor(std::vector<std::int64_t> shape, std::vector<T> values, bool req_grad = false)
        : data(std::move(values)), requires_grad(req_grad), shape_(std::move(shape)) {
        size_ = 1;
        for (auto d : shape_) {
            if (d <= 0) throw std::invalid_argument("tensor: dimension sizes must be positive, got " + shape_str(shape_));
            size_ *= d;
        }
        if (static_cast<std::int64_t>(data.size()) != size_)
            throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape_));
    }

    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::int64_t dim(std::size_t i) const { return shape_[i]; }
    std::size_t rank() const { return shape_.size(); }
    std::int64_t size() const { return size_; }

    T item() const {
        if (size_ != 1) throw std::invalid_argument("item(): tensor has size " + std::to_string(size_));
        return data[0];
    }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }

    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
    }

private:
    std::vector<std::int64_t> shape_;
    std::int64_t size_ = 0;
};

template <typename T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <typename T>
TensorPtr<T> make_tensor(std::vector<std::int64_t> shape, std::vector<T> values, bool req_grad = false) {
    return std::make_shared<Tensor<T>>(std::move(shape), std::move(values), req_grad);
}

template <typename T>
TensorPtr<T> zeros(std::vector<std::int64_t> shape, bool req_grad = false) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return make_tensor<T>(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), T(0)), req_grad);
}

template <typename T>
TensorPtr<T> full(std::vector<std::int64_t> shape, T value, bool req_grad = false) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return make_tensor<T>(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), value), req_grad);
}

template <typename T>
TensorPtr<T> scalar(T value, bool req_grad = false) {
    return make_tensor<T>({1}, {value}, req_grad);
}

template <typename T>
TensorPtr<T> randn(std::vector<std::int64_t> shape, Rng& rng, double stddev = 1.0, bool req_grad = false) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<T> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
    return make_tensor<T>(std::move(shape), std::move(v), req_grad);
}

/// Records operations in execution order; backward() replays the rules in
/// reverse. Replay order is reverse topological because every input tensor
/// exists before the op that consumes it.
///
/// Gradients of leaves (tensors that are never an op output) accumulate
/// across backward() calls; gradients of intermediates are reset at the
/// start of each backward() so repeated calls stay consistent.
template <typename T>
class Tape {
public:
    Tape() = default;
    explicit Tape(bool recording) : recording_(recording) {}

    bool recording() const { return recording_; }
    void set_recording(bool r) { recording_ = r; }
    std::size_t size() const { return records_.size(); }

    void record(std::vector<TensorPtr<T>> inputs, TensorPtr<T> output, std::function<void()> backward_rule) {
        records_.push_back(Record{std::move(inputs), std::move(output), std::move(backward_rule)});
    }

    void backward(const TensorPtr<T>& loss) {
        if (loss->size() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss->shape()));
        if (records_.empty()) throw std::invalid_argument("backward: tape is empty");
        for (auto& r : records_) {
            r.output->ensure_grad();
            r.output->zero_grad();
        }
        loss->ensure_grad();
        loss->grad[0] += T(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            it->backward();
        }
    }

    void clear() { records_.clear(); }

private:
    struct Record {
        std::vector<TensorPtr<T>> inputs;
        TensorPtr<T> output;
        std::function<void()> backward;
    };
    std::vector<Record> records_;
    bool recording_ = true;
};

namespace detail {

template <typename T>
inline bool any_requires_grad(std::initializer_list<TensorPtr<T>> ts) {
    for (const auto& t : ts)
        if (t && t->requires_grad) return true;
    return false;
}

/// Adds src into dst's grad buffer elementwise.
template <typename T>
inline void accumulate(Tensor<T>& dst, const T* src) {
    dst.ensure_grad();
    T* g = dst.grad.data();
    const std::int64_t n = dst.size();
    for (std::int64_t i = 0; i < n; ++i) g[i] += src[i];
}

}  // namespace detail

}  // namespace timnet
