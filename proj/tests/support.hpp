#pragma once

// Shared test utilities: the central finite-difference gradient checker and
// small random-tensor helpers. The checker is the independent oracle for
// every differentiable op; it must stay free of any dependency on the
// backward rules it verifies.

#include <cmath>
#include <functional>
#include <type_traits>
#include <vector>

#include "timnet/tensor.hpp"

namespace testsupport {

using timnet::Rng;
using timnet::Tape;
using timnet::TensorPtr;

template <typename T>
TensorPtr<T> rand_tensor(std::vector<std::int64_t> shape, Rng& rng, double scale = 1.0, bool req_grad = true) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<T> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = static_cast<T>(rng.normal(0.0, scale));
    return timnet::make_tensor<T>(std::move(shape), std::move(v), req_grad);
}

/// Max hybrid-relative error between autodiff and central finite differences
/// over every element of every leaf. `forward` must rebuild the graph from
/// the leaves on the given tape and return a scalar loss.
template <typename T>
double grad_check(const std::function<TensorPtr<T>(Tape<T>&)>& forward, const std::vector<TensorPtr<T>>& leaves) {
    for (const auto& l : leaves) {
        l->requires_grad = true;
        l->ensure_grad();
        l->zero_grad();
    }
    {
        Tape<T> tape;
        auto loss = forward(tape);
        tape.backward(loss);
    }
    std::vector<std::vector<T>> ad;
    ad.reserve(leaves.size());
    for (const auto& l : leaves) ad.push_back(l->grad);

    // 64-bit: h = 1e-6 * max(1,|x|). 32-bit: float rounding noise in the loss
    // forces a larger step (the 1e-2 tolerance absorbs the extra truncation).
    const double h_base = std::is_same_v<T, double> ? 1e-6 : 1e-2;
    double max_rel = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto& leaf = *leaves[li];
        for (std::size_t i = 0; i < leaf.data.size(); ++i) {
            const T x0 = leaf.data[i];
            const T h = static_cast<T>(h_base * std::max(1.0, std::abs(static_cast<double>(x0))));
            leaf.data[i] = x0 + h;
            double fp, fm;
            {
                Tape<T> tape(false);
                fp = static_cast<double>(forward(tape)->item());
            }
            leaf.data[i] = x0 - h;
            {
                Tape<T> tape(false);
                fm = static_cast<double>(forward(tape)->item());
            }
            leaf.data[i] = x0;
            const double fd = (fp - fm) / (2.0 * static_cast<double>(h));
            const double adv = static_cast<double>(ad[li][i]);
            const double rel = std::abs(adv - fd) / std::max({1.0, std::abs(adv), std::abs(fd)});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace testsupport
