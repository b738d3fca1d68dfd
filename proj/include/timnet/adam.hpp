#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "timnet/tensor.hpp"

namespace timnet {

template <typename T>
struct AdamOptions {
    T lr = T(1e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
};

/// Bias-corrected Adam over a fixed list of named parameters.
template <typename T>
class Adam {
public:
    Adam(std::vector<std::pair<std::string, TensorPtr<T>>> params, AdamOptions<T> opt = {})
        : params_(std::move(params)), opt_(opt) {
        slots_.reserve(params_.size());
        for (const auto& [name, p] : params_) {
            (void)name;
            slots_.push_back(Slot{std::vector<T>(p->data.size(), T(0)), std::vector<T>(p->data.size(), T(0))});
        }
    }

    const AdamOptions<T>& options() const { return opt_; }
    std::int64_t step_count() const { return t_; }

    void zero_grad() {
        for (auto& [name, p] : params_) {
            (void)name;
            p->zero_grad();
        }
    }

    void step() {
        ++t_;
        const T bc1 = T(1) - std::pow(opt_.beta1, static_cast<T>(t_));
        const T bc2 = T(1) - std::pow(opt_.beta2, static_cast<T>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& [name, p] = params_[k];
            if (p->grad.size() != p->data.size())
                throw std::invalid_argument("adam: parameter '" + name + "' has no gradient");
            auto& m = slots_[k].m;
            auto& v = slots_[k].v;
            for (std::size_t i = 0; i < p->data.size(); ++i) {
                const T g = p->grad[i];
                m[i] = opt_.beta1 * m[i] + (T(1) - opt_.beta1) * g;
                v[i] = opt_.beta2 * v[i] + (T(1) - opt_.beta2) * g * g;
                const T mhat = m[i] / bc1;
                const T vhat = v[i] / bc2;
                p->data[i] -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
            }
        }
    }

private:
    struct Slot {
        std::vector<T> m;
        std::vector<T> v;
    };
    std::vector<std::pair<std::string, TensorPtr<T>>> params_;
    std::vector<Slot> slots_;
    AdamOptions<T> opt_;
    std::int64_t t_ = 0;
};

}  // namespace timnet
