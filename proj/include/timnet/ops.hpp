#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "timnet/tensor.hpp"

namespace timnet {

// Differentiable tensor operations. Every op takes the tape first, computes
// the forward value, and (when recording and some input requires grad)
// records a backward rule. Backward rules accumulate into input->grad.
//
// Determinism contract: every output element is reduced in a canonical
// serial order that does not depend on the thread count.

namespace detail {

template <typename T>
inline TensorPtr<T> op_output(Tape<T>& tape, std::vector<std::int64_t> shape, std::vector<T> values,
                              std::initializer_list<TensorPtr<T>> inputs) {
    const bool rg = tape.recording() && any_requires_grad<T>(inputs);
    return make_tensor<T>(std::move(shape), std::move(values), rg);
}

inline std::int64_t conv_out_dim(std::int64_t in, std::int64_t k, std::int64_t stride, std::int64_t pad,
                                 const char* which) {
    const std::int64_t span = in + 2 * pad - k;
    if (span < 0 || span % stride != 0)
        throw std::invalid_argument(std::string("conv2d: non-integral output ") + which + " size: (" +
                                    std::to_string(in) + " + 2*" + std::to_string(pad) + " - " + std::to_string(k) +
                                    ") not divisible by stride " + std::to_string(stride));
    return span / stride + 1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / simple ops
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> add(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->shape() != b->shape())
        throw std::invalid_argument("add: shape mismatch " + shape_str(a->shape()) + " vs " + shape_str(b->shape()));
    std::vector<T> v(a->data.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a->data[i] + b->data[i];
    auto out = detail::op_output<T>(tape, a->shape(), std::move(v), {a, b});
    if (out->requires_grad) {
        tape.record({a, b}, out, [a, b, out] {
            if (a->requires_grad) detail::accumulate(*a, out->grad.data());
            if (b->requires_grad) detail::accumulate(*b, out->grad.data());
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> mul(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->shape() != b->shape())
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a->shape()) + " vs " + shape_str(b->shape()));
    std::vector<T> v(a->data.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a->data[i] * b->data[i];
    auto out = detail::op_output<T>(tape, a->shape(), std::move(v), {a, b});
    if (out->requires_grad) {
        tape.record({a, b}, out, [a, b, out] {
            const std::size_t n = out->grad.size();
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) a->grad[i] += b->data[i] * out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) b->grad[i] += a->data[i] * out->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> scale(Tape<T>& tape, const TensorPtr<T>& a, T c) {
    std::vector<T> v(a->data.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a->data[i] * c;
    auto out = detail::op_output<T>(tape, a->shape(), std::move(v), {a});
    if (out->requires_grad) {
        tape.record({a}, out, [a, out, c] {
            a->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += c * out->grad[i];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> relu(Tape<T>& tape, const TensorPtr<T>& a) {
    std::vector<T> v(a->data.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a->data[i] > T(0) ? a->data[i] : T(0);
    auto out = detail::op_output<T>(tape, a->shape(), std::move(v), {a});
    if (out->requires_grad) {
        tape.record({a}, out, [a, out] {
            a->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i)
                if (a->data[i] > T(0)) a->grad[i] += out->grad[i];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> sigmoid(Tape<T>& tape, const TensorPtr<T>& a) {
    std::vector<T> v(a->data.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const T x = a->data[i];
        if (x >= T(0)) {
            v[i] = T(1) / (T(1) + std::exp(-x));
        } else {
            const T e = std::exp(x);
            v[i] = e / (T(1) + e);
        }
    }
    auto out = detail::op_output<T>(tape, a->shape(), std::move(v), {a});
    if (out->requires_grad) {
        tape.record({a}, out, [a, out] {
            a->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i) {
                const T s = out->data[i];
                a->grad[i] += s * (T(1) - s) * out->grad[i];
            }
        });
    }
    return out;
}

/// Elementwise |a - b|. Subgradient at a == b is 0.
template <typename T>
TensorPtr<T> abs_diff(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->shape() != b->shape())
        throw std::invalid_argument("abs_diff: shape mismatch " + shape_str(a->shape()) + " vs " +
                                    shape_str(b->shape()));
    std::vector<T> v(a->data.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::abs(a->data[i] - b->data[i]);
    auto out = detail::op_output<T>(tape, a->shape(), std::move(v), {a, b});
    if (out->requires_grad) {
        tape.record({a, b}, out, [a, b, out] {
            const std::size_t n = out->grad.size();
            if (a->requires_grad) a->ensure_grad();
            if (b->requires_grad) b->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const T d = a->data[i] - b->data[i];
                const T s = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
                if (a->requires_grad) a->grad[i] += s * out->grad[i];
                if (b->requires_grad) b->grad[i] -= s * out->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> sum_all(Tape<T>& tape, const TensorPtr<T>& a) {
    T s = 0;
    for (T x : a->data) s += x;
    auto out = detail::op_output<T>(tape, {1}, {s}, {a});
    if (out->requires_grad) {
        tape.record({a}, out, [a, out] {
            a->ensure_grad();
            for (std::size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += out->grad[0];
        });
    }
    return out;
}

/// out = scalar element t.data[index], kept on the tape (used for CAM logits).
template <typename T>
TensorPtr<T> select_element(Tape<T>& tape, const TensorPtr<T>& a, std::int64_t index) {
    if (index < 0 || index >= a->size())
        throw std::invalid_argument("select_element: index " + std::to_string(index) + " out of range for size " +
                                    std::to_string(a->size()));
    auto out = detail::op_output<T>(tape, {1}, {a->data[static_cast<std::size_t>(index)]}, {a});
    if (out->requires_grad) {
        tape.record({a}, out, [a, out, index] {
            a->ensure_grad();
            a->grad[static_cast<std::size_t>(index)] += out->grad[0];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> matmul(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->rank() != 2 || b->rank() != 2)
        throw std::invalid_argument("matmul: expects rank-2 tensors, got " + shape_str(a->shape()) + " and " +
                                    shape_str(b->shape()));
    const std::int64_t M = a->dim(0), K = a->dim(1), K2 = b->dim(0), N = b->dim(1);
    if (K != K2)
        throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(a->shape()) + " vs " +
                                    shape_str(b->shape()));
    std::vector<T> v(static_cast<std::size_t>(M * N), T(0));
    {
        const T* pa = a->data.data();
        const T* pb = b->data.data();
        T* pc = v.data();
        for (std::int64_t i = 0; i < M; ++i) {
            for (std::int64_t k = 0; k < K; ++k) {
                const T av = pa[i * K + k];
                const T* brow = pb + k * N;
                T* crow = pc + i * N;
                for (std::int64_t j = 0; j < N; ++j) crow[j] += av * brow[j];
            }
        }
    }
    auto out = detail::op_output<T>(tape, {M, N}, std::move(v), {a, b});
    if (out->requires_grad) {
        tape.record({a, b}, out, [a, b, out, M, K, N] {
            const T* pg = out->grad.data();
            if (a->requires_grad) {  // dA = dC * B^T
                a->ensure_grad();
                const T* pb = b->data.data();
                for (std::int64_t i = 0; i < M; ++i) {
                    for (std::int64_t k = 0; k < K; ++k) {
                        T s = 0;
                        const T* grow = pg + i * N;
                        const T* brow = pb + k * N;
                        for (std::int64_t j = 0; j < N; ++j) s += grow[j] * brow[j];
                        a->grad[static_cast<std::size_t>(i * K + k)] += s;
                    }
                }
            }
            if (b->requires_grad) {  // dB = A^T * dC
                b->ensure_grad();
                const T* pa = a->data.data();
                for (std::int64_t k = 0; k < K; ++k) {
                    T* brow = b->grad.data() + k * N;
                    for (std::int64_t i = 0; i < M; ++i) {
                        const T av = pa[i * K + k];
                        const T* grow = pg + i * N;
                        for (std::int64_t j = 0; j < N; ++j) brow[j] += av * grow[j];
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> transpose2d(Tape<T>& tape, const TensorPtr<T>& a) {
    if (a->rank() != 2) throw std::invalid_argument("transpose2d: expects rank-2 tensor, got " + shape_str(a->shape()));
    const std::int64_t M = a->dim(0), N = a->dim(1);
    std::vector<T> v(a->data.size());
    for (std::int64_t i = 0; i < M; ++i)
        for (std::int64_t j = 0; j < N; ++j) v[static_cast<std::size_t>(j * M + i)] = a->data[static_cast<std::size_t>(i * N + j)];
    auto out = detail::op_output<T>(tape, {N, M}, std::move(v), {a});
    if (out->requires_grad) {
        tape.record({a}, out, [a, out, M, N] {
            a->ensure_grad();
            for (std::int64_t i = 0; i < M; ++i)
                for (std::int64_t j = 0; j < N; ++j)
                    a->grad[static_cast<std::size_t>(i * N + j)] += out->grad[static_cast<std::size_t>(j * M + i)];
        });
    }
    return out;
}

/// x: [N,K] plus bias b: [K], broadcast over the leading axis.
template <typename T>
TensorPtr<T> bias_add(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& b) {
    if (x->rank() != 2 || b->rank() != 1 || x->dim(1) != b->dim(0))
        throw std::invalid_argument("bias_add: expects [N,K] + [K], got " + shape_str(x->shape()) + " and " +
                                    shape_str(b->shape()));
    const std::int64_t N = x->dim(0), K = x->dim(1);
    std::vector<T> v(x->data.size());
    for (std::int64_t i = 0; i < N; ++i)
        for (std::int64_t j = 0; j < K; ++j)
            v[static_cast<std::size_t>(i * K + j)] = x->data[static_cast<std::size_t>(i * K + j)] + b->data[static_cast<std::size_t>(j)];
    auto out = detail::op_output<T>(tape, x->shape(), std::move(v), {x, b});
    if (out->requires_grad) {
        tape.record({x, b}, out, [x, b, out, N, K] {
            if (x->requires_grad) detail::accumulate(*x, out->grad.data());
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::int64_t j = 0; j < K; ++j) {
                    T s = 0;
                    for (std::int64_t i = 0; i < N; ++i) s += out->grad[static_cast<std::size_t>(i * K + j)];
                    b->grad[static_cast<std::size_t>(j)] += s;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

/// Softmax over the last axis, max-subtraction stabilized.
template <typename T>
TensorPtr<T> softmax_lastdim(Tape<T>& tape, const TensorPtr<T>& a) {
    if (a->rank() < 1) throw std::invalid_argument("softmax: needs rank >= 1");
    const std::int64_t D = a->dim(a->rank() - 1);
    const std::int64_t rows = a->size() / D;
    std::vector<T> v(a->data.size());
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = a->data.data() + r * D;
        T* yr = v.data() + r * D;
        T m = xr[0];
        for (std::int64_t j = 1; j < D; ++j) m = std::max(m, xr[j]);
        T denom = 0;
        for (std::int64_t j = 0; j < D; ++j) {
            yr[j] = std::exp(xr[j] - m);
            denom += yr[j];
        }
        for (std::int64_t j = 0; j < D; ++j) yr[j] /= denom;
    }
    auto out = detail::op_output<T>(tape, a->shape(), std::move(v), {a});
    if (out->requires_grad) {
        tape.record({a}, out, [a, out, rows, D] {
            a->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* p = out->data.data() + r * D;
                const T* g = out->grad.data() + r * D;
                T dot = 0;
                for (std::int64_t j = 0; j < D; ++j) dot += g[j] * p[j];
                T* ga = a->grad.data() + r * D;
                for (std::int64_t j = 0; j < D; ++j) ga[j] += p[j] * (g[j] - dot);
            }
        });
    }
    return out;
}

/// Row-wise softmax over [L,L] scores restricted to active key columns.
/// Inactive columns get probability exactly 0. Each row must see >= 1 active
/// column; callers guarantee this by construction.
template <typename T>
TensorPtr<T> masked_softmax_rows(Tape<T>& tape, const TensorPtr<T>& scores, const std::vector<std::uint8_t>& active) {
    if (scores->rank() != 2) throw std::invalid_argument("masked_softmax_rows: expects rank-2 scores");
    const std::int64_t L = scores->dim(0), C = scores->dim(1);
    if (static_cast<std::int64_t>(active.size()) != C)
        throw std::invalid_argument("masked_softmax_rows: mask length mismatch");
    std::int64_t n_active = 0;
    for (auto a : active) n_active += a ? 1 : 0;
    if (n_active == 0) throw std::invalid_argument("masked_softmax_rows: no active columns");
    std::vector<T> v(scores->data.size(), T(0));
    for (std::int64_t r = 0; r < L; ++r) {
        const T* xr = scores->data.data() + r * C;
        T* yr = v.data() + r * C;
        T m = -std::numeric_limits<T>::infinity();
        for (std::int64_t j = 0; j < C; ++j)
            if (active[static_cast<std::size_t>(j)]) m = std::max(m, xr[j]);
        T denom = 0;
        for (std::int64_t j = 0; j < C; ++j) {
            if (active[static_cast<std::size_t>(j)]) {
                yr[j] = std::exp(xr[j] - m);
                denom += yr[j];
            }
        }
        for (std::int64_t j = 0; j < C; ++j)
            if (active[static_cast<std::size_t>(j)]) yr[j] /= denom;
    }
    auto out = detail::op_output<T>(tape, scores->shape(), std::move(v), {scores});
    if (out->requires_grad) {
        auto mask = active;  // copy; caller's buffer may not outlive the tape
        tape.record({scores}, out, [scores, out, L, C, mask = std::move(mask)] {
            scores->ensure_grad();
            for (std::int64_t r = 0; r < L; ++r) {
                const T* p = out->data.data() + r * C;
                const T* g = out->grad.data() + r * C;
                T dot = 0;
                for (std::int64_t j = 0; j < C; ++j)
                    if (mask[static_cast<std::size_t>(j)]) dot += g[j] * p[j];
                T* gs = scores->grad.data() + r * C;
                for (std::int64_t j = 0; j < C; ++j)
                    if (mask[static_cast<std::size_t>(j)]) gs[j] += p[j] * (g[j] - dot);
            }
        });
    }
    return out;
}

/// Mean over active rows of x [L,C] -> [C].
template <typename T>
TensorPtr<T> masked_mean_rows(Tape<T>& tape, const TensorPtr<T>& x, const std::vector<std::uint8_t>& active) {
    if (x->rank() != 2) throw std::invalid_argument("masked_mean_rows: expects rank-2 input");
    const std::int64_t L = x->dim(0), C = x->dim(1);
    if (static_cast<std::int64_t>(active.size()) != L)
        throw std::invalid_argument("masked_mean_rows: mask length mismatch");
    std::int64_t k = 0;
    for (auto a : active) k += a ? 1 : 0;
    if (k == 0) throw std::invalid_argument("masked_mean_rows: no active rows");
    std::vector<T> v(static_cast<std::size_t>(C), T(0));
    for (std::int64_t r = 0; r < L; ++r) {
        if (!active[static_cast<std::size_t>(r)]) continue;
        const T* xr = x->data.data() + r * C;
        for (std::int64_t j = 0; j < C; ++j) v[static_cast<std::size_t>(j)] += xr[j];
    }
    const T inv = T(1) / static_cast<T>(k);
    for (auto& y : v) y *= inv;
    auto out = detail::op_output<T>(tape, {C}, std::move(v), {x});
    if (out->requires_grad) {
        auto mask = active;
        tape.record({x}, out, [x, out, L, C, inv, mask = std::move(mask)] {
            x->ensure_grad();
            for (std::int64_t r = 0; r < L; ++r) {
                if (!mask[static_cast<std::size_t>(r)]) continue;
                T* gx = x->grad.data() + r * C;
                for (std::int64_t j = 0; j < C; ++j) gx[j] += inv * out->grad[static_cast<std::size_t>(j)];
            }
        });
    }
    return out;
}

/// Stacks n rank-1 tensors of length C into [n,C].
template <typename T>
TensorPtr<T> concat_rows(Tape<T>& tape, const std::vector<TensorPtr<T>>& rows) {
    if (rows.empty()) throw std::invalid_argument("concat_rows: no rows");
    const std::int64_t C = rows[0]->size();
    const std::int64_t N = static_cast<std::int64_t>(rows.size());
    std::vector<T> v(static_cast<std::size_t>(N * C));
    bool rg = false;
    for (std::int64_t i = 0; i < N; ++i) {
        if (rows[static_cast<std::size_t>(i)]->size() != C)
            throw std::invalid_argument("concat_rows: inconsistent row sizes");
        std::copy(rows[static_cast<std::size_t>(i)]->data.begin(), rows[static_cast<std::size_t>(i)]->data.end(),
                  v.begin() + i * C);
        rg = rg || rows[static_cast<std::size_t>(i)]->requires_grad;
    }
    auto out = make_tensor<T>({N, C}, std::move(v), tape.recording() && rg);
    if (out->requires_grad) {
        auto inputs = rows;
        tape.record(inputs, out, [inputs, out, C] {
            for (std::size_t i = 0; i < inputs.size(); ++i) {
                if (!inputs[i]->requires_grad) continue;
                inputs[i]->ensure_grad();
                const T* g = out->grad.data() + static_cast<std::int64_t>(i) * C;
                for (std::int64_t j = 0; j < C; ++j) inputs[i]->grad[static_cast<std::size_t>(j)] += g[j];
            }
        });
    }
    return out;
}

/// Gathers rows of table [V,D] by id -> [L,D]. Backward scatter-adds.
template <typename T>
TensorPtr<T> embedding_gather(Tape<T>& tape, const TensorPtr<T>& table, const std::vector<int>& ids) {
    if (table->rank() != 2) throw std::invalid_argument("embedding_gather: table must be rank-2");
    const std::int64_t V = table->dim(0), D = table->dim(1);
    const std::int64_t L = static_cast<std::int64_t>(ids.size());
    if (L == 0) throw std::invalid_argument("embedding_gather: empty id list");
    std::vector<T> v(static_cast<std::size_t>(L * D));
    for (std::int64_t l = 0; l < L; ++l) {
        const int id = ids[static_cast<std::size_t>(l)];
        if (id < 0 || id >= V)
            throw std::invalid_argument("embedding_gather: id " + std::to_string(id) + " out of vocabulary (V=" +
                                        std::to_string(V) + ")");
        std::copy(table->data.begin() + id * D, table->data.begin() + (id + 1) * D, v.begin() + l * D);
    }
    auto out = detail::op_output<T>(tape, {L, D}, std::move(v), {table});
    if (out->requires_grad) {
        auto ids_copy = ids;
        tape.record({table}, out, [table, out, D, L, ids_copy = std::move(ids_copy)] {
            table->ensure_grad();
            for (std::int64_t l = 0; l < L; ++l) {
                const int id = ids_copy[static_cast<std::size_t>(l)];
                T* gt = table->grad.data() + static_cast<std::int64_t>(id) * D;
                const T* g = out->grad.data() + l * D;
                for (std::int64_t j = 0; j < D; ++j) gt[j] += g[j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Layer / batch normalization
// ---------------------------------------------------------------------------

/// Layer normalization over the last axis with per-feature gamma/beta.
template <typename T>
TensorPtr<T> layer_norm(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& gamma, const TensorPtr<T>& beta,
                        T eps = T(1e-5)) {
    const std::int64_t D = x->dim(x->rank() - 1);
    if (gamma->size() != D || beta->size() != D)
        throw std::invalid_argument("layer_norm: gamma/beta must have length " + std::to_string(D));
    const std::int64_t rows = x->size() / D;
    std::vector<T> v(x->data.size());
    std::vector<T> xhat(x->data.size());
    std::vector<T> inv_std(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = x->data.data() + r * D;
        T mu = 0;
        for (std::int64_t j = 0; j < D; ++j) mu += xr[j];
        mu /= static_cast<T>(D);
        T var = 0;
        for (std::int64_t j = 0; j < D; ++j) {
            const T d = xr[j] - mu;
            var += d * d;
        }
        var /= static_cast<T>(D);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = is;
        for (std::int64_t j = 0; j < D; ++j) {
            const T h = (xr[j] - mu) * is;
            xhat[static_cast<std::size_t>(r * D + j)] = h;
            v[static_cast<std::size_t>(r * D + j)] = h * gamma->data[static_cast<std::size_t>(j)] + beta->data[static_cast<std::size_t>(j)];
        }
    }
    auto out = detail::op_output<T>(tape, x->shape(), std::move(v), {x, gamma, beta});
    if (out->requires_grad) {
        tape.record({x, gamma, beta}, out,
                    [x, gamma, beta, out, rows, D, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
            if (beta->requires_grad) {
                beta->ensure_grad();
                for (std::int64_t j = 0; j < D; ++j) {
                    T s = 0;
                    for (std::int64_t r = 0; r < rows; ++r) s += out->grad[static_cast<std::size_t>(r * D + j)];
                    beta->grad[static_cast<std::size_t>(j)] += s;
                }
            }
            if (gamma->requires_grad) {
                gamma->ensure_grad();
                for (std::int64_t j = 0; j < D; ++j) {
                    T s = 0;
                    for (std::int64_t r = 0; r < rows; ++r)
                        s += out->grad[static_cast<std::size_t>(r * D + j)] * xhat[static_cast<std::size_t>(r * D + j)];
                    gamma->grad[static_cast<std::size_t>(j)] += s;
                }
            }
            if (x->requires_grad) {
                x->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r) {
                    const T* g = out->grad.data() + r * D;
                    const T* h = xhat.data() + r * D;
                    T sum_dh = 0, sum_dh_h = 0;
                    for (std::int64_t j = 0; j < D; ++j) {
                        const T dh = g[j] * gamma->data[static_cast<std::size_t>(j)];
                        sum_dh += dh;
                        sum_dh_h += dh * h[j];
                    }
                    const T is = inv_std[static_cast<std::size_t>(r)];
                    T* gx = x->grad.data() + r * D;
                    for (std::int64_t j = 0; j < D; ++j) {
                        const T dh = g[j] * gamma->data[static_cast<std::size_t>(j)];
                        gx[j] += is * (dh - (sum_dh + h[j] * sum_dh_h) / static_cast<T>(D));
                    }
                }
            }
        });
    }
    return out;
}

/// Running statistics owned by a BatchNorm layer; plain buffers, no grad.
template <typename T>
struct BnStats {
    TensorPtr<T> running_mean;  // [C], init 0
    TensorPtr<T> running_var;   // [C], init 1
};

/// Batch normalization over [N,C,...] per channel. Train mode normalizes by
/// batch statistics (biased variance) and updates running stats as
/// running = (1-momentum)*running + momentum*batch, with the unbiased
/// variance going into running_var. Eval mode normalizes by running stats
/// and is differentiable (needed for CAM).
template <typename T>
TensorPtr<T> batch_norm(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& gamma, const TensorPtr<T>& beta,
                        BnStats<T>* stats, bool training, T momentum = T(0.1), T eps = T(1e-5)) {
    if (x->rank() < 2)
        throw std::invalid_argument("batch_norm: expects rank >= 2 input, got " + shape_str(x->shape()));
    const std::int64_t N = x->dim(0);
    const std::int64_t C = x->dim(1);
    std::int64_t S = 1;
    for (std::size_t i = 2; i < x->rank(); ++i) S *= x->dim(i);
    if (gamma->size() != C || beta->size() != C)
        throw std::invalid_argument("batch_norm: gamma/beta must have length " + std::to_string(C));
    const std::int64_t m = N * S;
    if (training && m < 2)
        throw std::invalid_argument("batch_norm: degenerate variance: train mode needs >= 2 elements per channel, got " +
                                    std::to_string(m));

    std::vector<T> mean(static_cast<std::size_t>(C), T(0));
    std::vector<T> var(static_cast<std::size_t>(C), T(0));
    if (training || stats == nullptr) {
        for (std::int64_t c = 0; c < C; ++c) {
            T acc = 0;
            for (std::int64_t n = 0; n < N; ++n) {
                const T* p = x->data.data() + (n * C + c) * S;
                for (std::int64_t s = 0; s < S; ++s) acc += p[s];
            }
            mean[static_cast<std::size_t>(c)] = acc / static_cast<T>(m);
        }
        for (std::int64_t c = 0; c < C; ++c) {
            T acc = 0;
            const T mu = mean[static_cast<std::size_t>(c)];
            for (std::int64_t n = 0; n < N; ++n) {
                const T* p = x->data.data() + (n * C + c) * S;
                for (std::int64_t s = 0; s < S; ++s) {
                    const T d = p[s] - mu;
                    acc += d * d;
                }
            }
            var[static_cast<std::size_t>(c)] = acc / static_cast<T>(m);
        }
        if (training && stats != nullptr) {
            const T unbias = static_cast<T>(m) / static_cast<T>(m - 1);
            for (std::int64_t c = 0; c < C; ++c) {
                auto& rm = stats->running_mean->data[static_cast<std::size_t>(c)];
                auto& rv = stats->running_var->data[static_cast<std::size_t>(c)];
                rm = (T(1) - momentum) * rm + momentum * mean[static_cast<std::size_t>(c)];
                rv = (T(1) - momentum) * rv + momentum * var[static_cast<std::size_t>(c)] * unbias;
            }
        }
    } else {
        mean = stats->running_mean->data;
        var = stats->running_var->data;
    }

    std::vector<T> inv_std(static_cast<std::size_t>(C));
    for (std::int64_t c = 0; c < C; ++c)
        inv_std[static_cast<std::size_t>(c)] = T(1) / std::sqrt(var[static_cast<std::size_t>(c)] + eps);

    std::vector<T> v(x->data.size());
    std::vector<T> xhat(x->data.size());
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t c = 0; c < C; ++c) {
            const T mu = mean[static_cast<std::size_t>(c)];
            const T is = inv_std[static_cast<std::size_t>(c)];
            const T g = gamma->data[static_cast<std::size_t>(c)];
            const T b = beta->data[static_cast<std::size_t>(c)];
            const T* p = x->data.data() + (n * C + c) * S;
            T* ph = xhat.data() + (n * C + c) * S;
            T* py = v.data() + (n * C + c) * S;
            for (std::int64_t s = 0; s < S; ++s) {
                const T h = (p[s] - mu) * is;
                ph[s] = h;
                py[s] = h * g + b;
            }
        }
    }

    auto out = detail::op_output<T>(tape, x->shape(), std::move(v), {x, gamma, beta});
    if (out->requires_grad) {
        tape.record({x, gamma, beta}, out,
                    [x, gamma, beta, out, N, C, S, training, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
            const std::int64_t m = N * S;
            std::vector<T> sum_dy(static_cast<std::size_t>(C), T(0));
            std::vector<T> sum_dy_h(static_cast<std::size_t>(C), T(0));
            for (std::int64_t c = 0; c < C; ++c) {
                T s1 = 0, s2 = 0;
                for (std::int64_t n = 0; n < N; ++n) {
                    const T* g = out->grad.data() + (n * C + c) * S;
                    const T* h = xhat.data() + (n * C + c) * S;
                    for (std::int64_t s = 0; s < S; ++s) {
                        s1 += g[s];
                        s2 += g[s] * h[s];
                    }
                }
                sum_dy[static_cast<std::size_t>(c)] = s1;
                sum_dy_h[static_cast<std::size_t>(c)] = s2;
            }
            if (beta->requires_grad) detail::accumulate(*beta, sum_dy.data());
            if (gamma->requires_grad) detail::accumulate(*gamma, sum_dy_h.data());
            if (x->requires_grad) {
                x->ensure_grad();
                for (std::int64_t n = 0; n < N; ++n) {
                    for (std::int64_t c = 0; c < C; ++c) {
                        const T g = gamma->data[static_cast<std::size_t>(c)];
                        const T is = inv_std[static_cast<std::size_t>(c)];
                        const T* dy = out->grad.data() + (n * C + c) * S;
                        const T* h = xhat.data() + (n * C + c) * S;
                        T* gx = x->grad.data() + (n * C + c) * S;
                        if (training) {
                            const T sdy = sum_dy[static_cast<std::size_t>(c)];
                            const T sdyh = sum_dy_h[static_cast<std::size_t>(c)];
                            const T invm = T(1) / static_cast<T>(m);
                            for (std::int64_t s = 0; s < S; ++s)
                                gx[s] += g * is * (dy[s] - invm * (sdy + h[s] * sdyh));
                        } else {
                            for (std::int64_t s = 0; s < S; ++s) gx[s] += g * is * dy[s];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

/// 2D cross-correlation with zero padding, no bias. Input [N,C,H,W] or
/// [C,H,W]; kernels [O,C,kh,kw].
///
/// Three code paths, all reducing each output element in the same canonical
/// (c, kh, kw) / (n, ho, wo) order so results are bit-identical across paths
/// within a shape class and across thread counts:
///   - 1x1 stride-1: plane-wide axpy loops.
///   - 3x3 stride-1 on wide planes: fused 9-tap row kernels.
///   - everything else: per-image im2col + streaming GEMM loops.
template <typename T>
TensorPtr<T> conv2d(Tape<T>& tape, const TensorPtr<T>& x_in, const TensorPtr<T>& w, std::int64_t stride = 1,
                    std::int64_t padding = 0) {
    if (w->rank() != 4)
        throw std::invalid_argument("conv2d: kernels must be rank-4 [O,C,kh,kw], got " + shape_str(w->shape()));
    if (x_in->rank() != 3 && x_in->rank() != 4)
        throw std::invalid_argument("conv2d: input must be rank-3 or rank-4, got " + shape_str(x_in->shape()));
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be positive");
    if (padding < 0) throw std::invalid_argument("conv2d: padding must be non-negative");

    const bool batched = x_in->rank() == 4;
    const std::int64_t N = batched ? x_in->dim(0) : 1;
    const std::int64_t C = batched ? x_in->dim(1) : x_in->dim(0);
    const std::int64_t H = batched ? x_in->dim(2) : x_in->dim(1);
    const std::int64_t W = batched ? x_in->dim(3) : x_in->dim(2);
    const std::int64_t O = w->dim(0), KC = w->dim(1), KH = w->dim(2), KW = w->dim(3);
    if (C != KC)
        throw std::invalid_argument("conv2d: input channels disagree with kernels: input " + shape_str(x_in->shape()) +
                                    " vs kernels " + shape_str(w->shape()));
    const std::int64_t HO = detail::conv_out_dim(H, KH, stride, padding, "height");
    const std::int64_t WO = detail::conv_out_dim(W, KW, stride, padding, "width");

    const std::int64_t HP = H + 2 * padding, WP = W + 2 * padding;
    const std::int64_t S = HO * WO;
    const std::int64_t K2 = KH * KW;
    const bool fast1 = (KH == 1 && KW == 1 && stride == 1 && padding == 0);
    const bool fast3 = (KH == 3 && KW == 3 && stride == 1 && WO >= 16);

    // Zero-padded copy of the input (shared by forward and backward).
    std::vector<T> xpad;
    const T* xsrc;
    if (padding == 0) {
        xsrc = x_in->data.data();
    } else {
        xpad.assign(static_cast<std::size_t>(N * C * HP * WP), T(0));
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t c = 0; c < C; ++c)
                for (std::int64_t h = 0; h < H; ++h)
                    std::copy(x_in->data.begin() + ((n * C + c) * H + h) * W,
                              x_in->data.begin() + ((n * C + c) * H + h) * W + W,
                              xpad.begin() + ((n * C + c) * HP + h + padding) * WP + padding);
        xsrc = xpad.data();
    }

    // im2col for one image: col[k][s] with k = (c, kh, kw), s = (ho, wo).
    auto build_col = [=](const T* xplane_base, std::vector<T>& col) {
        col.resize(static_cast<std::size_t>(C * K2 * S));
        T* dst = col.data();
        for (std::int64_t c = 0; c < C; ++c) {
            const T* xplane = xplane_base + c * HP * WP;
            for (std::int64_t kh = 0; kh < KH; ++kh) {
                for (std::int64_t kw = 0; kw < KW; ++kw) {
                    for (std::int64_t ho = 0; ho < HO; ++ho) {
                        const T* xrow = xplane + (ho * stride + kh) * WP + kw;
                        if (stride == 1) {
                            std::copy(xrow, xrow + WO, dst);
                            dst += WO;
                        } else {
                            for (std::int64_t wo = 0; wo < WO; ++wo) *dst++ = xrow[wo * stride];
                        }
                    }
                }
            }
        }
    };

    std::vector<T> v(static_cast<std::size_t>(N * O * S), T(0));
    {
        const T* pw = w->data.data();
        T* pv = v.data();
        const std::int64_t work = N * O * S * C * K2;
        auto task = [&](std::int64_t no) {
            const std::int64_t n = no / O;
            const std::int64_t o = no % O;
            T* outp = pv + (n * O + o) * S;
            if (fast3) {
                for (std::int64_t c = 0; c < C; ++c) {
                    const T* xplane = xsrc + (n * C + c) * HP * WP;
                    const T* wb = pw + (o * C + c) * 9;
                    const T w0 = wb[0], w1 = wb[1], w2 = wb[2], w3 = wb[3], w4 = wb[4], w5 = wb[5], w6 = wb[6],
                            w7 = wb[7], w8 = wb[8];
                    for (std::int64_t ho = 0; ho < HO; ++ho) {
                        const T* r0 = xplane + ho * WP;
                        const T* r1 = r0 + WP;
                        const T* r2 = r1 + WP;
                        T* orow = outp + ho * WO;
                        for (std::int64_t wo = 0; wo < WO; ++wo) {
                            orow[wo] += w0 * r0[wo] + w1 * r0[wo + 1] + w2 * r0[wo + 2] + w3 * r1[wo] +
                                        w4 * r1[wo + 1] + w5 * r1[wo + 2] + w6 * r2[wo] + w7 * r2[wo + 1] +
                                        w8 * r2[wo + 2];
                        }
                    }
                }
            } else if (fast1) {
                for (std::int64_t c = 0; c < C; ++c) {
                    const T wv = pw[o * C + c];
                    const T* xplane = xsrc + (n * C + c) * S;
                    for (std::int64_t s = 0; s < S; ++s) outp[s] += wv * xplane[s];
                }
            }
        };
        // im2col path: one task per image, col built once.
        auto task_im2col = [&](std::int64_t n) {
            thread_local std::vector<T> col;
            build_col(xsrc + n * C * HP * WP, col);
            for (std::int64_t o = 0; o < O; ++o) {
                T* outp = pv + (n * O + o) * S;
                const T* wrow = pw + o * C * K2;
                for (std::int64_t k = 0; k < C * K2; ++k) {
                    const T wv = wrow[k];
                    const T* crow = col.data() + k * S;
                    for (std::int64_t s = 0; s < S; ++s) outp[s] += wv * crow[s];
                }
            }
        };
        const bool threaded = work >= (1 << 16);
        if (fast3 || fast1) {
            if (threaded && N * O > 1) {
                parallel_for(N * O, task);
            } else {
                for (std::int64_t no = 0; no < N * O; ++no) task(no);
            }
        } else {
            if (threaded && N > 1) {
                parallel_for(N, task_im2col);
            } else {
                for (std::int64_t n = 0; n < N; ++n) task_im2col(n);
            }
        }
    }

    std::vector<std::int64_t> out_shape = batched ? std::vector<std::int64_t>{N, O, HO, WO}
                                                  : std::vector<std::int64_t>{O, HO, WO};
    auto out = detail::op_output<T>(tape, std::move(out_shape), std::move(v), {x_in, w});
    if (out->requires_grad) {
        tape.record({x_in, w}, out,
                    [x_in, w, out, N, C, H, W, O, KH, KW, HO, WO, HP, WP, S, K2, stride, padding, fast3, fast1,
                     build_col, xpad = std::move(xpad)] {
            const T* dy = out->grad.data();
            const std::int64_t work = N * O * S * C * K2;
            const bool threaded = work >= (1 << 16);
            if (x_in->requires_grad) {
                x_in->ensure_grad();
                // Per-image tasks; each dx element is reduced in a canonical
                // order independent of the thread count.
                std::vector<T> dxpad(static_cast<std::size_t>(N * C * HP * WP), T(0));
                auto task = [&](std::int64_t n) {
                    if (fast3) {
                        // Gather form: full correlation of dy (zero-padded by
                        // 2) with the flipped kernel.
                        const std::int64_t HD = HO + 4, WD = WO + 4;
                        std::vector<T> dyp(static_cast<std::size_t>(O * HD * WD), T(0));
                        for (std::int64_t o = 0; o < O; ++o)
                            for (std::int64_t ho = 0; ho < HO; ++ho)
                                std::copy(dy + ((n * O + o) * HO + ho) * WO, dy + ((n * O + o) * HO + ho) * WO + WO,
                                          dyp.begin() + (o * HD + ho + 2) * WD + 2);
                        for (std::int64_t c = 0; c < C; ++c) {
                            T* dxplane = dxpad.data() + (n * C + c) * HP * WP;
                            for (std::int64_t o = 0; o < O; ++o) {
                                const T* wb = w->data.data() + (o * C + c) * 9;
                                // Flipped taps.
                                const T w0 = wb[8], w1 = wb[7], w2 = wb[6], w3 = wb[5], w4 = wb[4], w5 = wb[3],
                                        w6 = wb[2], w7 = wb[1], w8 = wb[0];
                                for (std::int64_t hi = 0; hi < HP; ++hi) {
                                    const T* r0 = dyp.data() + (o * HD + hi) * WD;
                                    const T* r1 = r0 + WD;
                                    const T* r2 = r1 + WD;
                                    T* xrow = dxplane + hi * WP;
                                    for (std::int64_t wi = 0; wi < WP; ++wi) {
                                        xrow[wi] += w0 * r0[wi] + w1 * r0[wi + 1] + w2 * r0[wi + 2] + w3 * r1[wi] +
                                                    w4 * r1[wi + 1] + w5 * r1[wi + 2] + w6 * r2[wi] +
                                                    w7 * r2[wi + 1] + w8 * r2[wi + 2];
                                    }
                                }
                            }
                        }
                    } else if (fast1) {
                        for (std::int64_t c = 0; c < C; ++c) {
                            T* dxplane = dxpad.data() + (n * C + c) * S;
                            for (std::int64_t o = 0; o < O; ++o) {
                                const T wv = w->data[static_cast<std::size_t>(o * C + c)];
                                const T* dyo = dy + (n * O + o) * S;
                                for (std::int64_t s = 0; s < S; ++s) dxplane[s] += wv * dyo[s];
                            }
                        }
                    } else {
                        // colgrad[k][:] = sum_o w[o][k] * dy[o][:], then
                        // col2im scatter in fixed (k, ho, wo) order.
                        thread_local std::vector<T> colgrad;
                        colgrad.assign(static_cast<std::size_t>(C * K2 * S), T(0));
                        for (std::int64_t k = 0; k < C * K2; ++k) {
                            T* crow = colgrad.data() + k * S;
                            for (std::int64_t o = 0; o < O; ++o) {
                                const T wv = w->data[static_cast<std::size_t>(o * C * K2 + k)];
                                const T* dyo = dy + (n * O + o) * S;
                                for (std::int64_t s = 0; s < S; ++s) crow[s] += wv * dyo[s];
                            }
                        }
                        const T* src = colgrad.data();
                        for (std::int64_t c = 0; c < C; ++c) {
                            T* dxplane = dxpad.data() + (n * C + c) * HP * WP;
                            for (std::int64_t kh = 0; kh < KH; ++kh) {
                                for (std::int64_t kw = 0; kw < KW; ++kw) {
                                    for (std::int64_t ho = 0; ho < HO; ++ho) {
                                        T* xrow = dxplane + (ho * stride + kh) * WP + kw;
                                        if (stride == 1) {
                                            for (std::int64_t wo = 0; wo < WO; ++wo) xrow[wo] += *src++;
                                        } else {
                                            for (std::int64_t wo = 0; wo < WO; ++wo) xrow[wo * stride] += *src++;
                                        }
                                    }
                                }
                            }
                        }
                    }
                };
                if (N > 1 && threaded) {
                    parallel_for(N, task);
                } else {
                    for (std::int64_t n = 0; n < N; ++n) task(n);
                }
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t c = 0; c < C; ++c)
                        for (std::int64_t h = 0; h < H; ++h) {
                            const T* src = dxpad.data() + ((n * C + c) * HP + h + padding) * WP + padding;
                            T* dst = x_in->grad.data() + ((n * C + c) * H + h) * W;
                            for (std::int64_t ww = 0; ww < W; ++ww) dst[ww] += src[ww];
                        }
            }
            if (w->requires_grad) {
                w->ensure_grad();
                const T* xsrc2 = (padding == 0) ? x_in->data.data() : xpad.data();
                if (fast3) {
                    // Per-tap row accumulators; fold once per (o, c) at the
                    // end in fixed order.
                    auto task = [&](std::int64_t o) {
                        T* dwp = w->grad.data() + o * C * 9;
                        std::vector<T> acc(static_cast<std::size_t>(9 * WO));
                        for (std::int64_t c = 0; c < C; ++c) {
                            std::fill(acc.begin(), acc.end(), T(0));
                            for (std::int64_t n = 0; n < N; ++n) {
                                const T* dyp = dy + (n * O + o) * S;
                                const T* xplane = xsrc2 + (n * C + c) * HP * WP;
                                for (std::int64_t ho = 0; ho < HO; ++ho) {
                                    const T* grow = dyp + ho * WO;
                                    const T* r0 = xplane + ho * WP;
                                    const T* r1 = r0 + WP;
                                    const T* r2 = r1 + WP;
                                    T* a = acc.data();
                                    for (std::int64_t wo = 0; wo < WO; ++wo) a[wo] += grow[wo] * r0[wo];
                                    a += WO;
                                    for (std::int64_t wo = 0; wo < WO; ++wo) a[wo] += grow[wo] * r0[wo + 1];
                                    a += WO;
                                    for (std::int64_t wo = 0; wo < WO; ++wo) a[wo] += grow[wo] * r0[wo + 2];
                                    a += WO;
                                    for (std::int64_t wo = 0; wo < WO; ++wo) a[wo] += grow[wo] * r1[wo];
                                    a += WO;
                                    for (std::int64_t wo = 0; wo < WO; ++wo) a[wo] += grow[wo] * r1[wo + 1];
                                    a += WO;
                                    for (std::int64_t wo = 0; wo < WO; ++wo) a[wo] += grow[wo] * r1[wo + 2];
                                    a += WO;
                                    for (std::int64_t wo = 0; wo < WO; ++wo) a[wo] += grow[wo] * r2[wo];
                                    a += WO;
                                    for (std::int64_t wo = 0; wo < WO; ++wo) a[wo] += grow[wo] * r2[wo + 1];
                                    a += WO;
                                    for (std::int64_t wo = 0; wo < WO; ++wo) a[wo] += grow[wo] * r2[wo + 2];
                                }
                            }
                            for (std::int64_t tap = 0; tap < 9; ++tap) {
                                T s = 0;
                                const T* a = acc.data() + tap * WO;
                                for (std::int64_t wo = 0; wo < WO; ++wo) s += a[wo];
                                dwp[c * 9 + tap] += s;
                            }
                        }
                    };
                    if (O > 1 && threaded) {
                        parallel_for(O, task);
                    } else {
                        for (std::int64_t o = 0; o < O; ++o) task(o);
                    }
                } else if (fast1) {
                    auto task = [&](std::int64_t o) {
                        T* dwp = w->grad.data() + o * C;
                        std::vector<T> acc(static_cast<std::size_t>(WO));
                        for (std::int64_t c = 0; c < C; ++c) {
                            std::fill(acc.begin(), acc.end(), T(0));
                            for (std::int64_t n = 0; n < N; ++n) {
                                const T* dyp = dy + (n * O + o) * S;
                                const T* xplane = xsrc2 + (n * C + c) * S;
                                for (std::int64_t ho = 0; ho < HO; ++ho) {
                                    const T* grow = dyp + ho * WO;
                                    const T* xrow = xplane + ho * WO;
                                    for (std::int64_t wo = 0; wo < WO; ++wo)
                                        acc[static_cast<std::size_t>(wo)] += grow[wo] * xrow[wo];
                                }
                            }
                            T s = 0;
                            for (std::int64_t wo = 0; wo < WO; ++wo) s += acc[static_cast<std::size_t>(wo)];
                            dwp[c] += s;
                        }
                    };
                    if (O > 1 && threaded) {
                        parallel_for(O, task);
                    } else {
                        for (std::int64_t o = 0; o < O; ++o) task(o);
                    }
                } else {
                    // dW[o][k] = sum_{n,s} dy[n][o][s] * colT[n][s][k]; the
                    // transposed layout makes the inner axpy contiguous.
                    std::vector<T> colt(static_cast<std::size_t>(N * S * C * K2));
                    parallel_for(N, [&](std::int64_t n) {
                        thread_local std::vector<T> col;
                        build_col(xsrc2 + n * C * HP * WP, col);
                        T* ct = colt.data() + n * S * C * K2;
                        for (std::int64_t k = 0; k < C * K2; ++k)
                            for (std::int64_t s = 0; s < S; ++s) ct[s * C * K2 + k] = col[static_cast<std::size_t>(k * S + s)];
                    });
                    auto task = [&](std::int64_t o) {
                        std::vector<T> acc(static_cast<std::size_t>(C * K2), T(0));
                        for (std::int64_t n = 0; n < N; ++n) {
                            const T* dyp = dy + (n * O + o) * S;
                            const T* ct = colt.data() + n * S * C * K2;
                            for (std::int64_t s = 0; s < S; ++s) {
                                const T g = dyp[s];
                                const T* crow = ct + s * C * K2;
                                for (std::int64_t k = 0; k < C * K2; ++k) acc[static_cast<std::size_t>(k)] += g * crow[k];
                            }
                        }
                        T* dwp = w->grad.data() + o * C * K2;
                        for (std::int64_t k = 0; k < C * K2; ++k) dwp[k] += acc[static_cast<std::size_t>(k)];
                    };
                    if (O > 1 && threaded) {
                        parallel_for(O, task);
                    } else {
                        for (std::int64_t o = 0; o < O; ++o) task(o);
                    }
                }
            }
        });
    }
    return out;
}

/// Global average pooling: [C,H,W] -> [C] or [N,C,H,W] -> [N,C].
template <typename T>
TensorPtr<T> global_avg_pool(Tape<T>& tape, const TensorPtr<T>& x) {
    if (x->rank() < 3)
        throw std::invalid_argument("global_avg_pool: requires rank >= 3 input, got " + shape_str(x->shape()));
    const bool batched = x->rank() == 4;
    const std::int64_t N = batched ? x->dim(0) : 1;
    const std::int64_t C = batched ? x->dim(1) : x->dim(0);
    std::int64_t S = 1;
    for (std::size_t i = batched ? 2 : 1; i < x->rank(); ++i) S *= x->dim(i);
    std::vector<T> v(static_cast<std::size_t>(N * C));
    const T inv = T(1) / static_cast<T>(S);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const T* p = x->data.data() + (n * C + c) * S;
            T acc = 0;
            for (std::int64_t s = 0; s < S; ++s) acc += p[s];
            v[static_cast<std::size_t>(n * C + c)] = acc * inv;
        }
    std::vector<std::int64_t> out_shape = batched ? std::vector<std::int64_t>{N, C} : std::vector<std::int64_t>{C};
    auto out = detail::op_output<T>(tape, std::move(out_shape), std::move(v), {x});
    if (out->requires_grad) {
        tape.record({x}, out, [x, out, N, C, S, inv] {
            x->ensure_grad();
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t c = 0; c < C; ++c) {
                    const T g = out->grad[static_cast<std::size_t>(n * C + c)] * inv;
                    T* p = x->grad.data() + (n * C + c) * S;
                    for (std::int64_t s = 0; s < S; ++s) p[s] += g;
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean over the batch of -log softmax(logits)[target]. Stabilized by max
/// subtraction.
template <typename T>
TensorPtr<T> cross_entropy(Tape<T>& tape, const TensorPtr<T>& logits, const std::vector<int>& targets) {
    if (logits->rank() != 2)
        throw std::invalid_argument("cross_entropy: logits must be [N,K], got " + shape_str(logits->shape()));
    const std::int64_t N = logits->dim(0), K = logits->dim(1);
    if (static_cast<std::int64_t>(targets.size()) != N)
        throw std::invalid_argument("cross_entropy: target count " + std::to_string(targets.size()) +
                                    " does not match batch " + std::to_string(N));
    for (int t : targets)
        if (t < 0 || t >= K)
            throw std::invalid_argument("cross_entropy: target index " + std::to_string(t) + " out of range [0," +
                                        std::to_string(K) + ")");
    std::vector<T> probs(logits->data.size());
    T loss = 0;
    for (std::int64_t i = 0; i < N; ++i) {
        const T* z = logits->data.data() + i * K;
        T* p = probs.data() + i * K;
        T m = z[0];
        for (std::int64_t j = 1; j < K; ++j) m = std::max(m, z[j]);
        T denom = 0;
        for (std::int64_t j = 0; j < K; ++j) {
            p[j] = std::exp(z[j] - m);
            denom += p[j];
        }
        for (std::int64_t j = 0; j < K; ++j) p[j] /= denom;
        loss += (m + std::log(denom)) - z[targets[static_cast<std::size_t>(i)]];
    }
    loss /= static_cast<T>(N);
    auto out = detail::op_output<T>(tape, {1}, {loss}, {logits});
    if (out->requires_grad) {
        auto tcopy = targets;
        tape.record({logits}, out, [logits, out, N, K, probs = std::move(probs), tcopy = std::move(tcopy)] {
            logits->ensure_grad();
            const T g = out->grad[0] / static_cast<T>(N);
            for (std::int64_t i = 0; i < N; ++i) {
                const T* p = probs.data() + i * K;
                T* gz = logits->grad.data() + i * K;
                for (std::int64_t j = 0; j < K; ++j) gz[j] += g * p[j];
                gz[tcopy[static_cast<std::size_t>(i)]] -= g;
            }
        });
    }
    return out;
}

/// Mean over all N*K entries of binary cross-entropy on sigmoid(logit),
/// in the stabilized form max(z,0) - z*y + log(1 + exp(-|z|)).
template <typename T>
TensorPtr<T> bce_multilabel(Tape<T>& tape, const TensorPtr<T>& logits, const std::vector<T>& targets) {
    if (logits->rank() != 2)
        throw std::invalid_argument("bce_multilabel: logits must be [N,K], got " + shape_str(logits->shape()));
    if (targets.size() != logits->data.size())
        throw std::invalid_argument("bce_multilabel: target count mismatch");
    for (T y : targets)
        if (y != T(0) && y != T(1)) throw std::invalid_argument("bce_multilabel: non-binary target");
    const std::int64_t M = logits->size();
    T loss = 0;
    for (std::int64_t i = 0; i < M; ++i) {
        const T z = logits->data[static_cast<std::size_t>(i)];
        const T y = targets[static_cast<std::size_t>(i)];
        loss += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    loss /= static_cast<T>(M);
    auto out = detail::op_output<T>(tape, {1}, {loss}, {logits});
    if (out->requires_grad) {
        auto tcopy = targets;
        tape.record({logits}, out, [logits, out, M, tcopy = std::move(tcopy)] {
            logits->ensure_grad();
            const T g = out->grad[0] / static_cast<T>(M);
            for (std::int64_t i = 0; i < M; ++i) {
                const T z = logits->data[static_cast<std::size_t>(i)];
                T s;
                if (z >= T(0)) {
                    s = T(1) / (T(1) + std::exp(-z));
                } else {
                    const T e = std::exp(z);
                    s = e / (T(1) + e);
                }
                logits->grad[static_cast<std::size_t>(i)] += g * (s - tcopy[static_cast<std::size_t>(i)]);
            }
        });
    }
    return out;
}

}  // namespace timnet
