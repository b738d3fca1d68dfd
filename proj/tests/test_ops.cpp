#include "doctest.h"

#include <cmath>

#include "support.hpp"
#include "timnet/ops.hpp"

using namespace timnet;
using testsupport::grad_check;
using testsupport::rand_tensor;

namespace {

/// Independent six-nested-loop cross-correlation oracle.
std::vector<double> conv2d_oracle(const std::vector<double>& x, std::int64_t C, std::int64_t H, std::int64_t W,
                                  const std::vector<double>& w, std::int64_t O, std::int64_t K, std::int64_t stride,
                                  std::int64_t pad) {
    const std::int64_t HO = (H + 2 * pad - K) / stride + 1;
    const std::int64_t WO = (W + 2 * pad - K) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(O * HO * WO), 0.0);
    for (std::int64_t o = 0; o < O; ++o)
        for (std::int64_t ho = 0; ho < HO; ++ho)
            for (std::int64_t wo = 0; wo < WO; ++wo) {
                double acc = 0.0;
                for (std::int64_t c = 0; c < C; ++c)
                    for (std::int64_t kh = 0; kh < K; ++kh)
                        for (std::int64_t kw = 0; kw < K; ++kw) {
                            const std::int64_t hi = ho * stride + kh - pad;
                            const std::int64_t wi = wo * stride + kw - pad;
                            if (hi < 0 || hi >= H || wi < 0 || wi >= W) continue;
                            acc += x[static_cast<std::size_t>((c * H + hi) * W + wi)] *
                                   w[static_cast<std::size_t>(((o * C + c) * K + kh) * K + kw)];
                        }
                out[static_cast<std::size_t>((o * HO + ho) * WO + wo)] = acc;
            }
    return out;
}

}  // namespace

TEST_CASE("matmul: identity and hand-computed cases") {
    Tape<double> tape;
    auto eye = make_tensor<double>({2, 2}, {1, 0, 0, 1});
    auto b = make_tensor<double>({2, 2}, {3, 4, 5, 6});
    auto c = matmul(tape, eye, b);
    CHECK(c->data == b->data);

    auto a = make_tensor<double>({1, 2}, {1, 2});
    auto v = make_tensor<double>({2, 1}, {3, 4});
    CHECK(matmul(tape, a, v)->item() == 11.0);

    CHECK_THROWS_WITH_AS(matmul(tape, make_tensor<double>({2, 3}, std::vector<double>(6, 0.0)),
                                make_tensor<double>({2, 2}, std::vector<double>(4, 0.0))),
                         doctest::Contains("[2,3]"), std::invalid_argument);
}

TEST_CASE("matmul: gradients vs finite differences") {
    Rng rng(101);
    auto a = rand_tensor<double>({3, 4}, rng);
    auto b = rand_tensor<double>({4, 2}, rng);
    const double err = grad_check<double>(
        [&](Tape<double>& t) { return sum_all(t, mul(t, matmul(t, a, b), matmul(t, a, b))); }, {a, b});
    CHECK(err < 1e-5);
}

TEST_CASE("conv2d: 1x1 identity kernel and scalar scaling") {
    Tape<double> tape;
    auto x = make_tensor<double>({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    auto k1 = make_tensor<double>({1, 1, 1, 1}, {1.0});
    CHECK(conv2d(tape, x, k1, 1, 0)->data == x->data);

    auto ones = full<double>({1, 2, 2}, 1.0);
    auto k2 = make_tensor<double>({1, 1, 1, 1}, {2.0});
    auto y = conv2d(tape, ones, k2, 1, 0);
    for (double v : y->data) CHECK(v == 2.0);
}

TEST_CASE("conv2d: random case matches nested-loop oracle") {
    Rng rng(7);
    const std::int64_t C = 2, H = 5, W = 5, O = 3, K = 3;
    auto x = rand_tensor<double>({C, H, W}, rng, 1.0, false);
    auto w = rand_tensor<double>({O, C, K, K}, rng, 1.0, false);
    Tape<double> tape;
    auto y = conv2d(tape, x, w, 1, 1);
    auto oracle = conv2d_oracle(std::vector<double>(x->data.begin(), x->data.end()), C, H, W,
                                std::vector<double>(w->data.begin(), w->data.end()), O, K, 1, 1);
    REQUIRE(y->data.size() == oracle.size());
    for (std::size_t i = 0; i < oracle.size(); ++i) CHECK(std::abs(y->data[i] - oracle[i]) < 1e-12);
}

TEST_CASE("conv2d: strides and paddings match oracle; batched matches per-image") {
    Rng rng(8);
    for (std::int64_t stride : {1, 2}) {
        for (std::int64_t pad : {0, 1, 2}) {
            const std::int64_t C = 2, O = 2, K = 3;
            const std::int64_t H = 7, W = 7;
            if ((H + 2 * pad - K) % stride != 0) continue;
            auto x = rand_tensor<double>({C, H, W}, rng, 1.0, false);
            auto w = rand_tensor<double>({O, C, K, K}, rng, 1.0, false);
            Tape<double> tape;
            auto y = conv2d(tape, x, w, stride, pad);
            auto oracle = conv2d_oracle(std::vector<double>(x->data.begin(), x->data.end()), C, H, W,
                                        std::vector<double>(w->data.begin(), w->data.end()), O, K, stride, pad);
            REQUIRE(y->data.size() == oracle.size());
            for (std::size_t i = 0; i < oracle.size(); ++i) CHECK(std::abs(y->data[i] - oracle[i]) < 1e-12);
        }
    }
    // Batched call equals stacking single-image calls.
    auto xb = rand_tensor<double>({4, 2, 6, 6}, rng, 1.0, false);
    auto w = rand_tensor<double>({3, 2, 3, 3}, rng, 1.0, false);
    Tape<double> tape;
    auto yb = conv2d(tape, xb, w, 1, 1);
    for (std::int64_t n = 0; n < 4; ++n) {
        std::vector<double> xi(xb->data.begin() + n * 2 * 36, xb->data.begin() + (n + 1) * 2 * 36);
        auto x1 = make_tensor<double>({2, 6, 6}, std::move(xi));
        auto y1 = conv2d(tape, x1, w, 1, 1);
        for (std::size_t i = 0; i < y1->data.size(); ++i)
            CHECK(yb->data[static_cast<std::size_t>(n) * y1->data.size() + i] == y1->data[i]);
    }
}

TEST_CASE("conv2d: non-integral output size raises a shape error") {
    Tape<double> tape;
    auto x = full<double>({1, 6, 6}, 1.0);
    auto w = full<double>({1, 1, 3, 3}, 1.0);
    CHECK_THROWS_AS(conv2d(tape, x, w, 2, 0), std::invalid_argument);  // (6-3)/2 not integral
    CHECK_THROWS_AS(conv2d(tape, x, full<double>({1, 2, 3, 3}, 1.0), 1, 1), std::invalid_argument);
}

TEST_CASE("conv2d: gradients vs finite differences") {
    Rng rng(9);
    auto x = rand_tensor<double>({2, 5, 5}, rng);
    auto w = rand_tensor<double>({3, 2, 3, 3}, rng);
    const double err =
        grad_check<double>([&](Tape<double>& t) { return sum_all(t, mul(t, conv2d(t, x, w, 1, 1), conv2d(t, x, w, 1, 1))); },
                           {x, w});
    CHECK(err < 1e-5);

    auto x2 = rand_tensor<double>({2, 2, 7, 7}, rng);
    auto w2 = rand_tensor<double>({2, 2, 3, 3}, rng);
    const double err2 = grad_check<double>(
        [&](Tape<double>& t) {
            auto y = conv2d(t, x2, w2, 2, 1);
            return sum_all(t, mul(t, y, y));
        },
        {x2, w2});
    CHECK(err2 < 1e-5);
}

TEST_CASE("batchnorm: train mode normalizes per channel") {
    Rng rng(10);
    auto x = rand_tensor<double>({4, 3, 5, 5}, rng, 2.0, false);
    auto gamma = full<double>({3}, 1.0);
    auto beta = zeros<double>({3});
    BnStats<double> stats{zeros<double>({3}), full<double>({3}, 1.0)};
    Tape<double> tape;
    auto y = batch_norm(tape, x, gamma, beta, &stats, true);
    const std::int64_t S = 25, N = 4, C = 3;
    for (std::int64_t c = 0; c < C; ++c) {
        double mean = 0, var = 0;
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t s = 0; s < S; ++s) mean += y->data[static_cast<std::size_t>((n * C + c) * S + s)];
        mean /= static_cast<double>(N * S);
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t s = 0; s < S; ++s) {
                const double d = y->data[static_cast<std::size_t>((n * C + c) * S + s)] - mean;
                var += d * d;
            }
        var /= static_cast<double>(N * S);
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-2);  // eps shrinks variance slightly
    }
}

TEST_CASE("batchnorm: gamma=0 gives beta everywhere") {
    Rng rng(11);
    auto x = rand_tensor<double>({2, 2, 3, 3}, rng, 1.0, false);
    auto gamma = zeros<double>({2});
    auto beta = full<double>({2}, 0.75);
    Tape<double> tape;
    auto y = batch_norm<double>(tape, x, gamma, beta, nullptr, true);
    for (double v : y->data) CHECK(v == 0.75);
}

TEST_CASE("batchnorm: degenerate single element per channel errors in train mode") {
    Tape<double> tape;
    auto x = full<double>({1, 3, 1, 1}, 1.0);
    auto gamma = full<double>({3}, 1.0);
    auto beta = zeros<double>({3});
    CHECK_THROWS_AS(batch_norm<double>(tape, x, gamma, beta, nullptr, true), std::invalid_argument);
    // Eval mode with stats is fine.
    BnStats<double> stats{zeros<double>({3}), full<double>({3}, 1.0)};
    CHECK_NOTHROW(batch_norm(tape, x, gamma, beta, &stats, false));
}

TEST_CASE("batchnorm: input gradient vs finite differences (train and eval)") {
    Rng rng(12);
    auto x = rand_tensor<double>({2, 2, 3, 3}, rng);
    auto gamma = rand_tensor<double>({2}, rng, 0.5);
    auto beta = rand_tensor<double>({2}, rng, 0.5);
    BnStats<double> stats{rand_tensor<double>({2}, rng, 0.3, false), full<double>({2}, 1.3)};
    const double err_train = grad_check<double>(
        [&](Tape<double>& t) { return sum_all(t, batch_norm(t, x, gamma, beta, &stats, true)); }, {x, gamma, beta});
    CHECK(err_train < 1e-4);
    const double err_eval = grad_check<double>(
        [&](Tape<double>& t) {
            auto y = batch_norm(t, x, gamma, beta, &stats, false);
            return sum_all(t, mul(t, y, y));
        },
        {x, gamma, beta});
    CHECK(err_eval < 1e-4);
}

TEST_CASE("batchnorm: running stats updated with momentum 0.1") {
    auto x = make_tensor<double>({1, 1, 1, 4}, {1.0, 2.0, 3.0, 4.0});
    auto gamma = full<double>({1}, 1.0);
    auto beta = zeros<double>({1});
    BnStats<double> stats{zeros<double>({1}), full<double>({1}, 1.0)};
    Tape<double> tape(false);
    batch_norm(tape, x, gamma, beta, &stats, true);
    // batch mean 2.5, biased var 1.25, unbiased var 5/3.
    CHECK(stats.running_mean->data[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(stats.running_var->data[0] == doctest::Approx(0.9 + 0.1 * (5.0 / 3.0)).epsilon(1e-12));
}

TEST_CASE("relu/sigmoid/abs_diff/gap/softmax basics") {
    Tape<double> tape;
    auto v = make_tensor<double>({3}, {-1.0, 0.0, 2.0});
    auto r = relu(tape, v);
    CHECK(r->data == std::vector<double>{0.0, 0.0, 2.0});

    auto s = sigmoid(tape, make_tensor<double>({3}, {0.0, 100.0, -100.0}));
    CHECK(s->data[0] == 0.5);
    CHECK(s->data[1] == doctest::Approx(1.0));
    CHECK(s->data[2] == doctest::Approx(0.0));

    auto a = make_tensor<double>({4}, {1, -2, 3, 0});
    CHECK(abs_diff(tape, a, a)->data == std::vector<double>(4, 0.0));
    CHECK_THROWS_AS(abs_diff(tape, a, make_tensor<double>({3}, {1, 2, 3})), std::invalid_argument);

    auto plane = full<double>({2, 3, 3}, 1.5);
    auto g = global_avg_pool(tape, plane);
    CHECK(g->shape() == std::vector<std::int64_t>{2});
    CHECK(g->data[0] == 1.5);
    CHECK(g->data[1] == 1.5);
    CHECK_THROWS_AS(global_avg_pool(tape, make_tensor<double>({2, 2}, {1, 2, 3, 4})), std::invalid_argument);

    auto sm = softmax_lastdim(tape, zeros<double>({3}));
    for (double p : sm->data) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("softmax rows sum to 1 within 1e-12") {
    Rng rng(13);
    auto x = rand_tensor<double>({16, 7}, rng, 5.0, false);
    Tape<double> tape;
    auto p = softmax_lastdim(tape, x);
    for (std::int64_t r = 0; r < 16; ++r) {
        double s = 0;
        for (std::int64_t j = 0; j < 7; ++j) s += p->data[static_cast<std::size_t>(r * 7 + j)];
        CHECK(std::abs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("cross_entropy: uniform and confident cases") {
    Tape<double> tape;
    auto z = zeros<double>({4, 2});
    std::vector<int> t{0, 1, 0, 1};
    CHECK(cross_entropy(tape, z, t)->item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    auto zc = make_tensor<double>({1, 3}, {0.0, 1000.0, 0.0});
    CHECK(cross_entropy(tape, zc, {1})->item() == doctest::Approx(0.0));

    CHECK_THROWS_AS(cross_entropy(tape, z, std::vector<int>{0, 1, 2, 0}), std::invalid_argument);
}

TEST_CASE("cross_entropy: gradient vs finite differences") {
    Rng rng(14);
    auto z = rand_tensor<double>({5, 4}, rng, 2.0);
    std::vector<int> targets{0, 3, 1, 2, 2};
    const double err = grad_check<double>([&](Tape<double>& t) { return cross_entropy(t, z, targets); }, {z});
    CHECK(err < 1e-5);
}

TEST_CASE("bce_multilabel: uniform, confident, non-binary rejection") {
    Tape<double> tape;
    auto z = zeros<double>({2, 3});
    std::vector<double> y{0, 1, 0, 1, 1, 0};
    CHECK(bce_multilabel(tape, z, y)->item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    auto zc = make_tensor<double>({1, 2}, {1000.0, -1000.0});
    CHECK(bce_multilabel(tape, zc, std::vector<double>{1, 0})->item() == doctest::Approx(0.0));

    CHECK_THROWS_AS(bce_multilabel(tape, z, std::vector<double>{0, 1, 0, 1, 0.5, 0}), std::invalid_argument);
}

TEST_CASE("bce_multilabel: gradient vs finite differences") {
    Rng rng(15);
    auto z = rand_tensor<double>({3, 4}, rng, 2.0);
    std::vector<double> y(12);
    for (auto& v : y) v = rng.uniform01() < 0.5 ? 0.0 : 1.0;
    const double err = grad_check<double>([&](Tape<double>& t) { return bce_multilabel(t, z, y); }, {z});
    CHECK(err < 1e-5);
}

TEST_CASE("layer_norm and masked ops: gradients vs finite differences") {
    Rng rng(16);
    auto x = rand_tensor<double>({4, 6}, rng);
    auto gamma = rand_tensor<double>({6}, rng, 0.5);
    auto beta = rand_tensor<double>({6}, rng, 0.5);
    const double err = grad_check<double>(
        [&](Tape<double>& t) {
            auto y = layer_norm(t, x, gamma, beta);
            return sum_all(t, mul(t, y, y));
        },
        {x, gamma, beta});
    CHECK(err < 1e-4);

    std::vector<std::uint8_t> active{1, 1, 0, 1};
    auto scores = rand_tensor<double>({4, 4}, rng);
    const double err2 = grad_check<double>(
        [&](Tape<double>& t) {
            auto p = masked_softmax_rows(t, scores, active);
            return sum_all(t, mul(t, p, p));
        },
        {scores});
    CHECK(err2 < 1e-5);

    auto feats = rand_tensor<double>({4, 5}, rng);
    const double err3 = grad_check<double>(
        [&](Tape<double>& t) {
            auto m = masked_mean_rows(t, feats, active);
            return sum_all(t, mul(t, m, m));
        },
        {feats});
    CHECK(err3 < 1e-5);
}

TEST_CASE("masked_softmax_rows: inactive columns get zero probability, active rows sum to 1") {
    Rng rng(17);
    auto scores = rand_tensor<double>({3, 5}, rng, 3.0, false);
    std::vector<std::uint8_t> active{1, 0, 1, 1, 0};
    Tape<double> tape;
    auto p = masked_softmax_rows(tape, scores, active);
    for (std::int64_t r = 0; r < 3; ++r) {
        double s = 0;
        for (std::int64_t j = 0; j < 5; ++j) {
            const double v = p->data[static_cast<std::size_t>(r * 5 + j)];
            if (!active[static_cast<std::size_t>(j)]) CHECK(v == 0.0);
            s += v;
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("embedding/concat/bias_add/transpose/select gradients") {
    Rng rng(18);
    auto table = rand_tensor<double>({6, 3}, rng);
    std::vector<int> ids{0, 2, 2, 5};
    const double err = grad_check<double>(
        [&](Tape<double>& t) {
            auto e = embedding_gather(t, table, ids);
            return sum_all(t, mul(t, e, e));
        },
        {table});
    CHECK(err < 1e-5);
    {
        Tape<double> tape;
        CHECK_THROWS_AS(embedding_gather(tape, table, std::vector<int>{6}), std::invalid_argument);
    }

    auto r1 = rand_tensor<double>({4}, rng);
    auto r2 = rand_tensor<double>({4}, rng);
    const double err2 = grad_check<double>(
        [&](Tape<double>& t) {
            auto m = concat_rows(t, {r1, r2});
            return sum_all(t, mul(t, m, m));
        },
        {r1, r2});
    CHECK(err2 < 1e-5);

    auto x = rand_tensor<double>({3, 4}, rng);
    auto b = rand_tensor<double>({4}, rng);
    const double err3 = grad_check<double>(
        [&](Tape<double>& t) {
            auto y = bias_add(t, x, b);
            return sum_all(t, mul(t, y, y));
        },
        {x, b});
    CHECK(err3 < 1e-5);

    const double err4 = grad_check<double>(
        [&](Tape<double>& t) {
            auto y = transpose2d(t, x);
            return sum_all(t, mul(t, y, y));
        },
        {x});
    CHECK(err4 < 1e-5);

    const double err5 =
        grad_check<double>([&](Tape<double>& t) { return select_element(t, mul(t, x, x), 5); }, {x});
    CHECK(err5 < 1e-5);
}

TEST_CASE("thread-count invariance: conv2d forward/backward bit-identical across pools") {
    Rng rng(19);
    auto x = rand_tensor<double>({4, 3, 8, 8}, rng);
    auto w = rand_tensor<double>({6, 3, 3, 3}, rng);
    auto run = [&](int threads, std::vector<double>& out, std::vector<double>& gx, std::vector<double>& gw) {
        ThreadPool::instance().set_threads(threads);
        x->zero_grad();
        w->zero_grad();
        Tape<double> tape;
        auto y = conv2d(tape, x, w, 1, 1);
        auto loss = sum_all(tape, mul(tape, y, y));
        tape.backward(loss);
        out = y->data;
        gx = x->grad;
        gw = w->grad;
    };
    std::vector<double> o1, gx1, gw1, o4, gx4, gw4;
    run(1, o1, gx1, gw1);
    run(4, o4, gx4, gw4);
    ThreadPool::instance().set_threads(2);
    CHECK(o1 == o4);
    CHECK(gx1 == gx4);
    CHECK(gw1 == gw4);
}
