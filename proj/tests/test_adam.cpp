#include "doctest.h"

#include <cmath>

#include "support.hpp"
#include "timnet/adam.hpp"
#include "timnet/ops.hpp"

using namespace timnet;

TEST_CASE("adam: first step matches the closed form") {
    // At t=1 the bias corrections cancel: delta = -lr * g / (|g| + eps).
    Rng rng(21);
    auto p = testsupport::rand_tensor<double>({7}, rng);
    const auto before = p->data;
    std::vector<double> g(7);
    for (auto& x : g) x = rng.normal(0.0, 2.0);
    p->ensure_grad();
    p->grad = g;
    AdamOptions<double> opt;
    opt.lr = 1e-3;
    Adam<double> adam({{"p", p}}, opt);
    adam.step();
    for (std::size_t i = 0; i < 7; ++i) {
        const double expected = before[i] - opt.lr * g[i] / (std::abs(g[i]) + opt.eps);
        CHECK(std::abs(p->data[i] - expected) < 1e-12);
    }
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    auto p = make_tensor<double>({3}, {1.0, -2.0, 3.0}, true);
    p->ensure_grad();
    Adam<double> adam({{"p", p}});
    adam.step();
    CHECK(p->data == std::vector<double>{1.0, -2.0, 3.0});
}

TEST_CASE("adam: constant positive gradient decreases the parameter at every step") {
    auto p = make_tensor<double>({1}, {0.5}, true);
    Adam<double> adam({{"p", p}});
    double prev = p->data[0];
    for (int s = 0; s < 2; ++s) {
        p->ensure_grad();
        p->grad[0] = 0.3;
        adam.step();
        CHECK(p->data[0] < prev);
        prev = p->data[0];
    }
}

TEST_CASE("adam: missing gradient names the parameter") {
    auto p = make_tensor<double>({2}, {1.0, 2.0}, true);
    Adam<double> adam({{"encoder.fc.weight", p}});
    CHECK_THROWS_WITH_AS(adam.step(), doctest::Contains("encoder.fc.weight"), std::invalid_argument);
}

TEST_CASE("adam: step counter increments by one per step") {
    auto p = make_tensor<double>({1}, {0.0}, true);
    p->ensure_grad();
    Adam<double> adam({{"p", p}});
    CHECK(adam.step_count() == 0);
    adam.step();
    adam.step();
    CHECK(adam.step_count() == 2);
}
