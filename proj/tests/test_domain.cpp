#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "combo/autodiff.hpp"
#include "combo/domain.hpp"
#include "combo/rng.hpp"

using namespace combo;

namespace {
const double kInf = std::numeric_limits<double>::infinity();
}

TEST_CASE("softmax: uniform over equal logits") {
    auto d = softmax({0.0, 0.0, 0.0});
    for (double p : d.probs) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax: masked channel is exactly zero") {
    auto d = softmax({0.0, -kInf});
    CHECK(d.probs[0] == 1.0);
    CHECK(d.probs[1] == 0.0);
}

TEST_CASE("softmax: reference values for [1,2,3]") {
    // Frozen from an extended-precision evaluation of exp-normalization.
    auto d = softmax({1.0, 2.0, 3.0});
    CHECK(d.probs[0] == doctest::Approx(0.09003057317038046).epsilon(1e-10));
    CHECK(d.probs[1] == doctest::Approx(0.24472847105479767).epsilon(1e-10));
    CHECK(d.probs[2] == doctest::Approx(0.66524095577482183).epsilon(1e-10));
}

TEST_CASE("softmax: empty support is an error") {
    CHECK_THROWS_WITH_AS(softmax({-kInf, -kInf}), doctest::Contains("empty support"),
                         std::domain_error);
}

TEST_CASE("softmax: sums to one and shift-invariant (property)") {
    Pcg32 rng(123);
    for (int it = 0; it < 200; ++it) {
        std::size_t n = static_cast<std::size_t>(rng.next_int(1, 512));
        std::vector<double> z(n);
        for (auto& x : z) x = rng.next_uniform(-30.0, 30.0);
        auto d = softmax(z);
        double s = 0.0;
        for (double p : d.probs) s += p;
        CHECK(std::abs(s - 1.0) < 1e-9);

        double c = rng.next_uniform(-5.0, 5.0);
        std::vector<double> zs = z;
        for (auto& x : zs) x += c;
        auto d2 = softmax(zs);
        for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(d.probs[i] - d2.probs[i]) < 1e-12);
    }
}

TEST_CASE("grad_check: quadratic") {
    auto f = [](const std::vector<double>& p) { return p[0] * p[0]; };
    double err = grad_check(f, {3.0}, {6.0}, 1e-5);
    CHECK(err < 1e-6);
}

TEST_CASE("grad_check: constant function has zero error") {
    auto f = [](const std::vector<double>&) { return 42.0; };
    double err = grad_check(f, {1.0, 2.0}, {0.0, 0.0}, 1e-4);
    CHECK(err == 0.0);
}

TEST_CASE("grad_check: softmax cross-entropy on random 4-logit input") {
    Pcg32 rng(7);
    for (int it = 0; it < 20; ++it) {
        std::vector<double> logits(4);
        for (auto& x : logits) x = rng.next_uniform(-3.0, 3.0);
        std::size_t target = static_cast<std::size_t>(rng.next_int(0, 3));

        auto f = [&](const std::vector<double>& p) {
            Tensor<double> t({1, 4}, p);
            auto v = ad::Var<double>::constant(std::move(t));
            auto lsm = ad::log_softmax_rows(v);
            return -lsm.value().at(0, target);
        };
        // Analytic gradient via the AD engine.
        auto leaf = ad::Var<double>::leaf(Tensor<double>({1, 4}, logits));
        auto loss = ad::scale(
            ad::pick_per_row(ad::log_softmax_rows(leaf), std::vector<std::size_t>{target}),
            -1.0);
        loss.backward();
        std::vector<double> analytic(leaf.grad().data.begin(), leaf.grad().data.end());

        double err = grad_check(f, logits, analytic, 1e-5);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("grad_check: rejects non-finite values and bad epsilon") {
    auto f = [](const std::vector<double>& p) { return std::log(p[0]); };
    CHECK_THROWS_AS(grad_check(f, {-1.0}, {0.0}, 1e-5), std::domain_error);
    auto g = [](const std::vector<double>& p) { return p[0]; };
    CHECK_THROWS_AS(grad_check(g, {1.0}, {1.0}, 0.0), std::invalid_argument);
}

TEST_CASE("channel layout: active mask and no-obj placement") {
    ChannelLayout layout{6};
    CHECK(layout.channels() == 8);
    CHECK(layout.no_obj() == 7);
    auto m = layout.active_mask({1, 2, 5});
    CHECK_FALSE(m[0]);  // reserved
    CHECK(m[1]);
    CHECK(m[2]);
    CHECK_FALSE(m[3]);
    CHECK_FALSE(m[4]);
    CHECK(m[5]);
    CHECK_FALSE(m[6]);
    CHECK(m[7]);  // no-obj always active
    CHECK_THROWS_AS(layout.active_mask({7}), std::invalid_argument);
}
