#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "mpft/rng.hpp"
#include "mpft/tensor.hpp"

using namespace mpft;

TEST_CASE("softmax sums to one") {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> logits = rng.gaussian_vector(5, 3.0);
        std::vector<double> p = softmax(logits);
        double sum = 0.0;
        for (double v : p) sum += v;
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("cross entropy on uniform logits") {
    auto r = softmax_cross_entropy(std::vector<double>{0.0, 0.0}, 0);
    CHECK(r.loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(r.grad[0] == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(r.grad[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("cross entropy saturated case") {
    auto r = softmax_cross_entropy(std::vector<double>{100.0, 0.0}, 0);
    CHECK(r.loss < 1e-40);
    CHECK(std::abs(r.grad[0]) < 1e-40);
    CHECK(std::abs(r.grad[1]) < 1e-40);
}

TEST_CASE("cross entropy gradient components sum to zero") {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> logits = rng.gaussian_vector(7, 2.0);
        auto r = softmax_cross_entropy(logits, trial % 7);
        double sum = 0.0;
        for (double g : r.grad) sum += g;
        CHECK(std::abs(sum) < 1e-12);
    }
}

TEST_CASE("cross entropy gradient matches finite differences") {
    std::vector<double> logits{0.3, -0.7, 1.1};
    auto analytic = softmax_cross_entropy(logits, 2);
    auto fd = finite_diff_grad(
        [](std::span<const double> z) { return softmax_cross_entropy(z, 2).loss; },
        logits, 1e-5);
    for (std::size_t i = 0; i < logits.size(); ++i) {
        double rel = std::abs(fd[i] - analytic.grad[i]) /
                     std::max(1e-12, std::abs(analytic.grad[i]));
        CHECK(rel < 1e-6);
    }
}

TEST_CASE("cross entropy rejects bad labels") {
    CHECK_THROWS_AS(softmax_cross_entropy(std::vector<double>{0.0, 0.0}, 2),
                    std::domain_error);
    CHECK_THROWS_AS(softmax_cross_entropy(std::vector<double>{0.0, 0.0}, -1),
                    std::domain_error);
    CHECK_THROWS_AS(softmax_cross_entropy(std::vector<double>{1.0}, 0),
                    std::domain_error);
}

TEST_CASE("finite_diff_grad on x squared") {
    auto g = finite_diff_grad(
        [](std::span<const double> x) { return x[0] * x[0]; },
        std::vector<double>{3.0}, 1e-4);
    CHECK(g[0] == doctest::Approx(6.0).epsilon(1e-6));
}

TEST_CASE("finite_diff_grad exact on affine functions") {
    auto f = [](std::span<const double> x) { return 2.0 * x[0] - 3.0 * x[1] + 7.0; };
    for (double h : {1e-2, 1e-4, 1e-6}) {
        auto g = finite_diff_grad(f, std::vector<double>{1.0, 2.0}, h);
        CHECK(g[0] == doctest::Approx(2.0).epsilon(1e-9));
        CHECK(g[1] == doctest::Approx(-3.0).epsilon(1e-9));
    }
}

TEST_CASE("sgd step without clip") {
    Matrix p(1, 1, 0.0);
    Matrix g(1, 1, 1.0);
    auto opt = OptimizerState::sgd(0.1);
    optimizer_step(opt, p, g);
    CHECK(p.at(0, 0) == doctest::Approx(-0.1).epsilon(1e-15));
    CHECK(opt.step_count == 1);
}

TEST_CASE("zero gradient leaves parameters unchanged") {
    for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
        Matrix p(2, 2, 1.5);
        Matrix g(2, 2, 0.0);
        auto opt = kind == OptimizerKind::sgd ? OptimizerState::sgd(0.5)
                                              : OptimizerState::adam(0.5);
        optimizer_step(opt, p, g);
        for (double v : p.data) CHECK(v == 1.5);
    }
}

TEST_CASE("zero learning rate is the identity") {
    Rng rng(5);
    Matrix p(3, 3);
    for (double& v : p.data) v = rng.gaussian();
    Matrix orig = p;
    Matrix g(3, 3, 0.7);
    auto opt = OptimizerState::adam(0.0);
    optimizer_step(opt, p, g);
    CHECK(p.data == orig.data);
}

TEST_CASE("adam first step magnitude is about the learning rate") {
    for (double gval : {10.0, 0.001}) {
        Matrix p(1, 1, 0.0);
        Matrix g(1, 1, gval);
        auto opt = OptimizerState::adam(0.001);
        optimizer_step(opt, p, g);
        // mhat = g, vhat = g^2, update = lr * g / (|g| + eps) ~ lr * sign(g)
        CHECK(std::abs(p.at(0, 0)) == doctest::Approx(0.001).epsilon(1e-4));
        CHECK(p.at(0, 0) < 0.0);
    }
}

TEST_CASE("global norm clip rescales large gradients") {
    Matrix p(1, 2, 0.0);
    Matrix g(1, 2);
    g.at(0, 0) = 3.0;
    g.at(0, 1) = 4.0;  // norm 5
    auto opt = OptimizerState::sgd(1.0, 1.0);
    optimizer_step(opt, p, g);
    CHECK(p.at(0, 0) == doctest::Approx(-0.6).epsilon(1e-12));
    CHECK(p.at(0, 1) == doctest::Approx(-0.8).epsilon(1e-12));
}

TEST_CASE("clip leaves small gradients alone") {
    Matrix p(1, 1, 0.0);
    Matrix g(1, 1, 0.5);
    auto opt = OptimizerState::sgd(1.0, 1.0);
    optimizer_step(opt, p, g);
    CHECK(p.at(0, 0) == doctest::Approx(-0.5).epsilon(1e-12));
}

TEST_CASE("non-finite gradient rejects the step") {
    Matrix p(1, 1, 2.0);
    Matrix g(1, 1, std::numeric_limits<double>::quiet_NaN());
    auto opt = OptimizerState::sgd(0.1);
    CHECK_THROWS_AS(optimizer_step(opt, p, g), std::runtime_error);
    CHECK(p.at(0, 0) == 2.0);
    CHECK(opt.step_count == 0);
}

TEST_CASE("matvec and transpose agree with hand values") {
    Matrix m(2, 3);
    double vals[] = {1, 2, 3, 4, 5, 6};
    std::copy(std::begin(vals), std::end(vals), m.data.begin());
    std::vector<double> x{1.0, 0.0, -1.0};
    auto y = matvec(m, x);
    CHECK(y[0] == doctest::Approx(-2.0));
    CHECK(y[1] == doctest::Approx(-2.0));
    std::vector<double> u{1.0, -1.0};
    auto z = matvec_transposed(m, u);
    CHECK(z[0] == doctest::Approx(-3.0));
    CHECK(z[1] == doctest::Approx(-3.0));
    CHECK(z[2] == doctest::Approx(-3.0));
}

TEST_CASE("add_outer accumulates scaled outer product") {
    Matrix a(2, 2, 1.0);
    std::vector<double> u{1.0, 2.0}, v{3.0, 4.0};
    add_outer(a, u, v, 0.5);
    CHECK(a.at(0, 0) == doctest::Approx(1.0 + 1.5));
    CHECK(a.at(0, 1) == doctest::Approx(1.0 + 2.0));
    CHECK(a.at(1, 0) == doctest::Approx(1.0 + 3.0));
    CHECK(a.at(1, 1) == doctest::Approx(1.0 + 4.0));
}

TEST_CASE("adam step count and moment shapes") {
    Matrix p(2, 3, 0.0);
    Matrix g(2, 3, 1.0);
    auto opt = OptimizerState::adam(0.01);
    for (int i = 0; i < 5; ++i) optimizer_step(opt, p, g);
    CHECK(opt.step_count == 5);
    REQUIRE(opt.first_moment.size() == 1);
    CHECK(opt.first_moment[0].same_shape(p));
    CHECK(opt.second_moment[0].same_shape(p));
}
