#include <doctest.h>

#include <cmath>

#include "itl/error.hpp"
#include "itl/optim.hpp"
#include "itl/regularizers.hpp"
#include "support.hpp"

using namespace itl;
using namespace itl::test;

namespace {

ParameterSet scalar(double v) { return ParameterSet({{"x", Tensor({1}, std::vector<double>{v})}}); }

// Adam on f(x) = a (x - c)^2 plus lambda * omega * (x - anchor)^2, traced with
// the bias-corrected moments carried directly (m_hat, v_hat).
std::vector<double> adam_trace(double x, int steps, double lambda, double omega, double anchor) {
    const double a = 1.7, c = -0.4, b1 = 0.9, b2 = 0.999, eps = 1e-8, r = 0.05;
    double m_hat = 0, v_hat = 0;
    std::vector<double> xs;
    for (int t = 1; t <= steps; ++t) {
        const double g = 2 * a * (x - c);
        const double g_reg = g + 2 * lambda * omega * (x - anchor);
        const double prev1 = t == 1 ? 0.0 : 1 - std::pow(b1, t - 1);
        const double prev2 = t == 1 ? 0.0 : 1 - std::pow(b2, t - 1);
        m_hat = (b1 * prev1 * m_hat + (1 - b1) * g_reg) / (1 - std::pow(b1, t));
        v_hat = (b2 * prev2 * v_hat + (1 - b2) * g_reg * g_reg) / (1 - std::pow(b2, t));
        x -= r * m_hat / (std::sqrt(v_hat) + eps);
        xs.push_back(x);
    }
    return xs;
}

} // namespace

TEST_CASE("adam follows a hand-traced scalar quadratic") {
    for (double lambda : {0.0, 1.0}) {
        const double omega = 0.3, anchor = 0.8;
        const auto expected = adam_trace(2.0, 10, lambda, omega, anchor);
        ParameterSet p = scalar(2.0);
        OptimizerState opt = make_optimizer(OptimizerKind::Adam, 0.05, p);
        for (int t = 0; t < 10; ++t) {
            const double x = p.at("x")[0];
            const ParameterSet g = scalar(2 * 1.7 * (x + 0.4));
            const ParameterSet reg = importance_penalty_gradient(p, scalar(anchor), scalar(omega), lambda);
            optimizer_step(opt, p, inject_regularized_gradient(g, reg));
            CHECK(std::abs(p.at("x")[0] - expected[t]) <= 1e-12);
        }
    }
}

TEST_CASE("regularized gradient injection is an elementwise sum") {
    // A commonly printed form of the penalty derivative is 2 lambda omega (anchor - x);
    // injection itself just adds whatever it is given.
    const double lambda = 1.0, omega = 0.5, anchor = 1.0, x = 0.0, g = 0.0;
    const ParameterSet printed = scalar(2 * lambda * omega * (anchor - x));
    CHECK(inject_regularized_gradient(scalar(g), printed).at("x")[0] == 1.0);
    // The descent-consistent derivative of lambda omega (anchor - x)^2 has the opposite sign.
    CHECK(importance_penalty_gradient(scalar(x), scalar(anchor), scalar(omega), lambda).at("x")[0] == -1.0);
}

TEST_CASE("sgd uses the exponential epoch schedule") {
    ParameterSet p = scalar(1.0);
    OptimizerState opt = make_optimizer(OptimizerKind::Sgd, 0.1, p);
    CHECK(opt.effective_lr() == doctest::Approx(0.1));
    for (int e = 0; e < 5; ++e) advance_epoch(opt);
    CHECK(opt.effective_lr() == doctest::Approx(0.1 * 0.8).epsilon(1e-15));
    advance_epoch(opt);
    CHECK(opt.effective_lr() == doctest::Approx(0.1 * std::pow(0.8, 6.0 / 5.0)).epsilon(1e-15));
    const double lr = opt.effective_lr();
    optimizer_step(opt, p, scalar(2.0));
    CHECK(p.at("x")[0] == doctest::Approx(1.0 - lr * 2.0).epsilon(1e-15));
}

TEST_CASE("halving scales the rate and leaves the moments alone") {
    ParameterSet p = scalar(1.0);
    OptimizerState opt = make_optimizer(OptimizerKind::Adam, 0.01, p);
    optimizer_step(opt, p, scalar(0.5));
    const AdamState before = std::get<AdamState>(opt.state);
    halve_learning_rate(opt);
    halve_learning_rate(opt);
    CHECK(opt.effective_lr() == doctest::Approx(0.0025));
    const AdamState& after = std::get<AdamState>(opt.state);
    CHECK(bit_identical(before.m, after.m));
    CHECK(bit_identical(before.v, after.v));
    CHECK(before.t == after.t);
}

TEST_CASE("non-finite gradients leave parameters and state untouched") {
    ParameterSet p = scalar(1.0);
    OptimizerState opt = make_optimizer(OptimizerKind::Adam, 0.01, p);
    optimizer_step(opt, p, scalar(0.5));
    const ParameterSet p0 = p;
    const AdamState s0 = std::get<AdamState>(opt.state);
    CHECK_THROWS_AS(optimizer_step(opt, p, scalar(std::nan(""))), NumericalError);
    CHECK_THROWS_AS(optimizer_step(opt, p, scalar(INFINITY)), NumericalError);
    CHECK(bit_identical(p, p0));
    CHECK(std::get<AdamState>(opt.state).t == s0.t);
    CHECK(bit_identical(std::get<AdamState>(opt.state).m, s0.m));
}

TEST_CASE("frozen prefixes are not updated by either optimizer") {
    for (auto kind : {OptimizerKind::Adam, OptimizerKind::Sgd}) {
        ParameterSet p({{"head00.w", Tensor({2}, 1.0)}, {"head01.w", Tensor({2}, 1.0)}});
        OptimizerState opt = make_optimizer(kind, 0.1, p);
        const std::vector<std::string> frozen{"head01."};
        optimizer_step(opt, p, ParameterSet({{"head00.w", Tensor({2}, 1.0)}, {"head01.w", Tensor({2}, 1.0)}}), frozen);
        CHECK(p.at("head00.w")[0] != 1.0);
        CHECK(p.at("head01.w")[0] == 1.0);
    }
}

TEST_CASE("misaligned gradients are rejected") {
    ParameterSet p = scalar(1.0);
    OptimizerState opt = make_optimizer(OptimizerKind::Adam, 0.01, p);
    CHECK_THROWS_AS(optimizer_step(opt, p, ParameterSet({{"y", Tensor({1})}})), AlignmentError);
}
