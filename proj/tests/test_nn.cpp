#include <doctest.h>

#include "itl/error.hpp"
#include "itl/loss.hpp"
#include "itl/nn.hpp"
#include "support.hpp"

using namespace itl;
using namespace itl::test;

namespace {

double dot(const Tensor& a, const Tensor& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// Linear probe of the network outputs: f = <logits, R> + <features, S>.
void check_backward(const ModelSpec& model, std::size_t batch, std::uint64_t seed, std::optional<std::size_t> head) {
    Rng rng(seed);
    const ParameterSet params = random_like(init_params(model, seed), rng, -0.5, 0.5);
    Shape in{batch};
    in.insert(in.end(), model.input_shape.begin(), model.input_shape.end());
    const Tensor x = random_tensor(in, rng);
    const ForwardTrace trace = forward_trace(model, params, x, head);
    const Tensor r = random_tensor(trace.logits.shape, rng);
    const Tensor s = random_tensor(trace.features.shape, rng);
    const ParameterSet analytic = backward(model, params, trace, r, &s);
    auto f = [&](const ParameterSet& p) {
        const ForwardTrace t = forward_trace(model, p, x, head);
        return dot(t.logits, r) + dot(t.features, s);
    };
    CHECK(rel_error(analytic, numeric_gradient(f, params)) <= 1e-5);
}

} // namespace

TEST_CASE("tensor construction validates sizes") {
    CHECK(shape_size({2, 3, 4}) == 24);
    CHECK_THROWS(Tensor({2, 2}, std::vector<double>{1, 2, 3}));
    Tensor t({3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6});
    const std::vector<std::size_t> rows{2, 0};
    const Tensor g = gather_rows(t, rows);
    CHECK(g.shape == Shape{2, 2});
    CHECK(g.data == std::vector<double>{5, 6, 1, 2});
}

TEST_CASE("parameter set arithmetic and alignment") {
    ParameterSet a({{"w", Tensor({2}, std::vector<double>{1, 2})}});
    ParameterSet b({{"w", Tensor({2}, std::vector<double>{3, 5})}});
    axpy(a, 2.0, b);
    CHECK(a.at("w").data == std::vector<double>{7, 12});
    ParameterSet c({{"v", Tensor({2})}});
    CHECK_THROWS_AS(require_aligned(a, c, "test"), AlignmentError);
    CHECK_THROWS_AS(axpy(a, 1.0, c), AlignmentError);
    CHECK(fingerprint(a) != fingerprint(b));
}

TEST_CASE("dense and relu gradients match finite differences") {
    const ModelSpec model = ModelSpec::mlp(5, {7, 6}, 4);
    for (std::uint64_t seed = 0; seed < 20; ++seed) check_backward(model, 3, seed, std::nullopt);
}

TEST_CASE("conv, pooling and flatten gradients match finite differences") {
    const ModelSpec model = small_convnet();
    for (std::uint64_t seed = 100; seed < 120; ++seed) check_backward(model, 2, seed, std::nullopt);
}

TEST_CASE("multi-head gradients match finite differences and leave other heads at zero") {
    const ModelSpec model = ModelSpec::mlp(4, {5}, 3, HeadSetting::Multi, 3);
    for (std::uint64_t seed = 200; seed < 220; ++seed) check_backward(model, 3, seed, seed % 3);

    Rng rng(1);
    const ParameterSet params = init_params(model, 1);
    const Tensor x = random_tensor({2, 4}, rng);
    const ForwardTrace trace = forward_trace(model, params, x, 1);
    const ParameterSet g = backward(model, params, trace, random_tensor(trace.logits.shape, rng));
    for (const auto& [name, t] : g) {
        if (name.rfind(head_prefix(model, 0), 0) == 0 || name.rfind(head_prefix(model, 2), 0) == 0) {
            for (double v : t.data) CHECK(v == 0.0);
        }
    }
}

TEST_CASE("cross-entropy matches a hand computation and finite differences") {
    Tensor logits({1, 3}, std::vector<double>{1.0, 2.0, 0.5});
    const std::vector<int> y{1};
    const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(0.5));
    CHECK(cross_entropy(logits, y).loss == doctest::Approx(lse - 2.0).epsilon(1e-14));

    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const Tensor z = random_tensor({4, 5}, rng, -3, 3);
        const auto labels = random_labels(4, 5, rng);
        const Tensor numeric = numeric_gradient([&](const Tensor& t) { return cross_entropy(t, labels).loss; }, z);
        CHECK(rel_error(cross_entropy(z, labels).d_logits, numeric) <= 1e-5);
    }
}

TEST_CASE("cross-entropy stays finite for extreme logits") {
    Tensor z({2, 3}, std::vector<double>{1000, -1000, 0, -800, 800, 3});
    const auto r = cross_entropy(z, std::vector<int>{1, 1});
    CHECK(std::isfinite(r.loss));
    CHECK(r.d_logits.all_finite());
    CHECK_THROWS_AS(cross_entropy(z, std::vector<int>{0, 3}), DataError);
}

TEST_CASE("dice loss matches finite differences and its defining ratio") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const Tensor z = random_tensor({3, 4}, rng, -2, 2);
        Tensor mask(z.shape);
        std::bernoulli_distribution b(0.4);
        for (auto& m : mask.data) m = b(rng) ? 1.0 : 0.0;
        const Tensor numeric = numeric_gradient([&](const Tensor& t) { return dice(t, mask, 1.0).loss; }, z);
        CHECK(rel_error(dice(z, mask, 1.0).d_logits, numeric) <= 1e-5);
    }
    const std::vector<double> p{1, 0, 1}, y{1, 0, 1};
    CHECK(dice_from_probabilities(p, y, 1.0) == doctest::Approx(1.0 - 5.0 / 5.0));
    const std::vector<double> zeros{0, 0, 0};
    CHECK(dice_from_probabilities(zeros, zeros, 1.0) == 0.0);
    CHECK(dice_from_probabilities(p, zeros, 1.0) == doctest::Approx(1.0 - 1.0 / 3.0));
}

TEST_CASE("accuracy counts argmax hits") {
    Tensor z({4, 2}, std::vector<double>{1, 0, 0, 1, 2, 1, 0, 3});
    CHECK(accuracy_percent(z, std::vector<int>{0, 1, 1, 1}) == 75.0);
}

TEST_CASE("initialisation is deterministic in the seed") {
    const ModelSpec model = small_convnet();
    CHECK(bit_identical(init_params(model, 3), init_params(model, 3)));
    CHECK_FALSE(bit_identical(init_params(model, 3), init_params(model, 4)));
    for (const auto& [name, t] : init_params(model, 3)) {
        if (name.find("bias") != std::string::npos) {
            for (double v : t.data) CHECK(v == 0.0);
        }
    }
}

TEST_CASE("batched forward equals per-row forward") {
    const ModelSpec model = small_convnet();
    const ParameterSet params = init_params(model, 9);
    Rng rng(9);
    const Tensor x = random_tensor({5, 2, 6, 6}, rng);
    const Tensor all = forward(model, params, x);
    for (std::size_t r = 0; r < 5; ++r) {
        const std::vector<std::size_t> one{r};
        const Tensor single = forward(model, params, gather_rows(x, one));
        for (std::size_t c = 0; c < single.size(); ++c) CHECK(single[c] == all.row(r)[c]);
    }
}

TEST_CASE("incompatible layer stacks are rejected") {
    ModelSpec m = ModelSpec::mlp(4, {5}, 3);
    m.head_layers = {LayerSpec::dense(6, 3)};
    CHECK_THROWS_AS(m.validate(), ConfigError);
    ModelSpec c = small_convnet();
    c.feature_layers[0] = LayerSpec::conv2d(2, 3, 7);
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("replacing a head keeps every other parameter") {
    const ModelSpec model = ModelSpec::mlp(4, {5}, 3, HeadSetting::Multi, 3);
    const ParameterSet p = init_params(model, 1);
    const ParameterSet q = replace_head(model, p, 1, 99);
    for (const auto& [name, t] : p) {
        const bool replaced = name.rfind(head_prefix(model, 1), 0) == 0;
        if (replaced && name.find("weight") != std::string::npos) {
            CHECK_FALSE(bit_identical(t, q.at(name)));
        } else if (!replaced) {
            CHECK(bit_identical(t, q.at(name)));
        }
    }
}
