#pragma once
// Shared helpers for the unit tests: random fixtures and finite-difference oracles.

#include <cmath>
#include <functional>
#include <random>

#include "itl/data.hpp"
#include "itl/nn.hpp"
#include "itl/random.hpp"
#include "itl/tensor.hpp"

namespace itl::test {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(shape);
    for (auto& x : t.data) x = u(rng);
    return t;
}

inline ParameterSet random_like(const ParameterSet& p, Rng& rng, double lo = -1.0, double hi = 1.0) {
    ParameterSet out;
    for (const auto& [name, t] : p) out.insert(name, random_tensor(t.shape, rng, lo, hi));
    return out;
}

inline std::vector<int> random_labels(std::size_t n, std::size_t classes, Rng& rng) {
    std::uniform_int_distribution<int> u(0, static_cast<int>(classes) - 1);
    std::vector<int> y(n);
    for (auto& v : y) v = u(rng);
    return y;
}

/// Central differences of f over every scalar of x.
inline Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, Tensor x, double h = 1e-6) {
    Tensor g(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double up = f(x);
        x[i] = keep - h;
        const double down = f(x);
        x[i] = keep;
        g[i] = (up - down) / (2 * h);
    }
    return g;
}

inline ParameterSet numeric_gradient(const std::function<double(const ParameterSet&)>& f, ParameterSet p,
                                     double h = 1e-6) {
    ParameterSet g = p.zeros_like();
    for (auto& [name, t] : p) {
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double keep = t[i];
            t[i] = keep + h;
            const double up = f(p);
            t[i] = keep - h;
            const double down = f(p);
            t[i] = keep;
            g.at(name)[i] = (up - down) / (2 * h);
        }
    }
    return g;
}

/// ||a - b|| / max(||a||, ||b||); exact zeros on both sides count as agreement.
inline double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
    double diff = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double scale = std::sqrt(std::max(na, nb));
    return scale == 0 ? 0.0 : std::sqrt(diff) / scale;
}

inline double rel_error(const Tensor& a, const Tensor& b) { return rel_error(a.data, b.data); }

inline std::vector<double> flatten(const ParameterSet& p) {
    std::vector<double> v;
    for (const auto& [name, t] : p) v.insert(v.end(), t.data.begin(), t.data.end());
    return v;
}

inline double rel_error(const ParameterSet& a, const ParameterSet& b) { return rel_error(flatten(a), flatten(b)); }

/// Small conv net: conv -> relu -> pool -> flatten -> dense -> relu | dense head.
inline ModelSpec small_convnet(HeadSetting setting = HeadSetting::Single, std::size_t heads = 1) {
    ModelSpec m;
    m.input_shape = {2, 6, 6};
    m.feature_layers = {LayerSpec::conv2d(2, 3, 3, 1), LayerSpec::relu(), LayerSpec::max_pool2d(2),
                        LayerSpec::flatten(), LayerSpec::dense(12, 5, 2), LayerSpec::relu()};
    m.head_layers = {LayerSpec::dense(5, 4, 3)};
    m.head_setting = setting;
    m.num_heads = setting == HeadSetting::Multi ? heads : 1;
    return m;
}

/// A small synthetic task that trains in milliseconds.
inline SyntheticTaskSpec tiny_task(std::uint64_t seed = 7) {
    SyntheticTaskSpec s;
    s.num_classes = 4;
    s.dim = 8;
    s.train_per_class = 20;
    s.val_per_class = 5;
    s.test_per_class = 5;
    s.num_centers = 3;
    s.seed = seed;
    return s;
}

} // namespace itl::test
