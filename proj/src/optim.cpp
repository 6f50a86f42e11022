#include "itl/optim.hpp"

#include <cmath>

#include "itl/error.hpp"

namespace itl {

namespace {

bool is_frozen(const std::string& name, FrozenPrefixes frozen) {
    for (const auto& p : frozen) {
        if (name.starts_with(p)) return true;
    }
    return false;
}

void require_finite(const ParameterSet& grad) {
    for (const auto& [name, t] : grad) {
        if (!t.all_finite()) throw NumericalError("non-finite gradient in parameter '" + name + "'");
    }
}

} // namespace

double SgdState::rate() const {
    return base_lr * std::pow(decay_base, static_cast<double>(epoch) / decay_period_epochs);
}

AdamState AdamState::zeros_like(const ParameterSet& params, double lr) {
    AdamState s;
    s.m = params.zeros_like();
    s.v = params.zeros_like();
    s.lr = lr;
    return s;
}

double OptimizerState::base_rate() const {
    if (const auto* adam = std::get_if<AdamState>(&state)) return adam->lr;
    return std::get<SgdState>(state).rate();
}

OptimizerState make_optimizer(OptimizerKind kind, double lr, const ParameterSet& params) {
    if (kind == OptimizerKind::Adam) return {AdamState::zeros_like(params, lr), 1.0};
    SgdState sgd;
    sgd.base_lr = lr;
    return {sgd, 1.0};
}

void sgd_step(SgdState& state, ParameterSet& params, const ParameterSet& grad, double lr_scale,
              FrozenPrefixes frozen) {
    require_aligned(params, grad, "sgd_step");
    require_finite(grad);
    const double r = state.rate() * lr_scale;
    auto ig = grad.begin();
    for (auto ip = params.begin(); ip != params.end(); ++ip, ++ig) {
        if (is_frozen(ip->first, frozen)) continue;
        auto& p = ip->second.data;
        const auto& g = ig->second.data;
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= r * g[i];
    }
}

void adam_step(AdamState& state, ParameterSet& params, const ParameterSet& grad, double lr_scale,
               FrozenPrefixes frozen) {
    require_aligned(params, grad, "adam_step");
    require_aligned(params, state.m, "adam_step (first moment)");
    require_aligned(params, state.v, "adam_step (second moment)");
    require_finite(grad);
    state.t += 1;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    const double r = state.lr * lr_scale;
    auto ig = grad.begin();
    auto im = state.m.begin();
    auto iv = state.v.begin();
    for (auto ip = params.begin(); ip != params.end(); ++ip, ++ig, ++im, ++iv) {
        if (is_frozen(ip->first, frozen)) continue;
        auto& p = ip->second.data;
        auto& m = im->second.data;
        auto& v = iv->second.data;
        const auto& g = ig->second.data;
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double m_hat = m[i] / c1;
            const double v_hat = v[i] / c2;
            p[i] -= r * m_hat / (std::sqrt(v_hat) + state.epsilon);
        }
    }
}

void optimizer_step(OptimizerState& state, ParameterSet& params, const ParameterSet& grad, FrozenPrefixes frozen) {
    if (auto* adam = std::get_if<AdamState>(&state.state)) {
        adam_step(*adam, params, grad, state.lr_scale, frozen);
    } else {
        sgd_step(std::get<SgdState>(state.state), params, grad, state.lr_scale, frozen);
    }
}

ParameterSet inject_regularized_gradient(const ParameterSet& grad, const ParameterSet& reg_grad) {
    return add(grad, reg_grad);
}

void halve_learning_rate(OptimizerState& state) { state.lr_scale *= 0.5; }

void advance_epoch(OptimizerState& state) {
    if (auto* sgd = std::get_if<SgdState>(&state.state)) ++sgd->epoch;
}

} // namespace itl
