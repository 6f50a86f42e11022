#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>

#include "itl/tensor.hpp"

namespace itl {

/// SGD with rate base_lr * decay_base^(epoch / decay_period_epochs).
struct SgdState {
    double base_lr = 0.1;
    double decay_base = 0.8;
    double decay_period_epochs = 5.0;
    std::int64_t epoch = 0;

    double rate() const;
};

/// Adam with bias-corrected moments. m and v hold the raw running moments;
/// the bias correction is applied when forming the update.
struct AdamState {
    ParameterSet m;
    ParameterSet v;
    std::int64_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double lr = 0.001;

    static AdamState zeros_like(const ParameterSet& params, double lr = 0.001);
};

enum class OptimizerKind { Sgd, Adam };

struct OptimizerState {
    std::variant<SgdState, AdamState> state;
    /// Product of all overfitting-monitor halvings.
    double lr_scale = 1.0;

    OptimizerKind kind() const { return std::holds_alternative<AdamState>(state) ? OptimizerKind::Adam : OptimizerKind::Sgd; }
    double base_rate() const;
    double effective_lr() const { return base_rate() * lr_scale; }
};

OptimizerState make_optimizer(OptimizerKind kind, double lr, const ParameterSet& params);

/// Parameters whose names start with any of these prefixes are not updated.
using FrozenPrefixes = std::span<const std::string>;

/// One SGD step; throws NumericalError (parameters untouched) on non-finite gradients.
void sgd_step(SgdState& state, ParameterSet& params, const ParameterSet& grad, double lr_scale = 1.0,
              FrozenPrefixes frozen = {});

/// One Adam step; throws NumericalError (state untouched) on non-finite gradients.
void adam_step(AdamState& state, ParameterSet& params, const ParameterSet& grad, double lr_scale = 1.0,
               FrozenPrefixes frozen = {});

void optimizer_step(OptimizerState& state, ParameterSet& params, const ParameterSet& grad,
                    FrozenPrefixes frozen = {});

/// g' = g + reg_grad. Optimizer moments are then computed on g'.
ParameterSet inject_regularized_gradient(const ParameterSet& grad, const ParameterSet& reg_grad);

/// Multiplies the effective learning rate by 0.5; moments untouched.
void halve_learning_rate(OptimizerState& state);

/// Advances the accumulated epoch counter driving the SGD schedule.
void advance_epoch(OptimizerState& state);

} // namespace itl
