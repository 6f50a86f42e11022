#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "itl/loss.hpp"
#include "itl/nn.hpp"
#include "itl/tensor.hpp"

namespace itl {

/// Per-parameter nonnegative importance weights, aligned with the model.
using ImportanceMap = ParameterSet;

// ---- quadratic penalties --------------------------------------------------
//
// Each *_penalty returns the scalar term added to the task loss and each
// *_gradient its exact derivative w.r.t. `params`. The gradients point away
// from `anchor`, so a descent step pulls the parameters back toward it.

/// lambda * sum_k omega_k (anchor_k - theta_k)^2
double importance_penalty(const ParameterSet& params, const ParameterSet& anchor, const ImportanceMap& omega,
                          double lambda);
/// 2 lambda omega_k (theta_k - anchor_k)
ParameterSet importance_penalty_gradient(const ParameterSet& params, const ParameterSet& anchor,
                                         const ImportanceMap& omega, double lambda);

/// lambda * sum_k (anchor_k - theta_k)^2 / (1 + omega_k)
double inverse_importance_penalty(const ParameterSet& params, const ParameterSet& anchor,
                                  const ImportanceMap& omega, double lambda);
ParameterSet inverse_importance_gradient(const ParameterSet& params, const ParameterSet& anchor,
                                         const ImportanceMap& omega, double lambda);

/// beta * sum_k (anchor_k - theta_k)^2  (IMM L2 transfer)
double l2_transfer_penalty(const ParameterSet& params, const ParameterSet& anchor, double beta);
ParameterSet l2_transfer_gradient(const ParameterSet& params, const ParameterSet& anchor, double beta);

/// Negative entries are clamped to zero.
void clamp_nonnegative(ImportanceMap& omega);

// ---- importance estimators -----------------------------------------------

/// Diagonal empirical Fisher: mean over samples of the squared gradient of
/// loss_scale * log p(y | x). Parameters of unused heads get zero.
ImportanceMap ewc_fisher(const ModelSpec& model, const ParameterSet& params, const Tensor& inputs,
                         std::span<const int> labels, std::optional<std::size_t> head = std::nullopt,
                         double loss_scale = 1.0);

enum class MasFunctional {
    SquaredL2,     ///< |d ||M(x)||^2 / d theta|
    PerLogitAbs,   ///< sum_c |d M_c(x) / d theta|
};

/// Mean absolute output sensitivity over samples.
ImportanceMap mas_importance(const ModelSpec& model, const ParameterSet& params, const Tensor& inputs,
                             std::optional<std::size_t> head = std::nullopt,
                             MasFunctional functional = MasFunctional::SquaredL2);

/// Running path integral of the task gradient along the parameter trajectory
/// at one center.
struct SiAccumulator {
    ParameterSet w;
    ParameterSet start;

    static SiAccumulator begin(const ParameterSet& params);
    bool empty() const { return start.empty(); }
};

/// w_k += g_k * (after_k - before_k)
void si_track_step(SiAccumulator& acc, const ParameterSet& g_task, const ParameterSet& before,
                   const ParameterSet& after);

/// Per-center contribution w_k / ((end_k - start_k)^2 + epsilon), clamped at 0.
ImportanceMap si_contribution(const SiAccumulator& acc, const ParameterSet& end, double epsilon);

/// omega += si_contribution(acc, end, epsilon)
void si_update_importance(ImportanceMap& omega, const SiAccumulator& acc, const ParameterSet& end,
                          double epsilon = 1e-3);

// ---- distillation ----------------------------------------------------------

struct TeacherSnapshot {
    ParameterSet params;
    double temperature = 2.0;
};

/// T^2 * batch-mean cross-entropy between softmax(teacher/T) and
/// softmax(student/T); gradient w.r.t. the student logits.
LogitLoss kd_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature);

/// Same, with the teacher logits computed from the snapshot on `batch`.
LogitLoss kd_loss(const TeacherSnapshot& teacher, const ModelSpec& model, const Tensor& student_logits,
                  const Tensor& batch, std::optional<std::size_t> head = std::nullopt);

// ---- encoder-based constraint ---------------------------------------------

/// One-hidden-layer autoencoder over feature vectors: linear encoder
/// (enc.weight [code, feat], enc.bias), ReLU decoder (dec.weight, dec.bias).
struct EncoderState {
    ParameterSet weights;
    std::size_t code_dim = 0;
    double alpha = 1e-3;
    bool degenerate = false;  ///< constant features: zero code
    double train_mse = 0.0;
    double feature_variance = 0.0;
};

Tensor encode(const EncoderState& enc, const Tensor& features);
Tensor reconstruct(const EncoderState& enc, const Tensor& features);
double reconstruction_mse(const EncoderState& enc, const Tensor& features);

struct EbllTerm {
    double loss = 0.0;
    Tensor d_features;  ///< gradient w.r.t. features_now only
};

/// alpha/2 * batch-mean ||E(features_now) - E(features_prev)||^2
EbllTerm ebll_loss(const EncoderState& enc, const Tensor& features_now, const Tensor& features_prev);

struct AutoencoderOptions {
    std::size_t code_dim = 0;  ///< 0 selects feature_dim / 4
    int epochs = 50;
    double lr = 1e-3;
    std::size_t batch_size = 32;
    double alpha = 1e-3;
    std::uint64_t seed = 0;
};

/// Trains with Adam on mean squared reconstruction error.
EncoderState train_autoencoder(const Tensor& features, const AutoencoderOptions& options);

// ---- model merging ---------------------------------------------------------

/// Final parameters (and Fisher, for mode merging) of each center, keyed by
/// 0-based center index. Revisits overwrite.
struct ImmArchive {
    std::map<std::size_t, ParameterSet> models;
    std::map<std::size_t, ImportanceMap> fishers;
};

/// Arithmetic mean of the archived models with center index <= upto_center.
ParameterSet imm_merge_mean(const ImmArchive& archive, std::size_t upto_center);

struct ModeMerge {
    ParameterSet merged;
    /// Per-center, per-parameter convex weights.
    std::map<std::size_t, ParameterSet> weights;
    /// "name[index]" of every scalar whose Fishers were all zero (uniform fallback).
    std::vector<std::string> uniform_fallback;
};

/// Fisher-proportional per-parameter merge, weights
/// (F_nu + delta) / sum (F + delta), renormalised to sum to one.
ModeMerge imm_merge_mode(const ImmArchive& archive, std::size_t upto_center, double damping = 1e-8);

} // namespace itl
