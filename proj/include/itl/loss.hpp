#pragma once

#include <span>
#include <variant>
#include <vector>

#include "itl/tensor.hpp"

namespace itl {

struct LossKind {
    enum class Type { CrossEntropy, Dice };
    Type type = Type::CrossEntropy;
    /// Dice smoothing term, must be > 0.
    double smoothing = 1.0;

    static LossKind cross_entropy() { return {}; }
    static LossKind dice(double smoothing) { return {Type::Dice, smoothing}; }
};

/// Class indices for cross-entropy, binary mask (same shape as the logits) for Dice.
using Targets = std::variant<std::vector<int>, Tensor>;

/// Batch-mean loss and its gradient w.r.t. the logits.
struct LogitLoss {
    double loss = 0.0;
    Tensor d_logits;
};

/// Softmax cross-entropy with log-sum-exp; logits [B, C].
LogitLoss cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Soft Dice loss on sigmoid(logits) pooled over the batch.
LogitLoss dice(const Tensor& logits, const Tensor& mask, double smoothing);

/// 1 - (2|P.Y| + s) / (|P| + |Y| + s) for probabilities already in [0, 1].
double dice_from_probabilities(std::span<const double> probs, std::span<const double> mask, double smoothing);

LogitLoss task_loss(const Tensor& logits, const Targets& targets, const LossKind& kind);

/// Row-wise softmax of logits / temperature.
Tensor softmax(const Tensor& logits, double temperature = 1.0);

/// Fraction (in percent) of rows whose argmax equals the label.
double accuracy_percent(const Tensor& logits, std::span<const int> labels);

} // namespace itl
