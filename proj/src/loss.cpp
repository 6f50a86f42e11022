#include "itl/loss.hpp"

#include <algorithm>
#include <cmath>

#include "itl/error.hpp"

namespace itl {

namespace {

void require_batch(const Tensor& logits) {
    if (logits.rank() != 2 || logits.rows() == 0) {
        throw DataError("loss expects non-empty [batch, outputs] logits, got " + shape_to_string(logits.shape));
    }
}

} // namespace

Tensor softmax(const Tensor& logits, double temperature) {
    require_batch(logits);
    Tensor out(logits.shape);
    const std::size_t c = logits.row_size();
    for (std::size_t b = 0; b < logits.rows(); ++b) {
        auto z = logits.row(b);
        auto p = out.row(b);
        double mx = *std::max_element(z.begin(), z.end()) / temperature;
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            p[j] = std::exp(z[j] / temperature - mx);
            sum += p[j];
        }
        for (std::size_t j = 0; j < c; ++j) p[j] /= sum;
    }
    return out;
}

LogitLoss cross_entropy(const Tensor& logits, std::span<const int> labels) {
    require_batch(logits);
    const std::size_t batch = logits.rows();
    const std::size_t classes = logits.row_size();
    if (labels.size() != batch) {
        throw DataError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                        std::to_string(batch));
    }
    LogitLoss out{0.0, Tensor(logits.shape)};
    const double inv_batch = 1.0 / static_cast<double>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        const int y = labels[b];
        if (y < 0 || static_cast<std::size_t>(y) >= classes) {
            throw DataError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(classes) +
                            ")");
        }
        auto z = logits.row(b);
        auto g = out.d_logits.row(b);
        double mx = *std::max_element(z.begin(), z.end());
        double sum = 0.0;
        for (std::size_t j = 0; j < classes; ++j) {
            g[j] = std::exp(z[j] - mx);
            sum += g[j];
        }
        const double lse = mx + std::log(sum);
        out.loss += lse - z[static_cast<std::size_t>(y)];
        for (std::size_t j = 0; j < classes; ++j) g[j] = g[j] / sum * inv_batch;
        g[static_cast<std::size_t>(y)] -= inv_batch;
    }
    out.loss *= inv_batch;
    return out;
}

double dice_from_probabilities(std::span<const double> probs, std::span<const double> mask, double smoothing) {
    if (probs.size() != mask.size()) throw AlignmentError("dice: prediction and mask sizes differ");
    double inter = 0.0, total = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        inter += probs[i] * mask[i];
        total += probs[i] + mask[i];
    }
    return 1.0 - (2.0 * inter + smoothing) / (total + smoothing);
}

LogitLoss dice(const Tensor& logits, const Tensor& mask, double smoothing) {
    require_batch(logits);
    if (!(smoothing > 0.0)) throw ConfigError("dice: smoothing must be > 0");
    if (mask.shape != logits.shape) {
        throw DataError("dice: mask shape " + shape_to_string(mask.shape) + " differs from logits " +
                        shape_to_string(logits.shape));
    }
    for (double m : mask.data) {
        if (m != 0.0 && m != 1.0) throw DataError("dice: mask entries must be 0 or 1");
    }
    const std::size_t n = logits.size();
    std::vector<double> p(n);
    double inter = 0.0, total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        p[i] = 1.0 / (1.0 + std::exp(-logits[i]));
        inter += p[i] * mask[i];
        total += p[i] + mask[i];
    }
    const double num = 2.0 * inter + smoothing;
    const double den = total + smoothing;
    LogitLoss out{1.0 - num / den, Tensor(logits.shape)};
    for (std::size_t i = 0; i < n; ++i) {
        // d(1 - num/den)/dp = -(2 y den - num) / den^2
        const double dp = -(2.0 * mask[i] * den - num) / (den * den);
        out.d_logits[i] = dp * p[i] * (1.0 - p[i]);
    }
    return out;
}

LogitLoss task_loss(const Tensor& logits, const Targets& targets, const LossKind& kind) {
    switch (kind.type) {
    case LossKind::Type::CrossEntropy:
        if (!std::holds_alternative<std::vector<int>>(targets)) {
            throw DataError("cross-entropy loss requires class-index labels");
        }
        return cross_entropy(logits, std::get<std::vector<int>>(targets));
    case LossKind::Type::Dice:
        if (!std::holds_alternative<Tensor>(targets)) throw DataError("dice loss requires a binary mask");
        return dice(logits, std::get<Tensor>(targets), kind.smoothing);
    }
    throw ConfigError("unknown loss kind");
}

double accuracy_percent(const Tensor& logits, std::span<const int> labels) {
    require_batch(logits);
    if (labels.size() != logits.rows()) throw DataError("accuracy: label count does not match batch");
    std::size_t correct = 0;
    for (std::size_t b = 0; b < logits.rows(); ++b) {
        auto z = logits.row(b);
        auto best = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
        if (best == labels[b]) ++correct;
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size());
}

} // namespace itl
