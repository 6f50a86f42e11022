#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "itl/loss.hpp"
#include "itl/tensor.hpp"

namespace itl {

enum class LayerKind { Dense, Conv2D, MaxPool2D, ReLU, Flatten };

/// One layer of a feed-forward stack. Dense uses (in, out) as feature
/// counts, Conv2D as channel counts with a square `kernel` (stride 1, no
/// padding); MaxPool2D pools non-overlapping `kernel` x `kernel` windows.
struct LayerSpec {
    LayerKind kind = LayerKind::ReLU;
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t kernel = 0;
    std::uint64_t init_seed = 0;

    static LayerSpec dense(std::size_t in, std::size_t out, std::uint64_t seed = 0) {
        return {LayerKind::Dense, in, out, 0, seed};
    }
    static LayerSpec conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t k, std::uint64_t seed = 0) {
        return {LayerKind::Conv2D, in_ch, out_ch, k, seed};
    }
    static LayerSpec max_pool2d(std::size_t k) { return {LayerKind::MaxPool2D, 0, 0, k, 0}; }
    static LayerSpec relu() { return {LayerKind::ReLU}; }
    static LayerSpec flatten() { return {LayerKind::Flatten}; }

    bool has_params() const { return kind == LayerKind::Dense || kind == LayerKind::Conv2D; }
};

enum class HeadSetting { Single, Multi };

/// Feature extractor followed by one classifier head (SingleHead) or one
/// identically-shaped head per center (MultiHead).
struct ModelSpec {
    Shape input_shape;
    std::vector<LayerSpec> feature_layers;
    std::vector<LayerSpec> head_layers;
    HeadSetting head_setting = HeadSetting::Single;
    std::size_t num_heads = 1;

    /// Dense MLP: hidden layers (each Dense+ReLU) form the feature extractor,
    /// a single Dense layer forms the head.
    static ModelSpec mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t outputs,
                         HeadSetting setting = HeadSetting::Single, std::size_t heads = 1);

    bool multi_head() const { return head_setting == HeadSetting::Multi; }
    /// Per-sample shape at the feature/head boundary.
    Shape feature_shape() const;
    std::size_t num_outputs() const;
    /// Throws ConfigError if layer dimensions do not compose.
    void validate() const;
};

std::string feature_param_name(std::size_t layer, const std::string& field);
/// Parameter-name prefix of head `head` ("head." under SingleHead).
std::string head_prefix(const ModelSpec& model, std::size_t head);

/// Glorot-uniform weights, zero biases. Deterministic in (model, seed).
ParameterSet init_params(const ModelSpec& model, std::uint64_t seed);

/// Activations recorded by a forward pass, consumed by backward().
struct ForwardTrace {
    std::vector<Tensor> feature_inputs;  // input of each feature layer
    Tensor features;                     // output of the feature extractor
    std::vector<Tensor> head_inputs;     // input of each head layer
    Tensor logits;
    std::vector<std::vector<std::size_t>> pool_argmax;  // one per layer (empty if not pooling)
    std::size_t head = 0;
};

ForwardTrace forward_trace(const ModelSpec& model, const ParameterSet& params, const Tensor& batch,
                           std::optional<std::size_t> head_index = std::nullopt);

Tensor forward(const ModelSpec& model, const ParameterSet& params, const Tensor& batch,
               std::optional<std::size_t> head_index = std::nullopt);

/// Output of the feature extractor only.
Tensor extract_features(const ModelSpec& model, const ParameterSet& params, const Tensor& batch);

/// Reverse pass. `d_features` (optional) is added to the gradient arriving at
/// the feature/head boundary. Returned gradient is aligned with `params`;
/// heads not used by the trace receive exact zeros.
ParameterSet backward(const ModelSpec& model, const ParameterSet& params, const ForwardTrace& trace,
                      const Tensor& d_logits, const Tensor* d_features = nullptr);

struct LossAndGrad {
    double loss = 0.0;
    ParameterSet grad;
};

LossAndGrad loss_and_grad(const ModelSpec& model, const ParameterSet& params, const Tensor& batch,
                          const Targets& targets, const LossKind& loss,
                          std::optional<std::size_t> head_index = std::nullopt);

/// Disjoint (feature, head) partition of the parameters.
std::pair<ParameterSet, ParameterSet> split_params(const ModelSpec& model, const ParameterSet& params);

/// Re-initialises head `head` from `new_seed`; feature parameters and other
/// heads are copied bit-exactly. MultiHead only.
ParameterSet replace_head(const ModelSpec& model, const ParameterSet& params, std::size_t head,
                          std::uint64_t new_seed);

} // namespace itl
