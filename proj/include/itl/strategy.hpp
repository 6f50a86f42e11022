#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "itl/data.hpp"
#include "itl/nn.hpp"
#include "itl/regularizers.hpp"

namespace itl {

enum class Method { Ft, Ewc, Si, Mas, Lwf, Ebll, ImmMean, ImmMode, InverseImportance };

std::string method_name(Method m);
std::optional<Method> parse_method(const std::string& name);
const std::vector<std::string>& method_names();

enum class ImmMergePolicy { EveryVisit, FinalOnly };

/// Sign applied to the SI path integral. AsPrinted accumulates +g * dtheta.
enum class SiPathSign { AsPrinted, Negated };

struct MethodConfig {
    Method method = Method::Ft;
    double lambda = 1.0;
    double temperature = 2.0;
    double imm_beta = 0.01;
    ImmMergePolicy imm_merge = ImmMergePolicy::EveryVisit;
    double si_epsilon = 1e-3;
    SiPathSign si_sign = SiPathSign::AsPrinted;
    MasFunctional mas_functional = MasFunctional::SquaredL2;
    /// Importance estimator behind the inverse-importance penalty: Ewc, Si or Mas.
    Method inverse_source = Method::Si;
    double fisher_damping = 1e-8;
    AutoencoderOptions autoencoder;
};

/// Everything a method carries from one visit to the next.
struct RegularizerState {
    /// Visit that produced omega / teacher / encoder / anchor (-1: none yet).
    std::int64_t artifacts_visit = -1;
    std::int64_t current_visit = -1;
    std::optional<ParameterSet> anchor;
    ImportanceMap omega;
    SiAccumulator si;
    std::optional<TeacherSnapshot> teacher;
    std::optional<EncoderState> encoder;
    ImmArchive archive;
};

struct PenaltyGradient {
    ParameterSet grad;
    bool active = false;      ///< false: nothing to inject, the step is plain FT
    bool cold_start = false;  ///< no previous-visit artifacts yet
};

/// Loss-level terms added on top of the task loss for one batch.
struct BatchTerms {
    double loss = 0.0;
    Tensor d_logits;
    Tensor d_features;
    bool active = false;
    bool has_feature_grad = false;
};

/// One continual-learning method bound to its running state.
class Strategy {
public:
    explicit Strategy(MethodConfig config);

    const MethodConfig& config() const { return config_; }
    RegularizerState& state() { return state_; }
    const RegularizerState& state() const { return state_; }

    /// Consumes artifacts of earlier visits; `params` is the model handed over.
    void begin_visit(std::size_t visit, const ParameterSet& params);

    /// Distillation and encoder terms for a batch whose forward trace is given.
    BatchTerms batch_terms(const ModelSpec& model, const ForwardTrace& trace, const Tensor& batch,
                           std::optional<std::size_t> head) const;

    /// Derivative of the parameter-space penalty at `params`.
    PenaltyGradient penalty_gradient(const ParameterSet& params) const;
    /// Scalar value of the same penalty.
    double penalty(const ParameterSet& params) const;

    bool tracks_path() const;
    /// Called after every optimizer step with the task-loss gradient.
    void after_step(const ParameterSet& g_task, const ParameterSet& before, const ParameterSet& after);

    /// Produces the artifacts consumed by later visits. `params` is the model
    /// being shared, `local` the visited center's data.
    void end_visit(const ModelSpec& model, const ParameterSet& params, const CenterDataset& local,
                   std::optional<std::size_t> head, std::uint64_t seed);

    /// Model used for evaluation after the current visit (IMM merges).
    ParameterSet evaluation_params(const ParameterSet& params, bool final_visit) const;

private:
    MethodConfig config_;
    RegularizerState state_;

    Method importance_source() const;
};

} // namespace itl
