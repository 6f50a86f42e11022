#include "itl/strategy.hpp"

#include "itl/error.hpp"
#include "itl/random.hpp"

namespace itl {

namespace {

struct MethodEntry {
    Method method;
    const char* name;
};

constexpr MethodEntry kMethods[] = {
    {Method::Ft, "ft"},           {Method::Ewc, "ewc"},           {Method::Si, "si"},
    {Method::Mas, "mas"},         {Method::Lwf, "lwf"},           {Method::Ebll, "ebll"},
    {Method::ImmMean, "imm-mean"}, {Method::ImmMode, "imm-mode"}, {Method::InverseImportance, "inv-importance"},
};

bool is_imm(Method m) { return m == Method::ImmMean || m == Method::ImmMode; }
bool is_distill(Method m) { return m == Method::Lwf || m == Method::Ebll; }

} // namespace

std::string method_name(Method m) {
    for (const auto& e : kMethods)
        if (e.method == m) return e.name;
    return "?";
}

std::optional<Method> parse_method(const std::string& name) {
    for (const auto& e : kMethods)
        if (name == e.name) return e.method;
    return std::nullopt;
}

const std::vector<std::string>& method_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> v;
        for (const auto& e : kMethods) v.emplace_back(e.name);
        return v;
    }();
    return names;
}

Strategy::Strategy(MethodConfig config) : config_(std::move(config)) {
    if (config_.method == Method::InverseImportance) {
        const Method s = config_.inverse_source;
        if (s != Method::Ewc && s != Method::Si && s != Method::Mas) {
            throw ConfigError("inverse-importance source must be ewc, si or mas");
        }
    }
}

Method Strategy::importance_source() const {
    switch (config_.method) {
    case Method::Ewc:
    case Method::Si:
    case Method::Mas: return config_.method;
    case Method::InverseImportance: return config_.inverse_source;
    default: return Method::Ft;
    }
}

bool Strategy::tracks_path() const { return importance_source() == Method::Si; }

void Strategy::begin_visit(std::size_t visit, const ParameterSet& params) {
    const auto v = static_cast<std::int64_t>(visit);
    if (state_.artifacts_visit >= v) {
        throw Error("regularizer artifacts from visit " + std::to_string(state_.artifacts_visit) +
                    " cannot be consumed at visit " + std::to_string(v));
    }
    state_.current_visit = v;
    if (state_.artifacts_visit >= 0) {
        state_.anchor = params;
        if (is_distill(config_.method)) state_.teacher = TeacherSnapshot{params, config_.temperature};
    }
    if (tracks_path()) state_.si = SiAccumulator::begin(params);
}

BatchTerms Strategy::batch_terms(const ModelSpec& model, const ForwardTrace& trace, const Tensor& batch,
                                 std::optional<std::size_t> head) const {
    BatchTerms out;
    if (!is_distill(config_.method) || !state_.teacher) return out;
    const bool kd = config_.lambda != 0.0;
    const bool enc = config_.method == Method::Ebll && state_.encoder && !state_.encoder->degenerate &&
                     state_.encoder->alpha != 0.0;
    if (!kd && !enc) return out;

    const ForwardTrace teacher = forward_trace(model, state_.teacher->params, batch, head);
    out.active = true;
    out.d_logits = Tensor(trace.logits.shape);
    if (kd) {
        LogitLoss l = kd_loss(teacher.logits, trace.logits, state_.teacher->temperature);
        out.loss += config_.lambda * l.loss;
        for (std::size_t i = 0; i < l.d_logits.size(); ++i) out.d_logits[i] = config_.lambda * l.d_logits[i];
    }
    if (enc) {
        EbllTerm e = ebll_loss(*state_.encoder, trace.features, teacher.features);
        out.loss += e.loss;
        out.d_features = std::move(e.d_features);
        out.has_feature_grad = true;
    }
    return out;
}

PenaltyGradient Strategy::penalty_gradient(const ParameterSet& params) const {
    PenaltyGradient out;
    const Method m = config_.method;
    const bool importance = importance_source() != Method::Ft;
    if (!importance && !is_imm(m)) {
        out.grad = params.zeros_like();
        return out;
    }
    if (!state_.anchor) {
        out.grad = params.zeros_like();
        out.cold_start = true;
        return out;
    }
    if (is_imm(m)) {
        if (config_.imm_beta == 0.0) {
            out.grad = params.zeros_like();
            return out;
        }
        out.grad = l2_transfer_gradient(params, *state_.anchor, config_.imm_beta);
        out.active = true;
        return out;
    }
    if (config_.lambda == 0.0 || state_.omega.empty()) {
        out.grad = params.zeros_like();
        return out;
    }
    out.grad = m == Method::InverseImportance
                   ? inverse_importance_gradient(params, *state_.anchor, state_.omega, config_.lambda)
                   : importance_penalty_gradient(params, *state_.anchor, state_.omega, config_.lambda);
    out.active = true;
    return out;
}

double Strategy::penalty(const ParameterSet& params) const {
    const Method m = config_.method;
    if (!state_.anchor) return 0.0;
    if (is_imm(m)) return l2_transfer_penalty(params, *state_.anchor, config_.imm_beta);
    if (importance_source() == Method::Ft || state_.omega.empty()) return 0.0;
    return m == Method::InverseImportance
               ? inverse_importance_penalty(params, *state_.anchor, state_.omega, config_.lambda)
               : importance_penalty(params, *state_.anchor, state_.omega, config_.lambda);
}

void Strategy::after_step(const ParameterSet& g_task, const ParameterSet& before, const ParameterSet& after) {
    if (!tracks_path()) return;
    if (config_.si_sign == SiPathSign::AsPrinted) {
        si_track_step(state_.si, g_task, before, after);
    } else {
        ParameterSet neg = g_task;
        scale_in_place(neg, -1.0);
        si_track_step(state_.si, neg, before, after);
    }
}

void Strategy::end_visit(const ModelSpec& model, const ParameterSet& params, const CenterDataset& local,
                         std::optional<std::size_t> head, std::uint64_t seed) {
    const Split& train = local.train;
    std::optional<ImportanceMap> contribution;
    switch (importance_source()) {
    case Method::Ewc: contribution = ewc_fisher(model, params, train.inputs, train.labels, head); break;
    case Method::Mas:
        contribution = mas_importance(model, params, train.inputs, head, config_.mas_functional);
        break;
    case Method::Si: contribution = si_contribution(state_.si, params, config_.si_epsilon); break;
    default: break;
    }
    if (contribution) {
        if (state_.omega.empty()) state_.omega = params.zeros_like();
        axpy(state_.omega, 1.0, *contribution);
        clamp_nonnegative(state_.omega);
    }

    if (config_.method == Method::Ebll) {
        AutoencoderOptions opts = config_.autoencoder;
        opts.seed = derive_seed(seed, {0xeb11, static_cast<std::uint64_t>(state_.current_visit)});
        state_.encoder = train_autoencoder(extract_features(model, params, train.inputs), opts);
    }
    if (is_imm(config_.method)) {
        state_.archive.models[local.center] = params;
        if (config_.method == Method::ImmMode) {
            state_.archive.fishers[local.center] = ewc_fisher(model, params, train.inputs, train.labels, head);
        }
    }
    state_.artifacts_visit = state_.current_visit;
}

ParameterSet Strategy::evaluation_params(const ParameterSet& params, bool final_visit) const {
    if (!is_imm(config_.method) || state_.archive.models.empty()) return params;
    if (config_.imm_merge == ImmMergePolicy::FinalOnly && !final_visit) return params;
    const std::size_t upto = state_.archive.models.rbegin()->first;
    if (config_.method == Method::ImmMean) return imm_merge_mean(state_.archive, upto);
    return imm_merge_mode(state_.archive, upto, config_.fisher_damping).merged;
}

} // namespace itl
