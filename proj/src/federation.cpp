#include "itl/federation.hpp"

#include <cmath>

#include "itl/error.hpp"
#include "itl/random.hpp"

namespace itl {

std::vector<Visit> TransferSchedule::visits(std::size_t num_centers) const {
    if (num_centers == 0) throw ConfigError("schedule needs at least one center");
    std::vector<Visit> out;
    if (kind == Kind::Swt) {
        if (epochs_per_center <= 0) throw ConfigError("epochs_per_center must be positive");
        for (std::size_t c = 0; c < num_centers; ++c) out.push_back({c, c, 0, epochs_per_center});
        return out;
    }
    if (transfer_every <= 0) throw ConfigError("transfer_every must be positive");
    if (iterations <= 0) throw ConfigError("iterations must be positive");
    for (int it = 0; it < iterations; ++it)
        for (std::size_t c = 0; c < num_centers; ++c)
            out.push_back({out.size(), c, static_cast<std::size_t>(it), transfer_every});
    return out;
}

int TransferSchedule::total_epochs(std::size_t num_centers) const {
    int total = 0;
    for (const auto& v : visits(num_centers)) total += v.epochs;
    return total;
}

OverfitMonitor OverfitMonitor::start(const MonitorConfig& config, double entry_val_loss) {
    if (config.e_val <= 0 || config.e_stop <= 0) throw ConfigError("monitor thresholds must be positive");
    OverfitMonitor m;
    m.config = config;
    m.best_val_loss = entry_val_loss;
    return m;
}

MonitorAction OverfitMonitor::observe(double val_loss) {
    ++epochs_seen;
    improved_last = best_val_loss - val_loss >= config.min_improvement;
    if (improved_last) {
        best_val_loss = val_loss;
        best_epoch = epochs_seen;
        since_halving = 0;
        since_improvement = 0;
        return MonitorAction::Continue;
    }
    ++since_halving;
    ++since_improvement;
    if (!config.enabled) return MonitorAction::Continue;
    if (since_improvement >= config.e_stop) return MonitorAction::EarlyStop;
    if (since_halving >= config.e_val) {
        since_halving = 0;
        return MonitorAction::HalveLR;
    }
    return MonitorAction::Continue;
}

MonitorAction monitor_epoch(OverfitMonitor& monitor, double val_loss, OptimizerState& optimizer) {
    const MonitorAction a = monitor.observe(val_loss);
    if (a == MonitorAction::HalveLR) halve_learning_rate(optimizer);
    return a;
}

double TrainConfig::default_lr() const {
    if (lr > 0.0) return lr;
    return optimizer == OptimizerKind::Adam ? 1e-3 : 0.1;
}

OptimizerState TrainConfig::fresh_optimizer(const ParameterSet& params, double rate) const {
    OptimizerState s = make_optimizer(optimizer, rate, params);
    if (auto* a = std::get_if<AdamState>(&s.state)) {
        a->beta1 = adam_beta1;
        a->beta2 = adam_beta2;
        a->epsilon = adam_epsilon;
    } else {
        auto& g = std::get<SgdState>(s.state);
        g.decay_base = sgd_decay_base;
        g.decay_period_epochs = sgd_decay_period;
    }
    return s;
}

HandoffContext handoff(const ModelSpec& model, const ParameterSet& params, const OptimizerState& optimizer,
                       const Visit& visit, TransferPolicy policy, const OptimizerState& fresh) {
    HandoffContext ctx;
    ctx.params = params;
    if (policy == TransferPolicy::Reload) {
        if (const auto* adam = std::get_if<AdamState>(&optimizer.state)) {
            require_aligned(params, adam->m, "handoff: optimizer moments");
        }
        ctx.optimizer = optimizer;
    } else {
        ctx.optimizer = fresh;
    }
    if (model.multi_head()) {
        if (visit.center >= model.num_heads) {
            throw ConfigError("center " + std::to_string(visit.center + 1) + " has no head (" +
                              std::to_string(model.num_heads) + " heads)");
        }
        ctx.head = visit.center;
        for (std::size_t h = 0; h < model.num_heads; ++h)
            if (h != visit.center) ctx.frozen.push_back(head_prefix(model, h));
    }
    return ctx;
}

namespace {

Targets make_targets(const std::vector<int>& labels, std::size_t outputs, const LossKind& loss) {
    if (loss.type == LossKind::Type::CrossEntropy) return labels;
    Tensor mask({labels.size(), outputs}, 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto y = static_cast<std::size_t>(labels[i]);
        if (labels[i] < 0 || y >= outputs) throw DataError("label out of range for Dice target");
        mask[i * outputs + y] = 1.0;
    }
    return mask;
}

std::vector<std::size_t> iota_rows(std::size_t begin, std::size_t end) {
    std::vector<std::size_t> r;
    for (std::size_t i = begin; i < end; ++i) r.push_back(i);
    return r;
}

struct EpochContext {
    const ModelSpec& model;
    const TrainConfig& config;
    const CenterDataset& ds;
    std::optional<std::size_t> head;
    const std::vector<std::string>& frozen;
};

/// One pass over the local training split. Returns the number of steps taken.
std::size_t train_epoch(const EpochContext& c, ParameterSet& params, OptimizerState& opt, Strategy* strategy,
                        std::uint64_t stream, std::size_t visit, int epoch, std::size_t steps_before) {
    const Split& train = c.ds.train;
    if (train.size() == 0) throw DataError(c.ds.name + ": empty training split");
    const auto v = static_cast<std::uint64_t>(visit), e = static_cast<std::uint64_t>(epoch);
    std::vector<std::vector<std::size_t>> batches;
    if (c.config.balanced_sampling) {
        BalancedSampler sampler(train.labels, c.ds.num_classes, derive_seed(c.config.seed, {stream, 0xba1, v, e}));
        batches = sampler.epoch(train.size(), c.config.batch_size);
    } else {
        Rng rng = make_rng(c.config.seed, {stream, v, e});
        batches = epoch_batches(train.size(), c.config.batch_size, rng);
    }
    const std::size_t outputs = c.model.num_outputs();
    const bool tracking = strategy && strategy->tracks_path();
    std::size_t steps = steps_before;
    for (const auto& rows : batches) {
        const Split b = train.subset(rows);
        const ForwardTrace trace = forward_trace(c.model, params, b.inputs, c.head);
        const LogitLoss task = task_loss(trace.logits, make_targets(b.labels, outputs, c.config.loss), c.config.loss);
        if (!std::isfinite(task.loss)) throw NumericalError("non-finite task loss");

        ParameterSet g;
        ParameterSet g_task;
        BatchTerms terms;
        if (strategy) terms = strategy->batch_terms(c.model, trace, b.inputs, c.head);
        double loss = task.loss;
        if (terms.active) {
            Tensor d = task.d_logits;
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += terms.d_logits[i];
            g = backward(c.model, params, trace, d, terms.has_feature_grad ? &terms.d_features : nullptr);
            loss += terms.loss;
            if (tracking) g_task = backward(c.model, params, trace, task.d_logits);
        } else {
            g = backward(c.model, params, trace, task.d_logits);
            if (tracking) g_task = g;
        }
        if (strategy) {
            const PenaltyGradient pen = strategy->penalty_gradient(params);
            if (pen.active) g = inject_regularized_gradient(g, pen.grad);
        }
        ParameterSet before;
        if (tracking) before = params;
        optimizer_step(opt, params, g, c.frozen);
        if (tracking) strategy->after_step(g_task, before, params);
        ++steps;
        if (c.config.on_step) c.config.on_step({visit, epoch, steps, loss, &params, &opt});
    }
    advance_epoch(opt);
    return steps - steps_before;
}

} // namespace

double split_loss(const ModelSpec& model, const ParameterSet& params, const Split& split, const LossKind& loss,
                  std::optional<std::size_t> head, std::size_t batch_size) {
    if (split.size() == 0) throw DataError("loss over an empty split");
    const std::size_t outputs = model.num_outputs();
    if (loss.type == LossKind::Type::Dice) {
        // Dice pools over the batch, so the split is scored in one pass.
        const Tensor logits = forward(model, params, split.inputs, head);
        return task_loss(logits, make_targets(split.labels, outputs, loss), loss).loss;
    }
    double total = 0.0;
    for (std::size_t start = 0; start < split.size(); start += batch_size) {
        const std::size_t stop = std::min(split.size(), start + batch_size);
        const auto rows = iota_rows(start, stop);
        const Split b = split.subset(rows);
        const Tensor logits = forward(model, params, b.inputs, head);
        total += task_loss(logits, make_targets(b.labels, outputs, loss), loss).loss * static_cast<double>(stop - start);
    }
    return total / static_cast<double>(split.size());
}

double split_accuracy(const ModelSpec& model, const ParameterSet& params, const Split& split,
                      std::optional<std::size_t> head) {
    if (split.size() == 0) throw DataError("accuracy over an empty split");
    return accuracy_percent(forward(model, params, split.inputs, head), split.labels);
}

FederatedRun::FederatedRun(ModelSpec model, TrainConfig config, std::vector<CenterDataset> centers,
                           TransferSchedule schedule, std::optional<std::vector<CenterDataset>> eval_centers)
    : model_(std::move(model)),
      config_(std::move(config)),
      centers_(std::move(centers)),
      strategy_(config_.method) {
    model_.validate();
    if (centers_.empty()) throw DataError("no centers to train on");
    if (config_.batch_size == 0) throw ConfigError("batch size must be positive");
    eval_centers_ = eval_centers ? std::move(*eval_centers) : centers_;
    if (model_.multi_head()) {
        if (eval_centers) throw ConfigError("separate evaluation centers require a single head");
        if (model_.num_heads != centers_.size()) {
            throw ConfigError("multi-head model has " + std::to_string(model_.num_heads) + " heads for " +
                              std::to_string(centers_.size()) + " centers");
        }
    }
    const Shape expected = model_.input_shape;
    for (const auto* list : {&centers_, &eval_centers_}) {
        for (const auto& ds : *list) {
            if (ds.input_shape() != expected) {
                throw DataError(ds.name + ": input shape " + shape_to_string(ds.input_shape()) +
                                " does not match the model's " + shape_to_string(expected));
            }
            if (ds.num_classes != model_.num_outputs()) {
                throw DataError(ds.name + ": " + std::to_string(ds.num_classes) + " classes but the model has " +
                                std::to_string(model_.num_outputs()) + " outputs");
            }
        }
    }
    visits_ = schedule.visits(centers_.size());
    params_ = init_params(model_, config_.seed);
    fresh_lr_ = config_.default_lr();
    optimizer_ = config_.fresh_optimizer(params_, fresh_lr_);
    accuracy_ = AccuracyMatrix(eval_centers_.size(), visits_.size());
    visited_.assign(centers_.size(), false);
    last_.seed = config_.seed;
    last_.config_hash = config_.config_hash;
    last_.method = method_name(config_.method.method);
}

FederatedRun FederatedRun::resume(ModelSpec model, TrainConfig config, std::vector<CenterDataset> centers,
                                  TransferSchedule schedule, const Checkpoint& ck) {
    FederatedRun run(std::move(model), std::move(config), std::move(centers), schedule);
    if (ck.provenance.config_hash != run.config_.config_hash) {
        throw ConfigError("checkpoint config hash '" + ck.provenance.config_hash + "' does not match '" +
                          run.config_.config_hash + "'");
    }
    if (ck.provenance.method != method_name(run.config_.method.method)) {
        throw ConfigError("checkpoint was written by method " + ck.provenance.method);
    }
    if (ck.provenance.seed != run.config_.seed) throw ConfigError("checkpoint seed does not match the run seed");
    require_aligned(run.params_, ck.params, "checkpoint parameters");
    if (ck.accuracy.centers() != run.accuracy_.centers() || ck.accuracy.visits() != run.accuracy_.visits() ||
        ck.visited.size() != run.visited_.size() || ck.next_visit > run.visits_.size()) {
        throw ConfigError("checkpoint does not match the schedule");
    }
    run.params_ = ck.params;
    run.optimizer_ = ck.optimizer;
    run.strategy_.state() = ck.regularizer;
    run.accuracy_ = ck.accuracy;
    run.visited_ = ck.visited;
    run.next_visit_ = ck.next_visit;
    run.steps_ = ck.steps;
    run.fresh_lr_ = ck.fresh_lr;
    run.last_ = ck.provenance;
    return run;
}

double FederatedRun::pick_learning_rate(const CenterDataset& ds, std::optional<std::size_t> head) {
    if (config_.lr_grid.empty()) throw ConfigError("empty learning-rate grid");
    std::vector<std::string> frozen;
    if (model_.multi_head())
        for (std::size_t h = 0; h < model_.num_heads; ++h)
            if (!head || h != *head) frozen.push_back(head_prefix(model_, h));
    const EpochContext ctx{model_, config_, ds, head, frozen};
    double best_lr = 0.0, best_loss = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < config_.lr_grid.size(); ++i) {
        const double lr = config_.lr_grid[i];
        ParameterSet p = params_;
        OptimizerState opt = config_.fresh_optimizer(p, lr);
        try {
            for (int e = 0; e < config_.lr_grid_epochs; ++e) train_epoch(ctx, p, opt, nullptr, 0x16f5 + i, 0, e, 0);
        } catch (const NumericalError&) {
            continue;
        }
        const double loss = split_loss(model_, p, ds.val, config_.loss, head);
        if (loss < best_loss) {
            best_loss = loss;
            best_lr = lr;
        }
    }
    if (best_lr == 0.0) throw NumericalError("every learning-rate candidate diverged");
    return best_lr;
}

void FederatedRun::evaluate(std::size_t column, const ParameterSet& params) {
    for (std::size_t k = 0; k < eval_centers_.size(); ++k) {
        if (model_.multi_head() && !visited_[k]) continue;
        const auto head = model_.multi_head() ? std::optional<std::size_t>(k) : std::nullopt;
        accuracy_.set(k, column, split_accuracy(model_, params, eval_centers_[k].test, head));
    }
}

void FederatedRun::step_visit() {
    if (done()) throw Error("run already finished");
    const Visit& visit = visits_[next_visit_];
    const CenterDataset& ds = centers_[visit.center];
    last_.visit = visit.index;
    last_.center = visit.center;
    last_.source_center = ds.source_center;
    last_.epoch = 0;

    const std::optional<std::size_t> head =
        model_.multi_head() ? std::optional<std::size_t>(visit.center) : std::nullopt;
    // The searched rate is kept for every later fresh optimizer.
    if (visit.index == 0) fresh_lr_ = config_.lr_grid_search ? pick_learning_rate(ds, head) : config_.default_lr();
    const TransferPolicy policy = visit.index == 0 ? TransferPolicy::Reset : config_.policy;
    HandoffContext ctx =
        handoff(model_, params_, optimizer_, visit, policy, config_.fresh_optimizer(params_, fresh_lr_));

    strategy_.begin_visit(visit.index, ctx.params);
    ParameterSet params = std::move(ctx.params);
    OptimizerState opt = std::move(ctx.optimizer);

    OverfitMonitor monitor = OverfitMonitor::start(config_.monitor, split_loss(model_, params, ds.val, config_.loss, ctx.head));
    ParameterSet best = params;
    SiAccumulator best_si = strategy_.state().si;

    const EpochContext ectx{model_, config_, ds, ctx.head, ctx.frozen};
    for (int e = 0; e < visit.epochs; ++e) {
        last_.epoch = e + 1;
        steps_ += train_epoch(ectx, params, opt, &strategy_, 0x7a1, visit.index, e, steps_);
        const double val = split_loss(model_, params, ds.val, config_.loss, ctx.head);
        if (!std::isfinite(val)) throw NumericalError("non-finite validation loss");
        const MonitorAction action = monitor_epoch(monitor, val, opt);
        if (monitor.improved_last) {
            best = params;
            best_si = strategy_.state().si;
        }
        if (action == MonitorAction::EarlyStop) break;
    }

    // The best-validation model is what gets shared; the optimizer continues from its latest state.
    params_ = std::move(best);
    optimizer_ = std::move(opt);
    strategy_.state().si = std::move(best_si);
    visited_[visit.center] = true;
    strategy_.end_visit(model_, params_, ds, ctx.head, config_.seed);
    const bool final_visit = next_visit_ + 1 == visits_.size();
    evaluate(visit.index, strategy_.evaluation_params(params_, final_visit));
    ++next_visit_;
}

RunResult FederatedRun::run(const std::function<void(const FederatedRun&)>& after_visit) {
    RunResult r;
    try {
        while (!done()) {
            step_visit();
            if (after_visit) after_visit(*this);
        }
    } catch (const Error& e) {
        r.failed = true;
        r.failure = std::string(e.what()) + " (visit " + std::to_string(last_.visit + 1) + ", center " +
                    std::to_string(last_.center + 1) + ", epoch " + std::to_string(last_.epoch) + ")";
    }
    r.accuracy = accuracy_;
    r.final_params = params_;
    r.visits = visits_;
    r.steps = steps_;
    r.provenance = last_;
    return r;
}

Checkpoint FederatedRun::checkpoint() const {
    Checkpoint ck;
    ck.provenance = last_;
    ck.params = params_;
    ck.optimizer = optimizer_;
    ck.regularizer = strategy_.state();
    ck.accuracy = accuracy_;
    ck.visited = visited_;
    ck.next_visit = next_visit_;
    ck.steps = steps_;
    ck.fresh_lr = fresh_lr_;
    return ck;
}

RunResult run_swt(const ModelSpec& model, const TrainConfig& config, const std::vector<CenterDataset>& centers,
                  int epochs_per_center) {
    return FederatedRun(model, config, centers, TransferSchedule::swt(epochs_per_center)).run();
}

RunResult run_cwt(const ModelSpec& model, const TrainConfig& config, const std::vector<CenterDataset>& centers,
                  int transfer_every, int iterations) {
    return FederatedRun(model, config, centers, TransferSchedule::cwt(transfer_every, iterations)).run();
}

} // namespace itl
