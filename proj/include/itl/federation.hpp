#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "itl/data.hpp"
#include "itl/loss.hpp"
#include "itl/metrics.hpp"
#include "itl/nn.hpp"
#include "itl/optim.hpp"
#include "itl/strategy.hpp"

namespace itl {

/// Reload (ROp) carries the optimizer across hand-offs; Reset (NOp) starts fresh.
enum class TransferPolicy { Reload, Reset };

struct Visit {
    std::size_t index = 0;      ///< position in the schedule
    std::size_t center = 0;     ///< 0-based training position of the center
    std::size_t iteration = 0;  ///< ring pass (always 0 for SWT)
    int epochs = 0;
};

struct TransferSchedule {
    enum class Kind { Swt, Cwt };
    Kind kind = Kind::Swt;
    int epochs_per_center = 50;  ///< SWT
    int transfer_every = 10;     ///< CWT epochs per visit
    int iterations = 5;          ///< CWT ring passes

    static TransferSchedule swt(int epochs) { return {Kind::Swt, epochs, 10, 1}; }
    static TransferSchedule cwt(int transfer_every, int iterations) {
        return {Kind::Cwt, 50, transfer_every, iterations};
    }

    /// Both kinds expand to the same visit list representation.
    std::vector<Visit> visits(std::size_t num_centers) const;
    int total_epochs(std::size_t num_centers) const;
};

struct MonitorConfig {
    int e_val = 5;
    int e_stop = 20;
    double min_improvement = 1e-6;
    bool enabled = true;
};

enum class MonitorAction { Continue, HalveLR, EarlyStop };

/// Per-visit overfitting monitor. The baseline is the validation loss of the
/// model as handed over, so a visit that never improves shares that model.
struct OverfitMonitor {
    MonitorConfig config;
    double best_val_loss = std::numeric_limits<double>::infinity();
    int best_epoch = 0;  ///< 0 = entry state, k = after epoch k
    int epochs_seen = 0;
    int since_halving = 0;
    int since_improvement = 0;
    bool improved_last = false;

    static OverfitMonitor start(const MonitorConfig& config, double entry_val_loss);
    /// Records one epoch; halving and early-stop decisions are returned, not applied.
    MonitorAction observe(double val_loss);
};

/// observe() plus applying a halving to the optimizer.
MonitorAction monitor_epoch(OverfitMonitor& monitor, double val_loss, OptimizerState& optimizer);

struct StepInfo {
    std::size_t visit = 0;
    int epoch = 0;
    std::size_t step = 0;  ///< global optimizer step count after this step
    double loss = 0.0;
    const ParameterSet* params = nullptr;
    const OptimizerState* optimizer = nullptr;
};

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::Adam;
    double lr = 0.0;  ///< 0 picks the kind's default (Adam 1e-3, SGD 0.1)
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    double sgd_decay_base = 0.8;
    double sgd_decay_period = 5.0;
    TransferPolicy policy = TransferPolicy::Reload;
    bool lr_grid_search = false;
    std::vector<double> lr_grid{0.1, 0.01, 0.001, 0.0001};
    int lr_grid_epochs = 2;
    std::size_t batch_size = 100;
    bool balanced_sampling = false;
    MonitorConfig monitor;
    LossKind loss;
    MethodConfig method;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::function<void(const StepInfo&)> on_step;

    double default_lr() const;
    OptimizerState fresh_optimizer(const ParameterSet& params, double lr) const;
};

struct Provenance {
    std::size_t visit = 0;
    std::size_t center = 0;
    std::size_t source_center = 0;
    int epoch = 0;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::string method;
};

/// Everything needed to continue a run after a completed visit.
struct Checkpoint {
    static constexpr std::uint32_t kFormatVersion = 1;
    std::uint32_t format_version = kFormatVersion;
    Provenance provenance;
    ParameterSet params;
    OptimizerState optimizer;
    RegularizerState regularizer;
    AccuracyMatrix accuracy;
    std::vector<bool> visited;
    std::size_t next_visit = 0;
    std::size_t steps = 0;
    /// Rate for optimizers created at NOp hand-offs (the search result, if any).
    double fresh_lr = 0.0;
};

struct RunResult {
    AccuracyMatrix accuracy;
    ParameterSet final_params;
    std::vector<Visit> visits;
    std::size_t steps = 0;
    bool failed = false;
    std::string failure;
    Provenance provenance;  ///< where the run stopped
};

/// Training context produced at a hand-off.
struct HandoffContext {
    ParameterSet params;
    OptimizerState optimizer;
    std::optional<std::size_t> head;
    std::vector<std::string> frozen;
};

/// Builds the context for training at `visit`: ROp keeps `optimizer`
/// verbatim, NOp takes `fresh`. Parameters pass through unchanged.
HandoffContext handoff(const ModelSpec& model, const ParameterSet& params, const OptimizerState& optimizer,
                       const Visit& visit, TransferPolicy policy, const OptimizerState& fresh);

/// Sequential training over a schedule with visit-granular checkpoints.
class FederatedRun {
public:
    /// `eval_centers` defaults to `centers`; the baselines evaluate a model trained
    /// on other data against the real centers.
    FederatedRun(ModelSpec model, TrainConfig config, std::vector<CenterDataset> centers, TransferSchedule schedule,
                 std::optional<std::vector<CenterDataset>> eval_centers = std::nullopt);

    static FederatedRun resume(ModelSpec model, TrainConfig config, std::vector<CenterDataset> centers,
                               TransferSchedule schedule, const Checkpoint& checkpoint);

    bool done() const { return next_visit_ >= visits_.size(); }
    /// Trains and evaluates the next scheduled visit. Throws on failure.
    void step_visit();
    /// Runs the remaining visits; failures are captured in the result.
    /// `after_visit` sees the run after every completed visit (checkpointing).
    RunResult run(const std::function<void(const FederatedRun&)>& after_visit = {});

    Checkpoint checkpoint() const;
    const ParameterSet& params() const { return params_; }
    const OptimizerState& optimizer() const { return optimizer_; }
    const Strategy& strategy() const { return strategy_; }
    const AccuracyMatrix& accuracy() const { return accuracy_; }
    const std::vector<Visit>& visits() const { return visits_; }

private:
    ModelSpec model_;
    TrainConfig config_;
    std::vector<CenterDataset> centers_;
    std::vector<CenterDataset> eval_centers_;
    std::vector<Visit> visits_;
    Strategy strategy_;
    ParameterSet params_;
    OptimizerState optimizer_;
    AccuracyMatrix accuracy_;
    std::vector<bool> visited_;
    std::size_t next_visit_ = 0;
    std::size_t steps_ = 0;
    double fresh_lr_ = 0.0;
    Provenance last_;

    double pick_learning_rate(const CenterDataset& ds, std::optional<std::size_t> head);
    void evaluate(std::size_t column, const ParameterSet& params);
};

RunResult run_swt(const ModelSpec& model, const TrainConfig& config, const std::vector<CenterDataset>& centers,
                  int epochs_per_center);
RunResult run_cwt(const ModelSpec& model, const TrainConfig& config, const std::vector<CenterDataset>& centers,
                  int transfer_every, int iterations);

/// Mean task loss of `params` over a split, in batches.
double split_loss(const ModelSpec& model, const ParameterSet& params, const Split& split, const LossKind& loss,
                  std::optional<std::size_t> head, std::size_t batch_size = 256);
double split_accuracy(const ModelSpec& model, const ParameterSet& params, const Split& split,
                      std::optional<std::size_t> head);

// ---- checkpoint codec ------------------------------------------------------

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace itl
