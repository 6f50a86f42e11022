#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "itl/data.hpp"
#include "itl/federation.hpp"
#include "itl/metrics.hpp"
#include "itl/strategy.hpp"

namespace itl {

struct NoiseSpec {
    std::size_t center = 1;  ///< 1-based, before reordering
    double sigma = 25.0;
    bool clip = false;  ///< clamp noisy values to the nominal range
};

struct Scenario {
    std::string name = "iid";
    std::vector<NoiseSpec> noise;
    /// 1-based permutation; empty keeps the natural order.
    std::vector<std::size_t> order;
};

/// Joint baseline budget: a fixed number of pooled epochs, or as many pooled
/// epochs as one full schedule trains in total.
enum class JointBudget { FixedEpochs, ScheduleEpochs };

enum class BaselineKind { Joint, IndependentTraining };

struct ExperimentConfig {
    // task
    std::optional<std::filesystem::path> manifest;
    ExternalFormat manifest_format = ExternalFormat::CsvLabels;
    SyntheticTaskSpec task;
    /// Redraw the synthetic data for every repeat.
    bool vary_data_with_seed = true;

    // model
    std::vector<std::size_t> hidden{32, 32};
    HeadSetting head = HeadSetting::Single;

    // schedule and training
    TransferSchedule schedule = TransferSchedule::cwt(10, 5);
    TrainConfig train;
    std::vector<MethodConfig> methods{MethodConfig{}};

    // grid
    std::size_t repeats = 10;
    std::uint64_t seed_base = 0;
    std::vector<Scenario> scenarios{Scenario{}};

    // baselines
    bool joint = true;
    bool independent = true;
    JointBudget joint_budget = JointBudget::ScheduleEpochs;
    int joint_epochs = 50;

    double significance_alpha = 0.05;

    /// Hex digest of the canonical resolved form.
    std::string hash() const;
};

/// Canonical JSON form with every default filled in.
nlohmann::json config_to_json(const ExperimentConfig& config);

struct ConfigParse {
    std::optional<ExperimentConfig> config;
    std::vector<std::string> errors;
};

/// Validates every field and collects all violations. Relative manifest
/// paths resolve against `base_dir`.
ConfigParse parse_config_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ConfigParse parse_config_text(const std::string& text, const std::filesystem::path& base_dir = {});
/// Throws ConfigError listing every violation.
ExperimentConfig parse_config(const std::filesystem::path& path);

// ---- runs --------------------------------------------------------------------

/// Centers for one repeat of one scenario (noise, then reordering).
std::vector<CenterDataset> build_centers(const ExperimentConfig& config, const Scenario& scenario,
                                         std::uint64_t seed);
ModelSpec build_model(const ExperimentConfig& config, const std::vector<CenterDataset>& centers,
                      std::optional<HeadSetting> head = std::nullopt);
TrainConfig build_train_config(const ExperimentConfig& config, const MethodConfig& method, std::uint64_t seed);

/// With `checkpoint`, the run resumes from that file when it exists and
/// rewrites it after every visit.
RunResult run_method(const ExperimentConfig& config, const std::vector<CenterDataset>& centers,
                     const MethodConfig& method, std::uint64_t seed,
                     const std::optional<std::filesystem::path>& checkpoint = std::nullopt);

struct BaselineResult {
    /// Mean test accuracy over all centers (IT: mean over the N models).
    double global = 0.0;
    /// IT only: each model on its own center's test split.
    std::vector<double> local;
    double local_mean = 0.0;
    /// Per-model accuracy on every center: [model][center].
    std::vector<std::vector<double>> per_center;
    std::size_t models = 0;
    bool failed = false;
    std::string failure;
};

BaselineResult run_baseline(BaselineKind kind, const ExperimentConfig& config,
                            const std::vector<CenterDataset>& centers, std::uint64_t seed);

int joint_epoch_budget(const ExperimentConfig& config, std::size_t num_centers);

struct GridOptions {
    std::size_t jobs = 1;
    bool run_methods = true;
    bool run_joint = true;
    bool run_independent = true;
    std::optional<std::filesystem::path> checkpoint_dir;
    std::function<void(const std::string&)> progress;
};

/// Runs methods x seeds x scenarios plus baselines. Output is ordered by grid
/// key. Summary rows "joint", "it-global" and "it-local" carry the baselines.
ResultSet run_experiment(const ExperimentConfig& config, const GridOptions& options = {});

} // namespace itl
