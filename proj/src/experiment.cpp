#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <thread>

#include "itl/error.hpp"
#include "itl/experiment.hpp"

namespace itl {

namespace {

constexpr std::uint64_t kDataStream = 0xda7a;
constexpr std::uint64_t kNoiseStream = 0x9015e;

std::string scenario_label(const Scenario& s) { return s.name; }

} // namespace

std::vector<CenterDataset> build_centers(const ExperimentConfig& config, const Scenario& scenario,
                                         std::uint64_t seed) {
    std::vector<CenterDataset> centers;
    if (config.manifest) {
        centers = load_external(*config.manifest, config.manifest_format);
    } else {
        SyntheticTaskSpec spec = config.task;
        if (config.vary_data_with_seed) spec.seed = derive_seed(config.task.seed, {kDataStream, seed});
        centers = make_synthetic_task(spec);
    }
    const std::size_t n = centers.size();
    for (const auto& ns : scenario.noise) {
        if (ns.center < 1 || ns.center > n) {
            throw ConfigError("scenario " + scenario.name + ": noise center " + std::to_string(ns.center) +
                              " outside 1.." + std::to_string(n));
        }
        centers[ns.center - 1] = apply_noise(centers[ns.center - 1], ns.sigma, derive_seed(seed, {kNoiseStream, ns.center}), ns.clip);
    }
    if (!scenario.order.empty()) {
        if (scenario.order.size() != n) {
            throw ConfigError("scenario " + scenario.name + ": order lists " + std::to_string(scenario.order.size()) +
                              " centers, the task has " + std::to_string(n));
        }
        std::vector<std::size_t> perm;
        for (auto c : scenario.order) {
            if (c < 1 || c > n) throw ConfigError("scenario " + scenario.name + ": order entry out of range");
            perm.push_back(c - 1);
        }
        centers = reorder_centers(centers, perm);
    }
    return centers;
}

ModelSpec build_model(const ExperimentConfig& config, const std::vector<CenterDataset>& centers,
                      std::optional<HeadSetting> head) {
    if (centers.empty()) throw DataError("no centers");
    const Shape in = centers.front().input_shape();
    const HeadSetting setting = head.value_or(config.head);
    ModelSpec m = ModelSpec::mlp(shape_size(in), config.hidden, centers.front().num_classes, setting, centers.size());
    if (in.size() > 1) {
        m.input_shape = in;
        m.feature_layers.insert(m.feature_layers.begin(), LayerSpec::flatten());
    }
    m.validate();
    return m;
}

TrainConfig build_train_config(const ExperimentConfig& config, const MethodConfig& method, std::uint64_t seed) {
    TrainConfig t = config.train;
    t.method = method;
    t.seed = seed;
    t.config_hash = config.hash();
    return t;
}

RunResult run_method(const ExperimentConfig& config, const std::vector<CenterDataset>& centers,
                     const MethodConfig& method, std::uint64_t seed,
                     const std::optional<std::filesystem::path>& checkpoint) {
    const ModelSpec model = build_model(config, centers);
    const TrainConfig train = build_train_config(config, method, seed);
    if (!checkpoint) return FederatedRun(model, train, centers, config.schedule).run();

    // Resume from the last completed visit when a checkpoint is present.
    FederatedRun run = std::filesystem::exists(*checkpoint)
                           ? FederatedRun::resume(model, train, centers, config.schedule, load_checkpoint(*checkpoint))
                           : FederatedRun(model, train, centers, config.schedule);
    return run.run([&](const FederatedRun& r) { save_checkpoint(r.checkpoint(), *checkpoint); });
}

int joint_epoch_budget(const ExperimentConfig& config, std::size_t num_centers) {
    if (config.joint_budget == JointBudget::FixedEpochs) return config.joint_epochs;
    return config.schedule.total_epochs(num_centers);
}

BaselineResult run_baseline(BaselineKind kind, const ExperimentConfig& config,
                            const std::vector<CenterDataset>& centers, std::uint64_t seed) {
    BaselineResult out;
    MethodConfig ft;
    const TrainConfig train = build_train_config(config, ft, seed);
    const ModelSpec model = build_model(config, centers, HeadSetting::Single);
    const std::size_t n = centers.size();

    auto record = [&](const RunResult& r) {
        if (r.failed) {
            out.failed = true;
            if (!out.failure.empty()) out.failure += "; ";
            out.failure += r.failure;
            return;
        }
        std::vector<double> row;
        for (std::size_t c = 0; c < n; ++c) row.push_back(r.accuracy.at(c, r.accuracy.visits() - 1));
        out.per_center.push_back(std::move(row));
    };

    if (kind == BaselineKind::Joint) {
        CenterDataset pooled = centers.front();
        pooled.name = "pooled";
        pooled.train = pool_splits(centers, &CenterDataset::train);
        pooled.val = pool_splits(centers, &CenterDataset::val);
        pooled.test = pool_splits(centers, &CenterDataset::test);
        out.models = 1;
        record(FederatedRun(model, train, {pooled}, TransferSchedule::swt(joint_epoch_budget(config, n)), centers).run());
        if (!out.failed) {
            const auto& row = out.per_center.front();
            out.global = std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(n);
        }
        return out;
    }

    // Independent training: one model per center for the per-center budget.
    const int epochs = config.schedule.total_epochs(n) / static_cast<int>(n);
    out.models = n;
    for (std::size_t k = 0; k < n; ++k) {
        TrainConfig t = train;
        t.seed = derive_seed(seed, {0x17, k});
        record(FederatedRun(model, t, {centers[k]}, TransferSchedule::swt(epochs), centers).run());
        if (out.failed) return out;
    }
    double g = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        const auto& row = out.per_center[k];
        g += std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(n);
        out.local.push_back(row[k]);
    }
    out.global = g / static_cast<double>(n);
    out.local_mean = std::accumulate(out.local.begin(), out.local.end(), 0.0) / static_cast<double>(n);
    return out;
}

namespace {

enum class JobKind { Method, Joint, Independent };

struct Job {
    JobKind kind = JobKind::Method;
    std::size_t scenario = 0;
    std::size_t method = 0;
    std::uint64_t seed = 0;
};

struct JobOutput {
    std::vector<CurveRow> curves;
    std::optional<FailureRow> failure;
    // Per-run samples feeding the summary; NaN monotonicity for baselines.
    std::vector<std::pair<std::string, double>> accuracy;
    double monotonicity = std::numeric_limits<double>::quiet_NaN();
};

std::string job_method(const ExperimentConfig& c, const Job& j) {
    switch (j.kind) {
    case JobKind::Method: return method_name(c.methods[j.method].method);
    case JobKind::Joint: return "joint";
    case JobKind::Independent: return "it";
    }
    return "?";
}

JobOutput run_job(const ExperimentConfig& config, const Job& job, const std::string& hash,
                  const GridOptions& options) {
    JobOutput out;
    const Scenario& scenario = config.scenarios[job.scenario];
    const std::string method = job_method(config, job);
    auto fail = [&](const std::string& reason) {
        out.failure = FailureRow{method, scenario.name, job.seed, reason, hash};
        out.accuracy.clear();
    };
    try {
        const auto centers = build_centers(config, scenario, job.seed);
        if (job.kind == JobKind::Method) {
            std::optional<std::filesystem::path> ck;
            if (options.checkpoint_dir) {
                ck = *options.checkpoint_dir /
                     (method + "_" + scenario.name + "_" + std::to_string(job.seed) + "_" + hash + ".itlc");
            }
            const RunResult r = run_method(config, centers, config.methods[job.method], job.seed, ck);
            for (std::size_t v = 0; v < r.accuracy.visits(); ++v) {
                for (std::size_t c = 0; c < r.accuracy.centers(); ++c) {
                    if (r.accuracy.has(c, v)) {
                        out.curves.push_back({method, scenario.name, job.seed, c + 1, v + 1, r.accuracy.at(c, v), hash});
                    }
                }
            }
            if (r.failed) return fail(r.failure), out;
            out.accuracy.emplace_back(method, mean_accuracy(r.accuracy));
            if (r.accuracy.visits() >= 2) out.monotonicity = monotonicity(r.accuracy);
            return out;
        }
        const BaselineResult b = run_baseline(
            job.kind == JobKind::Joint ? BaselineKind::Joint : BaselineKind::IndependentTraining, config, centers, job.seed);
        // Baseline curves: visit_index numbers the model, center the test set.
        for (std::size_t m = 0; m < b.per_center.size(); ++m) {
            for (std::size_t c = 0; c < b.per_center[m].size(); ++c) {
                out.curves.push_back({method, scenario.name, job.seed, c + 1, m + 1, b.per_center[m][c], hash});
            }
        }
        if (b.failed) return fail(b.failure), out;
        if (job.kind == JobKind::Joint) {
            out.accuracy.emplace_back("joint", b.global);
        } else {
            out.accuracy.emplace_back("it-global", b.global);
            out.accuracy.emplace_back("it-local", b.local_mean);
        }
    } catch (const Error& e) {
        fail(e.what());
    }
    return out;
}

} // namespace

ResultSet run_experiment(const ExperimentConfig& config, const GridOptions& options) {
    const std::string hash = config.hash();
    std::vector<Job> jobs;
    for (std::size_t s = 0; s < config.scenarios.size(); ++s) {
        for (std::size_t r = 0; r < config.repeats; ++r) {
            const std::uint64_t seed = config.seed_base + r;
            if (options.run_methods) {
                for (std::size_t m = 0; m < config.methods.size(); ++m) jobs.push_back({JobKind::Method, s, m, seed});
            }
            if (options.run_joint && config.joint) jobs.push_back({JobKind::Joint, s, 0, seed});
            if (options.run_independent && config.independent) jobs.push_back({JobKind::Independent, s, 0, seed});
        }
    }

    std::vector<JobOutput> outputs(jobs.size());
    std::atomic<std::size_t> next{0};
    std::mutex progress_mutex;
    auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            outputs[i] = run_job(config, jobs[i], hash, options);
            if (options.progress) {
                std::lock_guard lock(progress_mutex);
                const Job& j = jobs[i];
                options.progress(job_method(config, j) + " / " + config.scenarios[j.scenario].name + " / seed " +
                                 std::to_string(j.seed) + (outputs[i].failure ? " FAILED" : " done"));
            }
        }
    };
    const std::size_t threads = std::clamp<std::size_t>(options.jobs, 1, std::max<std::size_t>(jobs.size(), 1));
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    // Collect in job order so output never depends on completion order.
    ResultSet results;
    struct Samples {
        std::vector<double> acc, mono;
        bool baseline = false;
    };
    std::map<std::pair<std::size_t, std::string>, Samples> samples;
    std::vector<std::pair<std::size_t, std::string>> order;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        auto& o = outputs[i];
        results.curves.insert(results.curves.end(), o.curves.begin(), o.curves.end());
        if (o.failure) results.failures.push_back(*o.failure);
        for (const auto& [name, acc] : o.accuracy) {
            const auto key = std::make_pair(jobs[i].scenario, name);
            if (!samples.count(key)) order.push_back(key);
            auto& s = samples[key];
            s.baseline = jobs[i].kind != JobKind::Method;
            s.acc.push_back(acc);
            if (!std::isnan(o.monotonicity)) s.mono.push_back(o.monotonicity);
        }
    }
    std::sort(order.begin(), order.end(), [&](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        // Methods in config order, then the baselines.
        auto rank = [&](const std::string& name) {
            for (std::size_t m = 0; m < config.methods.size(); ++m)
                if (method_name(config.methods[m].method) == name) return m;
            static const std::vector<std::string> tail{"joint", "it-global", "it-local"};
            return config.methods.size() + static_cast<std::size_t>(std::find(tail.begin(), tail.end(), name) - tail.begin());
        };
        return rank(a.second) < rank(b.second);
    });

    for (const auto& key : order) {
        const Samples& s = samples[key];
        SummaryRow row;
        row.method = key.second;
        row.scenario = scenario_label(config.scenarios[key.first]);
        row.summary = aggregate(s.acc, s.mono);
        if (s.mono.empty()) row.summary.monotonicity = std::numeric_limits<double>::quiet_NaN();
        if (row.summary.std_undefined) row.summary.std = std::numeric_limits<double>::quiet_NaN();
        row.p_value = std::numeric_limits<double>::quiet_NaN();
        row.samples = s.acc;
        row.config_hash = hash;
        const auto ft = samples.find({key.first, method_name(Method::Ft)});
        if (!s.baseline && key.second != method_name(Method::Ft) && ft != samples.end() && s.acc.size() >= 2 &&
            ft->second.acc.size() >= 2) {
            row.significance = significance_vs_ft(s.acc, ft->second.acc, config.significance_alpha);
            row.p_value = welch_t_test(s.acc, ft->second.acc).p_value;
        }
        results.summary.push_back(std::move(row));
    }
    return results;
}

} // namespace itl
