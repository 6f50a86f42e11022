#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "itl/error.hpp"
#include "itl/federation.hpp"
#include "support.hpp"

using namespace itl;
using namespace itl::test;

namespace {

std::vector<CenterDataset> tiny_centers() { return make_synthetic_task(tiny_task()); }

ModelSpec tiny_model(HeadSetting setting = HeadSetting::Single) {
    return ModelSpec::mlp(8, {8}, 4, setting, 3);
}

TrainConfig tiny_config(Method m, std::uint64_t seed = 1) {
    TrainConfig t;
    t.batch_size = 16;
    t.seed = seed;
    t.method.method = m;
    t.method.autoencoder.epochs = 3;
    t.config_hash = "h";
    return t;
}

bool same_accuracy(const AccuracyMatrix& a, const AccuracyMatrix& b) {
    if (a.centers() != b.centers() || a.visits() != b.visits()) return false;
    for (std::size_t i = 0; i < a.values().size(); ++i) {
        const double x = a.values()[i], y = b.values()[i];
        if (!(x == y || (std::isnan(x) && std::isnan(y)))) return false;
    }
    return true;
}

} // namespace

TEST_CASE("schedules expand to visit lists") {
    const auto swt = TransferSchedule::swt(7).visits(3);
    REQUIRE(swt.size() == 3);
    CHECK(swt[2].center == 2);
    CHECK(swt[2].epochs == 7);
    const auto cwt = TransferSchedule::cwt(2, 3).visits(4);
    REQUIRE(cwt.size() == 12);
    CHECK(cwt[5].center == 1);
    CHECK(cwt[5].iteration == 1);
    CHECK(cwt[11].index == 11);
    CHECK(TransferSchedule::cwt(10, 5).total_epochs(5) == 250);
    CHECK_THROWS_AS(TransferSchedule::cwt(0, 5).visits(5), ConfigError);
}

TEST_CASE("the monitor halves after stagnation and stops later") {
    OverfitMonitor m = OverfitMonitor::start(MonitorConfig{}, 1.0);
    for (int e = 1; e <= 4; ++e) CHECK(m.observe(1.0) == MonitorAction::Continue);
    CHECK(m.observe(1.0) == MonitorAction::HalveLR);
    CHECK(m.observe(0.5) == MonitorAction::Continue);
    CHECK(m.best_epoch == 6);
    for (int e = 1; e <= 4; ++e) m.observe(0.6);
    CHECK(m.observe(0.6) == MonitorAction::HalveLR);
    for (int e = 1; e <= 4; ++e) m.observe(0.6);
    CHECK(m.observe(0.6) == MonitorAction::HalveLR);
    for (int e = 1; e <= 9; ++e) m.observe(0.6);
    // Twentieth stagnant epoch: early stop wins over the coinciding halving.
    CHECK(m.observe(0.6) == MonitorAction::EarlyStop);
}

TEST_CASE("improvements below the threshold do not count") {
    OverfitMonitor m = OverfitMonitor::start(MonitorConfig{}, 1.0);
    m.observe(1.0 - 1e-7);
    CHECK_FALSE(m.improved_last);
    CHECK(m.best_epoch == 0);
}

TEST_CASE("a disabled monitor never acts but still tracks the best epoch") {
    MonitorConfig cfg;
    cfg.enabled = false;
    OverfitMonitor m = OverfitMonitor::start(cfg, 1.0);
    for (int e = 0; e < 30; ++e) CHECK(m.observe(2.0) == MonitorAction::Continue);
    m.observe(0.1);
    CHECK(m.best_epoch == 31);
}

TEST_CASE("monitor_epoch applies halvings to the optimizer") {
    ParameterSet p({{"x", Tensor({1})}});
    OptimizerState opt = make_optimizer(OptimizerKind::Adam, 0.001, p);
    OverfitMonitor m = OverfitMonitor::start(MonitorConfig{}, 1.0);
    for (int e = 0; e < 5; ++e) monitor_epoch(m, 2.0, opt);
    CHECK(opt.effective_lr() == doctest::Approx(0.0005));
}

TEST_CASE("hand-off reloads or resets the optimizer") {
    const ModelSpec model = tiny_model(HeadSetting::Multi);
    const ParameterSet p = init_params(model, 1);
    OptimizerState used = make_optimizer(OptimizerKind::Adam, 0.001, p);
    std::get<AdamState>(used.state).t = 17;
    used.lr_scale = 0.25;
    const OptimizerState fresh = make_optimizer(OptimizerKind::Adam, 0.001, p);
    const Visit v{4, 1, 1, 10};
    const auto rop = handoff(model, p, used, v, TransferPolicy::Reload, fresh);
    CHECK(std::get<AdamState>(rop.optimizer.state).t == 17);
    CHECK(rop.optimizer.lr_scale == 0.25);
    CHECK(rop.head == 1);
    CHECK(rop.frozen == std::vector<std::string>{head_prefix(model, 0), head_prefix(model, 2)});
    CHECK(bit_identical(rop.params, p));
    const auto nop = handoff(model, p, used, v, TransferPolicy::Reset, fresh);
    CHECK(std::get<AdamState>(nop.optimizer.state).t == 0);
    CHECK(nop.optimizer.lr_scale == 1.0);

    ParameterSet other({{"y", Tensor({1})}});
    const OptimizerState foreign = make_optimizer(OptimizerKind::Adam, 0.001, other);
    CHECK_THROWS_AS(handoff(model, p, foreign, v, TransferPolicy::Reload, fresh), AlignmentError);
    CHECK_THROWS_AS(handoff(model, p, used, Visit{0, 5, 0, 1}, TransferPolicy::Reload, fresh), ConfigError);
}

TEST_CASE("a run fills the accuracy matrix and is deterministic") {
    const auto centers = tiny_centers();
    const TrainConfig cfg = tiny_config(Method::Ft);
    std::size_t calls = 0;
    TrainConfig counted = cfg;
    counted.on_step = [&](const StepInfo& s) {
        ++calls;
        CHECK(std::isfinite(s.loss));
    };
    const RunResult a = run_cwt(tiny_model(), counted, centers, 2, 2);
    const RunResult b = run_cwt(tiny_model(), cfg, centers, 2, 2);
    REQUIRE_FALSE(a.failed);
    CHECK(a.accuracy.centers() == 3);
    CHECK(a.accuracy.visits() == 6);
    for (double v : a.accuracy.values()) CHECK((v >= 0.0 && v <= 100.0));
    CHECK(calls == a.steps);
    CHECK(a.steps == 6 * 2 * 5);  // 80 training rows in batches of 16
    CHECK(bit_identical(a.final_params, b.final_params));
    CHECK(same_accuracy(a.accuracy, b.accuracy));
    CHECK(mean_accuracy(a.accuracy) > 25.0);
}

TEST_CASE("importance methods with zero lambda reproduce fine-tuning") {
    const auto centers = tiny_centers();
    const RunResult ft = run_swt(tiny_model(), tiny_config(Method::Ft), centers, 3);
    for (Method m : {Method::Ewc, Method::Si, Method::Mas, Method::InverseImportance}) {
        TrainConfig cfg = tiny_config(m);
        cfg.method.lambda = 0.0;
        const RunResult r = run_swt(tiny_model(), cfg, centers, 3);
        CHECK(bit_identical(r.final_params, ft.final_params));
        CHECK(same_accuracy(r.accuracy, ft.accuracy));
    }
}

TEST_CASE("every method completes on the tiny task") {
    const auto centers = tiny_centers();
    for (const auto& name : method_names()) {
        CAPTURE(name);
        const RunResult r = run_cwt(tiny_model(), tiny_config(*parse_method(name)), centers, 2, 2);
        CHECK_FALSE(r.failed);
        CHECK(r.final_params.all_finite());
    }
}

TEST_CASE("regularized methods move away from fine-tuning") {
    const auto centers = tiny_centers();
    const RunResult ft = run_swt(tiny_model(), tiny_config(Method::Ft), centers, 3);
    for (Method m : {Method::Ewc, Method::Si, Method::Mas, Method::Lwf, Method::Ebll, Method::ImmMean}) {
        const RunResult r = run_swt(tiny_model(), tiny_config(m), centers, 3);
        CHECK_FALSE(bit_identical(r.final_params, ft.final_params));
    }
}

TEST_CASE("multi-head runs evaluate visited centers only and keep other heads fixed") {
    const auto centers = tiny_centers();
    const ModelSpec model = tiny_model(HeadSetting::Multi);
    FederatedRun run(model, tiny_config(Method::Ft), centers, TransferSchedule::swt(2));
    const ParameterSet initial = run.params();
    run.step_visit();
    CHECK(run.accuracy().has(0, 0));
    CHECK_FALSE(run.accuracy().has(1, 0));
    for (std::size_t h : {1, 2}) {
        const auto untouched = select_prefix(run.params(), head_prefix(model, h));
        CHECK(bit_identical(untouched, select_prefix(initial, head_prefix(model, h))));
    }
    run.step_visit();
    CHECK(run.accuracy().has(0, 1));
    CHECK(run.accuracy().has(1, 1));
    CHECK_FALSE(run.accuracy().has(2, 1));
}

TEST_CASE("imm evaluates a merged model") {
    const auto centers = tiny_centers();
    FederatedRun run(tiny_model(), tiny_config(Method::ImmMean), centers, TransferSchedule::swt(2));
    run.step_visit();
    run.step_visit();
    const ParameterSet merged = run.strategy().evaluation_params(run.params(), false);
    const auto& archive = run.strategy().state().archive;
    CHECK(archive.models.size() == 2);
    CHECK(bit_identical(merged, imm_merge_mean(archive, 1)));
    CHECK_FALSE(bit_identical(merged, run.params()));

    TrainConfig final_only = tiny_config(Method::ImmMean);
    final_only.method.imm_merge = ImmMergePolicy::FinalOnly;
    FederatedRun late(tiny_model(), final_only, centers, TransferSchedule::swt(2));
    late.step_visit();
    late.step_visit();
    CHECK(bit_identical(late.strategy().evaluation_params(late.params(), false), late.params()));
}

TEST_CASE("strategies enforce the visit lifecycle") {
    MethodConfig ewc;
    ewc.method = Method::Ewc;
    Strategy s(ewc);
    const ParameterSet p = init_params(tiny_model(), 1);
    s.begin_visit(0, p);
    const PenaltyGradient cold = s.penalty_gradient(p);
    CHECK_FALSE(cold.active);
    CHECK(cold.cold_start);
    const auto centers = tiny_centers();
    s.end_visit(tiny_model(), p, centers[0], std::nullopt, 1);
    CHECK_THROWS_AS(s.begin_visit(0, p), Error);
    s.begin_visit(1, p);
    CHECK(s.penalty_gradient(p).active);
    CHECK(s.penalty(p) == 0.0);
    MethodConfig bad;
    bad.method = Method::InverseImportance;
    bad.inverse_source = Method::Lwf;
    CHECK_THROWS_AS(Strategy{bad}, ConfigError);
}

TEST_CASE("numerical blow-ups are reported with their location") {
    TrainConfig cfg = tiny_config(Method::Ft);
    cfg.optimizer = OptimizerKind::Sgd;
    cfg.lr = 1e300;
    const RunResult r = run_swt(tiny_model(), cfg, tiny_centers(), 2);
    CHECK(r.failed);
    CHECK(r.failure.find("visit") != std::string::npos);
    CHECK(r.failure.find("center") != std::string::npos);
}

TEST_CASE("dice loss, balanced sampling, sgd and learning-rate search all train") {
    const auto centers = tiny_centers();
    TrainConfig cfg = tiny_config(Method::Lwf);
    cfg.loss = LossKind::dice(1.0);
    cfg.balanced_sampling = true;
    cfg.optimizer = OptimizerKind::Sgd;
    cfg.policy = TransferPolicy::Reset;
    cfg.lr_grid_search = true;
    cfg.lr_grid = {0.5, 0.05};
    cfg.lr_grid_epochs = 1;
    FederatedRun run(tiny_model(), cfg, centers, TransferSchedule::cwt(2, 1));
    const RunResult r = run.run();
    REQUIRE_FALSE(r.failed);
    const double base = std::get<SgdState>(run.optimizer().state).base_lr;
    CHECK((base == 0.5 || base == 0.05));
}

TEST_CASE("center-count and shape mismatches are rejected up front") {
    const auto centers = tiny_centers();
    CHECK_THROWS_AS(FederatedRun(ModelSpec::mlp(9, {8}, 4), tiny_config(Method::Ft), centers, TransferSchedule::swt(1)),
                    DataError);
    CHECK_THROWS_AS(FederatedRun(ModelSpec::mlp(8, {8}, 4, HeadSetting::Multi, 2), tiny_config(Method::Ft), centers,
                                 TransferSchedule::swt(1)),
                    ConfigError);
    CHECK_THROWS_AS(FederatedRun(tiny_model(), tiny_config(Method::Ft), {}, TransferSchedule::swt(1)), DataError);
}

TEST_CASE("checkpoints round-trip through the codec") {
    const auto centers = tiny_centers();
    for (Method m : {Method::Si, Method::Ebll, Method::ImmMode}) {
        FederatedRun run(tiny_model(), tiny_config(m), centers, TransferSchedule::cwt(2, 2));
        run.step_visit();
        run.step_visit();
        const Checkpoint ck = run.checkpoint();
        const Checkpoint back = decode_checkpoint(encode_checkpoint(ck));
        CHECK(bit_identical(back.params, ck.params));
        CHECK(bit_identical(std::get<AdamState>(back.optimizer.state).m, std::get<AdamState>(ck.optimizer.state).m));
        CHECK(std::get<AdamState>(back.optimizer.state).t == std::get<AdamState>(ck.optimizer.state).t);
        CHECK(back.optimizer.lr_scale == ck.optimizer.lr_scale);
        CHECK(bit_identical(back.regularizer.omega, ck.regularizer.omega));
        CHECK(back.regularizer.archive.models.size() == ck.regularizer.archive.models.size());
        CHECK(back.regularizer.encoder.has_value() == ck.regularizer.encoder.has_value());
        CHECK(same_accuracy(back.accuracy, ck.accuracy));
        CHECK(back.next_visit == 2);
        CHECK(back.visited == ck.visited);
        CHECK(back.provenance.config_hash == "h");
        CHECK(encode_checkpoint(back) == encode_checkpoint(ck));
    }
}

TEST_CASE("corrupted checkpoints are rejected") {
    FederatedRun run(tiny_model(), tiny_config(Method::Si), tiny_centers(), TransferSchedule::swt(1));
    run.step_visit();
    const auto bytes = encode_checkpoint(run.checkpoint());
    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x40;
    CHECK_THROWS_AS(decode_checkpoint(flipped), CodecError);
    const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + 20);
    CHECK_THROWS_AS(decode_checkpoint(truncated), CodecError);
    auto magic = bytes;
    magic[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(magic), CodecError);
    Checkpoint future = run.checkpoint();
    future.format_version = 99;
    CHECK_THROWS_WITH_AS(decode_checkpoint(encode_checkpoint(future)), doctest::Contains("version"), CodecError);
}

TEST_CASE("resuming from a saved checkpoint matches an uninterrupted run") {
    const auto centers = tiny_centers();
    const auto path = std::filesystem::temp_directory_path() / "itl_resume.itlc";
    for (Method m : {Method::Ft, Method::Si, Method::Lwf, Method::ImmMode}) {
        const TrainConfig cfg = tiny_config(m);
        const auto schedule = TransferSchedule::cwt(2, 2);
        const RunResult straight = FederatedRun(tiny_model(), cfg, centers, schedule).run();
        FederatedRun first(tiny_model(), cfg, centers, schedule);
        for (int i = 0; i < 3; ++i) first.step_visit();
        save_checkpoint(first.checkpoint(), path);
        const RunResult resumed = FederatedRun::resume(tiny_model(), cfg, centers, schedule, load_checkpoint(path)).run();
        CHECK(bit_identical(resumed.final_params, straight.final_params));
        CHECK(same_accuracy(resumed.accuracy, straight.accuracy));
        CHECK(resumed.steps == straight.steps);
    }
}

TEST_CASE("resuming under a different configuration is refused") {
    const auto centers = tiny_centers();
    FederatedRun run(tiny_model(), tiny_config(Method::Si), centers, TransferSchedule::swt(1));
    run.step_visit();
    const Checkpoint ck = run.checkpoint();
    TrainConfig other = tiny_config(Method::Si);
    other.config_hash = "different";
    CHECK_THROWS_AS(FederatedRun::resume(tiny_model(), other, centers, TransferSchedule::swt(1), ck), ConfigError);
    CHECK_THROWS_AS(FederatedRun::resume(tiny_model(), tiny_config(Method::Ewc), centers, TransferSchedule::swt(1), ck),
                    ConfigError);
    CHECK_THROWS(FederatedRun::resume(ModelSpec::mlp(8, {6}, 4), tiny_config(Method::Si), centers,
                                      TransferSchedule::swt(1), ck));
}
