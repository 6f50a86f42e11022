#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "itl/error.hpp"
#include "itl/experiment.hpp"

namespace itl {

using nlohmann::json;

namespace {

template <class E>
using Choices = std::vector<std::pair<const char*, E>>;

const Choices<OptimizerKind> kOptimizers{{"adam", OptimizerKind::Adam}, {"sgd", OptimizerKind::Sgd}};
const Choices<TransferPolicy> kPolicies{{"rop", TransferPolicy::Reload}, {"nop", TransferPolicy::Reset}};
const Choices<HeadSetting> kHeads{{"single", HeadSetting::Single}, {"multi", HeadSetting::Multi}};
const Choices<TransferSchedule::Kind> kSchedules{{"swt", TransferSchedule::Kind::Swt},
                                                 {"cwt", TransferSchedule::Kind::Cwt}};
const Choices<LossKind::Type> kLosses{{"cross_entropy", LossKind::Type::CrossEntropy}, {"dice", LossKind::Type::Dice}};
const Choices<ExternalFormat> kFormats{{"csv", ExternalFormat::CsvLabels}, {"raw", ExternalFormat::RawTensorDir}};
const Choices<JointBudget> kBudgets{{"fixed", JointBudget::FixedEpochs}, {"schedule", JointBudget::ScheduleEpochs}};
const Choices<ImmMergePolicy> kMerges{{"every_visit", ImmMergePolicy::EveryVisit},
                                      {"final_only", ImmMergePolicy::FinalOnly}};
const Choices<SiPathSign> kSiSigns{{"as_printed", SiPathSign::AsPrinted}, {"negated", SiPathSign::Negated}};
const Choices<MasFunctional> kMas{{"squared_l2", MasFunctional::SquaredL2},
                                  {"per_logit_abs", MasFunctional::PerLogitAbs}};

template <class E>
const char* choice_name(const Choices<E>& choices, E value) {
    for (const auto& [name, v] : choices)
        if (v == value) return name;
    return "?";
}

template <class E>
std::string choice_list(const Choices<E>& choices) {
    std::string s;
    for (const auto& [name, v] : choices) s += (s.empty() ? "" : ", ") + std::string(name);
    return s;
}

std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
    return s;
}

/// One JSON object being read: tracks unknown keys and funnels every problem
/// into the shared error list.
class Section {
public:
    Section(const json* obj, std::string path, std::vector<std::string>& errors, std::set<std::string> allowed)
        : obj_(obj), path_(std::move(path)), errors_(errors) {
        if (!obj_) return;
        if (!obj_->is_object()) {
            error("expected an object");
            obj_ = nullptr;
            return;
        }
        for (const auto& [key, value] : obj_->items()) {
            if (!allowed.count(key)) {
                std::vector<std::string> names(allowed.begin(), allowed.end());
                errors_.push_back(at(key) + ": unknown key (allowed: " + join(names) + ")");
            }
        }
    }

    std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    void error(const std::string& msg) const { errors_.push_back((path_.empty() ? "config" : path_) + ": " + msg); }
    void error(const std::string& key, const std::string& msg) const { errors_.push_back(at(key) + ": " + msg); }

    const json* find(const std::string& key) const {
        if (!obj_) return nullptr;
        auto it = obj_->find(key);
        return it == obj_->end() ? nullptr : &*it;
    }

    template <class T>
    bool read(const std::string& key, T& out) const {
        const json* v = find(key);
        if (!v) return false;
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!v->is_boolean()) throw std::invalid_argument("bool");
            } else if constexpr (std::is_integral_v<T>) {
                if (!v->is_number_integer()) throw std::invalid_argument("int");
                if constexpr (std::is_unsigned_v<T>) {
                    if (!v->is_number_unsigned() && v->get<std::int64_t>() < 0) {
                        error(key, "must be nonnegative");
                        return false;
                    }
                }
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!v->is_number()) throw std::invalid_argument("number");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v->is_string()) throw std::invalid_argument("string");
            }
            out = v->get<T>();
            return true;
        } catch (const std::exception&) {
            error(key, std::string("expected ") + type_name<T>());
            return false;
        }
    }

    template <class T, class Pred>
    void read(const std::string& key, T& out, Pred valid, const char* rule) const {
        T tmp = out;
        if (!read(key, tmp)) return;
        if (!valid(tmp)) {
            error(key, std::string("must be ") + rule);
            return;
        }
        out = tmp;
    }

    template <class E>
    void choice(const std::string& key, E& out, const Choices<E>& choices) const {
        std::string s;
        if (!read(key, s)) return;
        for (const auto& [name, v] : choices) {
            if (s == name) {
                out = v;
                return;
            }
        }
        error(key, "unknown value '" + s + "' (valid: " + choice_list(choices) + ")");
    }

private:
    template <class T>
    static const char* type_name() {
        if constexpr (std::is_same_v<T, bool>) return "a boolean";
        else if constexpr (std::is_integral_v<T>) return "an integer";
        else if constexpr (std::is_floating_point_v<T>) return "a number";
        else if constexpr (std::is_same_v<T, std::string>) return "a string";
        else return "an array";
    }

    const json* obj_;
    std::string path_;
    std::vector<std::string>& errors_;
};

auto positive = [](auto v) { return v > 0; };
auto nonnegative = [](auto v) { return v >= 0; };

void read_method(const json& j, const std::string& path, std::vector<std::string>& errors, MethodConfig& m) {
    auto name_error = [&](const std::string& name) {
        errors.push_back(path + ": unknown method '" + name + "' (valid: " + join(method_names()) + ")");
    };
    if (j.is_string()) {
        const auto parsed = parse_method(j.get<std::string>());
        if (!parsed) return name_error(j.get<std::string>());
        m.method = *parsed;
        return;
    }
    Section s(&j, path, errors,
              {"name", "lambda", "temperature", "beta", "merge", "si_epsilon", "si_sign", "mas_functional",
               "importance_source", "fisher_damping", "autoencoder"});
    std::string name;
    if (!s.read("name", name)) {
        if (j.is_object()) s.error("name", "is required");
        return;
    }
    const auto parsed = parse_method(name);
    if (!parsed) return name_error(name);
    m.method = *parsed;
    s.read("lambda", m.lambda, nonnegative, ">= 0");
    s.read("temperature", m.temperature, positive, "> 0");
    s.read("beta", m.imm_beta, nonnegative, ">= 0");
    s.choice("merge", m.imm_merge, kMerges);
    s.read("si_epsilon", m.si_epsilon, positive, "> 0");
    s.choice("si_sign", m.si_sign, kSiSigns);
    s.choice("mas_functional", m.mas_functional, kMas);
    s.read("fisher_damping", m.fisher_damping, positive, "> 0");
    std::string source;
    if (s.read("importance_source", source)) {
        const auto src = parse_method(source);
        if (!src || (*src != Method::Ewc && *src != Method::Si && *src != Method::Mas)) {
            s.error("importance_source", "must be one of ewc, si, mas");
        } else {
            m.inverse_source = *src;
        }
    }
    Section ae(s.find("autoencoder"), s.at("autoencoder"), errors, {"code_dim", "epochs", "lr", "batch_size", "alpha"});
    ae.read("code_dim", m.autoencoder.code_dim);
    ae.read("epochs", m.autoencoder.epochs, positive, "> 0");
    ae.read("lr", m.autoencoder.lr, positive, "> 0");
    ae.read("batch_size", m.autoencoder.batch_size, positive, "> 0");
    ae.read("alpha", m.autoencoder.alpha, nonnegative, ">= 0");
}

json method_to_json(const MethodConfig& m) {
    return {{"name", method_name(m.method)},
            {"lambda", m.lambda},
            {"temperature", m.temperature},
            {"beta", m.imm_beta},
            {"merge", choice_name(kMerges, m.imm_merge)},
            {"si_epsilon", m.si_epsilon},
            {"si_sign", choice_name(kSiSigns, m.si_sign)},
            {"mas_functional", choice_name(kMas, m.mas_functional)},
            {"importance_source", method_name(m.inverse_source)},
            {"fisher_damping", m.fisher_damping},
            {"autoencoder",
             {{"code_dim", m.autoencoder.code_dim},
              {"epochs", m.autoencoder.epochs},
              {"lr", m.autoencoder.lr},
              {"batch_size", m.autoencoder.batch_size},
              {"alpha", m.autoencoder.alpha}}}};
}

} // namespace

json config_to_json(const ExperimentConfig& c) {
    json task;
    if (c.manifest) {
        task = {{"kind", "external"}, {"manifest", c.manifest->string()}, {"format", choice_name(kFormats, c.manifest_format)}};
    } else {
        task = {{"kind", "synthetic"},
                {"num_classes", c.task.num_classes},
                {"dim", c.task.dim},
                {"train_per_class", c.task.train_per_class},
                {"val_per_class", c.task.val_per_class},
                {"test_per_class", c.task.test_per_class},
                {"num_centers", c.task.num_centers},
                {"modes_per_class", c.task.modes_per_class},
                {"center_spread", c.task.center_spread},
                {"within_std", c.task.within_std},
                {"seed", c.task.seed},
                {"vary_with_seed", c.vary_data_with_seed}};
    }
    json methods = json::array();
    for (const auto& m : c.methods) methods.push_back(method_to_json(m));
    json scenarios = json::array();
    for (const auto& s : c.scenarios) {
        json noise = json::array();
        for (const auto& n : s.noise) noise.push_back({{"center", n.center}, {"sigma", n.sigma}, {"clip", n.clip}});
        scenarios.push_back({{"name", s.name}, {"noise", noise}, {"order", s.order}});
    }
    const TrainConfig& t = c.train;
    return {{"task", task},
            {"model", {{"hidden", c.hidden}, {"head", choice_name(kHeads, c.head)}}},
            {"schedule",
             {{"kind", choice_name(kSchedules, c.schedule.kind)},
              {"epochs_per_center", c.schedule.epochs_per_center},
              {"transfer_every", c.schedule.transfer_every},
              {"iterations", c.schedule.iterations}}},
            {"optimizer",
             {{"kind", choice_name(kOptimizers, t.optimizer)},
              {"lr", t.default_lr()},
              {"policy", choice_name(kPolicies, t.policy)},
              {"lr_grid_search", t.lr_grid_search},
              {"lr_grid", t.lr_grid},
              {"lr_grid_epochs", t.lr_grid_epochs},
              {"beta1", t.adam_beta1},
              {"beta2", t.adam_beta2},
              {"epsilon", t.adam_epsilon},
              {"sgd_decay_base", t.sgd_decay_base},
              {"sgd_decay_period", t.sgd_decay_period}}},
            {"training",
             {{"batch_size", t.batch_size},
              {"balanced_sampling", t.balanced_sampling},
              {"loss", choice_name(kLosses, t.loss.type)},
              {"dice_smoothing", t.loss.smoothing}}},
            {"monitor",
             {{"e_val", t.monitor.e_val},
              {"e_stop", t.monitor.e_stop},
              {"min_improvement", t.monitor.min_improvement},
              {"enabled", t.monitor.enabled}}},
            {"methods", methods},
            {"repeats", c.repeats},
            {"seed_base", c.seed_base},
            {"scenarios", scenarios},
            {"baselines",
             {{"joint", c.joint},
              {"independent", c.independent},
              {"joint_budget", choice_name(kBudgets, c.joint_budget)},
              {"joint_epochs", c.joint_epochs}}},
            {"significance", {{"alpha", c.significance_alpha}, {"test", "welch"}}}};
}

std::string ExperimentConfig::hash() const {
    const std::string text = config_to_json(*this).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

ConfigParse parse_config_json(const json& j, const std::filesystem::path& base_dir) {
    ConfigParse out;
    std::vector<std::string>& errors = out.errors;
    ExperimentConfig c;
    Section root(&j, "", errors,
                 {"task", "model", "schedule", "optimizer", "training", "monitor", "methods", "repeats", "seed_base",
                  "scenarios", "baselines", "significance"});
    if (!j.is_object()) return out;

    Section task(root.find("task"), "task", errors,
                 {"kind", "manifest", "format", "num_classes", "dim", "train_per_class", "val_per_class",
                  "test_per_class", "num_centers", "modes_per_class", "center_spread", "within_std", "seed",
                  "vary_with_seed"});
    std::string kind = "synthetic";
    task.read("kind", kind);
    if (kind == "external") {
        std::string manifest;
        if (!task.read("manifest", manifest)) {
            task.error("manifest", "is required for an external task");
        } else {
            std::filesystem::path p(manifest);
            c.manifest = p.is_absolute() || base_dir.empty() ? p : base_dir / p;
        }
        task.choice("format", c.manifest_format, kFormats);
    } else if (kind != "synthetic") {
        task.error("kind", "unknown value '" + kind + "' (valid: synthetic, external)");
    }
    task.read("num_classes", c.task.num_classes, [](auto v) { return v >= 2; }, ">= 2");
    task.read("dim", c.task.dim, positive, "> 0");
    task.read("train_per_class", c.task.train_per_class, positive, "> 0");
    task.read("val_per_class", c.task.val_per_class, positive, "> 0");
    task.read("test_per_class", c.task.test_per_class, positive, "> 0");
    task.read("num_centers", c.task.num_centers, positive, "> 0");
    task.read("modes_per_class", c.task.modes_per_class, positive, "> 0");
    task.read("center_spread", c.task.center_spread, nonnegative, ">= 0");
    task.read("within_std", c.task.within_std, nonnegative, ">= 0");
    task.read("seed", c.task.seed);
    task.read("vary_with_seed", c.vary_data_with_seed);

    Section model(root.find("model"), "model", errors, {"hidden", "head"});
    if (model.read("hidden", c.hidden)) {
        for (auto h : c.hidden)
            if (h == 0) model.error("hidden", "layer widths must be > 0");
    }
    model.choice("head", c.head, kHeads);

    Section sched(root.find("schedule"), "schedule", errors, {"kind", "epochs_per_center", "transfer_every", "iterations"});
    sched.choice("kind", c.schedule.kind, kSchedules);
    sched.read("epochs_per_center", c.schedule.epochs_per_center, positive, "> 0");
    sched.read("transfer_every", c.schedule.transfer_every, positive, "> 0");
    sched.read("iterations", c.schedule.iterations, positive, "> 0");

    TrainConfig& t = c.train;
    Section opt(root.find("optimizer"), "optimizer", errors,
                {"kind", "lr", "policy", "lr_grid_search", "lr_grid", "lr_grid_epochs", "beta1", "beta2", "epsilon",
                 "sgd_decay_base", "sgd_decay_period"});
    opt.choice("kind", t.optimizer, kOptimizers);
    opt.read("lr", t.lr, positive, "> 0");
    opt.choice("policy", t.policy, kPolicies);
    opt.read("lr_grid_search", t.lr_grid_search);
    if (opt.read("lr_grid", t.lr_grid)) {
        if (t.lr_grid.empty()) opt.error("lr_grid", "must not be empty");
        for (double v : t.lr_grid)
            if (!(v > 0)) opt.error("lr_grid", "entries must be > 0");
    }
    opt.read("lr_grid_epochs", t.lr_grid_epochs, positive, "> 0");
    opt.read("beta1", t.adam_beta1, [](double v) { return v >= 0 && v < 1; }, "in [0, 1)");
    opt.read("beta2", t.adam_beta2, [](double v) { return v >= 0 && v < 1; }, "in [0, 1)");
    opt.read("epsilon", t.adam_epsilon, positive, "> 0");
    opt.read("sgd_decay_base", t.sgd_decay_base, [](double v) { return v > 0 && v <= 1; }, "in (0, 1]");
    opt.read("sgd_decay_period", t.sgd_decay_period, positive, "> 0");
    // Resolve the kind's default now so the canonical form names it.
    t.lr = t.default_lr();

    Section tr(root.find("training"), "training", errors, {"batch_size", "balanced_sampling", "loss", "dice_smoothing"});
    tr.read("batch_size", t.batch_size, positive, "> 0");
    tr.read("balanced_sampling", t.balanced_sampling);
    tr.choice("loss", t.loss.type, kLosses);
    tr.read("dice_smoothing", t.loss.smoothing, positive, "> 0");

    Section mon(root.find("monitor"), "monitor", errors, {"e_val", "e_stop", "min_improvement", "enabled"});
    mon.read("e_val", t.monitor.e_val, positive, "> 0");
    mon.read("e_stop", t.monitor.e_stop, positive, "> 0");
    mon.read("min_improvement", t.monitor.min_improvement, nonnegative, ">= 0");
    mon.read("enabled", t.monitor.enabled);

    if (const json* methods = root.find("methods")) {
        if (!methods->is_array() || methods->empty()) {
            root.error("methods", "must be a non-empty array");
        } else {
            c.methods.clear();
            std::set<std::string> seen;
            for (std::size_t i = 0; i < methods->size(); ++i) {
                MethodConfig m;
                const std::size_t before = errors.size();
                read_method((*methods)[i], "methods[" + std::to_string(i) + "]", errors, m);
                if (errors.size() != before) continue;
                if (!seen.insert(method_name(m.method)).second) {
                    errors.push_back("methods[" + std::to_string(i) + "]: duplicate method '" + method_name(m.method) + "'");
                }
                c.methods.push_back(m);
            }
        }
    }

    root.read("repeats", c.repeats, positive, "> 0");
    root.read("seed_base", c.seed_base);

    if (const json* scenarios = root.find("scenarios")) {
        if (!scenarios->is_array() || scenarios->empty()) {
            root.error("scenarios", "must be a non-empty array");
        } else {
            c.scenarios.clear();
            std::set<std::string> names;
            for (std::size_t i = 0; i < scenarios->size(); ++i) {
                const std::string path = "scenarios[" + std::to_string(i) + "]";
                Section s(&(*scenarios)[i], path, errors, {"name", "noise", "order"});
                Scenario sc;
                if (!s.read("name", sc.name)) s.error("name", "is required");
                if (!names.insert(sc.name).second) s.error("name", "duplicate scenario '" + sc.name + "'");
                if (const json* noise = s.find("noise")) {
                    if (!noise->is_array()) {
                        s.error("noise", "must be an array");
                    } else {
                        for (std::size_t k = 0; k < noise->size(); ++k) {
                            Section n(&(*noise)[k], s.at("noise") + "[" + std::to_string(k) + "]", errors,
                                      {"center", "sigma", "clip"});
                            NoiseSpec ns;
                            if (!n.find("center")) n.error("center", "is required");
                            n.read("center", ns.center, positive, ">= 1");
                            n.read("sigma", ns.sigma, nonnegative, ">= 0");
                            n.read("clip", ns.clip);
                            sc.noise.push_back(ns);
                        }
                    }
                }
                s.read("order", sc.order);
                c.scenarios.push_back(sc);
            }
        }
    }

    Section base(root.find("baselines"), "baselines", errors, {"joint", "independent", "joint_budget", "joint_epochs"});
    base.read("joint", c.joint);
    base.read("independent", c.independent);
    base.choice("joint_budget", c.joint_budget, kBudgets);
    base.read("joint_epochs", c.joint_epochs, positive, "> 0");

    Section sig(root.find("significance"), "significance", errors, {"alpha", "test"});
    sig.read("alpha", c.significance_alpha, [](double v) { return v > 0 && v < 1; }, "in (0, 1)");
    std::string test = "welch";
    if (sig.read("test", test) && test != "welch") sig.error("test", "unknown value '" + test + "' (valid: welch)");

    // Cross-field rules that need the synthetic center count.
    if (!c.manifest) {
        const std::size_t n = c.task.num_centers;
        for (std::size_t i = 0; i < c.scenarios.size(); ++i) {
            const auto& sc = c.scenarios[i];
            const std::string path = "scenarios[" + std::to_string(i) + "]";
            for (const auto& ns : sc.noise) {
                if (ns.center > n) {
                    errors.push_back(path + ".noise: center " + std::to_string(ns.center) + " exceeds num_centers " +
                                     std::to_string(n));
                }
            }
            if (!sc.order.empty()) {
                std::vector<std::size_t> sorted = sc.order;
                std::sort(sorted.begin(), sorted.end());
                bool ok = sorted.size() == n;
                for (std::size_t k = 0; ok && k < n; ++k) ok = sorted[k] == k + 1;
                if (!ok) errors.push_back(path + ".order: must be a permutation of 1.." + std::to_string(n));
            }
        }
    }

    if (errors.empty()) out.config = std::move(c);
    return out;
}

ConfigParse parse_config_text(const std::string& text, const std::filesystem::path& base_dir) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        ConfigParse out;
        out.errors.push_back(std::string("config is not valid JSON: ") + e.what());
        return out;
    }
    return parse_config_json(j, base_dir);
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    ConfigParse p = parse_config_text(ss.str(), path.parent_path());
    if (!p.config) {
        std::string msg = path.string() + ": " + std::to_string(p.errors.size()) + " problem(s)";
        for (const auto& e : p.errors) msg += "\n  " + e;
        throw ConfigError(msg);
    }
    return std::move(*p.config);
}

} // namespace itl
