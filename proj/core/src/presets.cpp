#include "debias/presets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <sstream>

#include "debias/error.hpp"
#include "debias/plots.hpp"

namespace debias {

namespace {

// Desk-scale settings shared by the MNIST presets.
constexpr const char* kMnistCommon = R"(
[data]
train_per_class = 1000
test_per_class = 500

[ecs]
eta = 0.5
epochs = 30
warmup_epochs = 0.5
batch_size = 256
lr = 0.001
hidden = 100,100,100

[train]
gamma = 1.6
tau = 0.8
epochs = 50
batch_size = 256
lr = 0.001
hidden = 100,100,100
ssl_weight = 1.0
)";

const std::map<std::string, std::string>& preset_table() {
    static const std::map<std::string, std::string> table = {
        {"cmnist-98-desk", R"(
[run]
name = cmnist-98-desk
seeds = 0,1,2
scorers = ecs,ecs_single,vm,vm_ee,gce,gce_ee
methods = vanilla,rew@gt,ga@ecs,ga@gt,ga@ecs+ssl

[data]
source = colored_mnist
rho = 0.98
)"},
        {"unbiased-safety", R"(
[run]
name = unbiased-safety
seeds = 0,1,2
scorers = ecs
methods = vanilla,ga@ecs

[data]
source = colored_mnist
rho = 0.1
)"},
        {"few-conflicting", R"(
[run]
name = few-conflicting
seeds = 0,1,2
scorers =
methods = vanilla,rew@gt,ga@gt

[data]
source = colored_mnist
rho = 0.995
)"},
        {"multicolor-desk", R"(
[run]
name = multicolor-desk
seeds = 0,1,2
scorers = ecs
methods = vanilla,ga@ecs

[data]
source = multicolor_mnist
rho = 0.99
rho_right = 0.95
test_per_class = 892
)"},
        {"blobs-smoke", R"(
[run]
name = blobs-smoke
seeds = 0,1
scorers = ecs,vm,gce,gce_ee
methods = vanilla,rew@gt,ga@ecs,ga@gt

[data]
source = blobs
rho = 0.95
blob_train = 2000
blob_test = 2000
blob_dim = 10
blob_classes = 5

[ecs]
epochs = 30
batch_size = 64
hidden = 100,100,100

[train]
epochs = 30
batch_size = 64
hidden = 100,100,100
)"},
    };
    return table;
}

std::string pts(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
    return buf;
}

std::string num(double v, const char* fmt = "%.4f") {
    char buf[32];
    std::snprintf(buf, sizeof buf, fmt, v);
    return buf;
}

const MethodRecord& method(const RunRecord& r, const std::string& label) {
    const MethodRecord* m = r.find(label);
    if (!m) {
        throw Error("run '" + r.name + "' has no method '" + label + "'");
    }
    return *m;
}

double mean_of(const std::vector<const ScoringRecord*>& rows, double ScoringRecord::*field) {
    double s = 0.0;
    for (const auto* r : rows) s += r->*field;
    return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
}

Check balance_check(const RunRecord& r) {
    double worst = 0.0;
    std::size_t runs = 0;
    for (const auto& m : r.methods) {
        if (m.method.strategy != Strategy::ga) continue;
        for (const auto& run : m.runs) {
            worst = std::max(worst, run.telemetry.max_balance_residual);
            ++runs;
        }
    }
    return {"GA balance identity", runs > 0 && worst <= 1e-9,
            "max relative residual " + num(worst, "%.3e") + " over " + std::to_string(runs) + " GA runs"};
}

/// Least-squares slope of the trailing third of a trace.
double tail_slope(const std::vector<double>& v) {
    const std::size_t n = v.size();
    const std::size_t start = n - std::max<std::size_t>(2, n / 3);
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double m = static_cast<double>(n - start);
    for (std::size_t i = start; i < n; ++i) {
        const double x = static_cast<double>(i);
        sx += x;
        sy += v[i];
        sxx += x * x;
        sxy += x * v[i];
    }
    const double den = m * sxx - sx * sx;
    return den > 0 ? (m * sxy - sx * sy) / den : 0.0;
}

std::vector<Check> cmnist_checks(const RunRecord& r) {
    std::vector<Check> checks;
    checks.push_back(balance_check(r));

    // Scoring quality.
    const auto ecs = r.scoring_for(ScorerKind::ecs);
    const auto gce_ee = r.scoring_for(ScorerKind::gce_ee);
    const auto gce = r.scoring_for(ScorerKind::gce);
    const auto vm = r.scoring_for(ScorerKind::vanilla_model);
    const double ap_ecs = mean_of(ecs, &ScoringRecord::ap);
    const double ap_vm = mean_of(vm, &ScoringRecord::ap);
    std::string per_seed;
    std::size_t ordered = 0;
    for (std::size_t i = 0; i < ecs.size(); ++i) {
        const bool ok = ecs[i]->ap > gce_ee[i]->ap && gce_ee[i]->ap > gce[i]->ap && gce[i]->ap > vm[i]->ap;
        ordered += ok;
        per_seed += " seed " + std::to_string(ecs[i]->seed) + ": " + num(ecs[i]->ap) + " / " + num(gce_ee[i]->ap) +
                    " / " + num(gce[i]->ap) + " / " + num(vm[i]->ap) + (ok ? "" : " (out of order)") + ";";
    }
    checks.push_back({"scoring AP", ap_ecs >= 0.90 && ap_ecs - ap_vm >= 0.20,
                      "mean AP ecs " + num(ap_ecs) + ", vm " + num(ap_vm) + ", gap " + num(ap_ecs - ap_vm) +
                          " (need >= 0.90 and >= 0.20)"});
    checks.push_back({"scorer ordering ecs > gce_ee > gce > vm", 3 * ordered >= 2 * ecs.size(),
                      std::to_string(ordered) + "/" + std::to_string(ecs.size()) + " seeds ordered;" + per_seed});

    double prec = 0, rec = 0;
    bool all_selected = true;
    for (const auto* s : ecs) {
        all_selected &= s->at_tau.precision.has_value();
        prec += s->at_tau.precision.value_or(0.0);
        rec += s->at_tau.recall;
    }
    prec /= static_cast<double>(std::max<std::size_t>(1, ecs.size()));
    rec /= static_cast<double>(std::max<std::size_t>(1, ecs.size()));
    checks.push_back({"mining precision at tau", all_selected && prec >= 0.95,
                      "mean precision " + num(prec) + ", recall " + num(rec) + " (need precision >= 0.95)"});

    // Debiasing gain.
    const MethodRecord& van = method(r, "vanilla");
    const MethodRecord& ga = method(r, "ga@ecs");
    const MethodRecord& oracle = method(r, "ga@gt");
    const double gain = ga.unbiased.mean - van.unbiased.mean;
    checks.push_back({"ECS+GA gain over vanilla", gain >= 0.08,
                      "unbiased " + pts(ga.unbiased.mean) + " vs " + pts(van.unbiased.mean) + ", gap " + pts(gain) +
                          " points (need >= 8)"});
    const double to_oracle = std::abs(ga.unbiased.mean - oracle.unbiased.mean);
    checks.push_back({"ECS+GA close to oracle GA", to_oracle <= 0.03,
                      "unbiased " + pts(ga.unbiased.mean) + " vs oracle " + pts(oracle.unbiased.mean) + ", |gap| " +
                          pts(to_oracle) + " points (need <= 3)"});

    // Stability.
    bool stable = true;
    std::string stab;
    for (const auto& run : ga.runs) {
        double best = 0.0, last = 0.0;
        for (const auto& e : run.telemetry.epochs) {
            best = std::max(best, e.unbiased_accuracy.value_or(0.0));
            last = e.unbiased_accuracy.value_or(0.0);
        }
        stable &= best - last <= 0.02;
        stab += " seed " + std::to_string(run.seed) + " best " + pts(best) + " last " + pts(last) + ";";
    }
    checks.push_back({"ECS+GA last epoch near best", stable, "need best - last <= 2 points;" + stab});
    bool flat = true;
    std::string trend;
    for (const auto& run : van.runs) {
        std::vector<double> trace;
        for (const auto& e : run.telemetry.epochs) trace.push_back(e.conflicting_accuracy.value_or(0.0));
        const double slope = tail_slope(trace);
        flat &= slope <= 0.0;
        trend += " seed " + std::to_string(run.seed) + " slope " + num(100.0 * slope, "%.4f") + " points/epoch;";
    }
    checks.push_back({"vanilla conflicting accuracy not rising late", flat,
                      "least-squares slope over the last third must be <= 0;" + trend});

    // Rotation prediction.
    const MethodRecord& ssl = method(r, "ga@ecs+ssl");
    const double delta = ssl.unbiased.mean - ga.unbiased.mean;
    double rot = 0.0;
    for (const auto& run : ssl.runs) rot += run.rotation_accuracy.value_or(0.0);
    rot /= static_cast<double>(std::max<std::size_t>(1, ssl.runs.size()));
    checks.push_back({"rotation SSL does not degrade", delta >= -0.02,
                      "unbiased " + pts(ssl.unbiased.mean) + " with SSL vs " + pts(ga.unbiased.mean) +
                          " without, change " + pts(delta) + " points (need >= -2)"});
    checks.push_back({"rotation head accuracy", rot >= 0.90,
                      "mean 4-way accuracy on held-out rotations " + num(rot) + " (need >= 0.90)"});
    return checks;
}

std::vector<Check> safety_checks(const RunRecord& r) {
    const MethodRecord& van = method(r, "vanilla");
    const MethodRecord& ga = method(r, "ga@ecs");
    const double gap = std::abs(ga.unbiased.mean - van.unbiased.mean);
    return {balance_check(r),
            {"GA safe on unbiased data", gap <= 0.025,
             "unbiased " + pts(ga.unbiased.mean) + " vs vanilla " + pts(van.unbiased.mean) + ", |gap| " + pts(gap) +
                 " points (need <= 2.5)"}};
}

std::vector<Check> few_checks(const RunRecord& r) {
    const MethodRecord& van = method(r, "vanilla");
    const MethodRecord& rew = method(r, "rew@gt");
    const MethodRecord& ga = method(r, "ga@gt");
    const bool ok = ga.unbiased.mean > rew.unbiased.mean && rew.unbiased.mean > van.unbiased.mean;
    return {balance_check(r),
            {"GA > Rew > vanilla with few conflicting samples", ok,
             "unbiased " + pts(ga.unbiased.mean) + " / " + pts(rew.unbiased.mean) + " / " + pts(van.unbiased.mean)}};
}

std::vector<Check> multicolor_checks(const RunRecord& r) {
    const MethodRecord& van = method(r, "vanilla");
    const MethodRecord& ga = method(r, "ga@ecs");
    auto groups = [](const MethodRecord& m) {
        std::array<double, 4> g{};
        for (const auto& run : m.runs) {
            for (std::size_t i = 0; i < 4; ++i) g[i] += run.report.multi->groups[i].value_or(0.0);
        }
        for (auto& v : g) v /= static_cast<double>(std::max<std::size_t>(1, m.runs.size()));
        return g;
    };
    const auto gg = groups(ga), gv = groups(van);
    std::string detail = "four-group average " + pts(ga.group_average.mean) + " vs vanilla " +
                         pts(van.group_average.mean) + "; groups aa/ac/ca/cc GA";
    for (double v : gg) detail += " " + pts(v);
    detail += ", vanilla";
    for (double v : gv) detail += " " + pts(v);
    return {balance_check(r),
            {"ECS+GA beats vanilla on four-group average", ga.group_average.mean > van.group_average.mean, detail}};
}

std::vector<Check> blob_checks(const RunRecord& r) {
    const MethodRecord& van = method(r, "vanilla");
    const MethodRecord& ga = method(r, "ga@gt");
    return {balance_check(r),
            {"oracle GA beats vanilla on blobs", ga.unbiased.mean > van.unbiased.mean,
             "unbiased " + pts(ga.unbiased.mean) + " vs " + pts(van.unbiased.mean)}};
}

} // namespace

bool PresetOutcome::passed() const {
    return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
}

std::vector<std::string> preset_names() {
    std::vector<std::string> out;
    for (const auto& [name, _] : preset_table()) out.push_back(name);
    return out;
}

bool preset_needs_mnist(const std::string& name) {
    return name != "blobs-smoke";
}

Config preset_config(const std::string& name) {
    const auto& table = preset_table();
    const auto it = table.find(name);
    if (it == table.end()) {
        std::string known;
        for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
        throw InvalidArgument("unknown preset '" + name + "' (known: " + known + ")");
    }
    Config merged = preset_needs_mnist(name) ? Config::parse(kMnistCommon) : Config{};
    const Config own = Config::parse(it->second);
    for (const auto& [key, value] : own.values()) merged.set(key, value);
    return merged;
}

std::vector<Check> evaluate_checks(const std::string& name, const RunRecord& record) {
    if (name == "cmnist-98-desk") return cmnist_checks(record);
    if (name == "unbiased-safety") return safety_checks(record);
    if (name == "few-conflicting") return few_checks(record);
    if (name == "multicolor-desk") return multicolor_checks(record);
    if (name == "blobs-smoke") return blob_checks(record);
    throw InvalidArgument("unknown preset '" + name + "'");
}

PresetOutcome reproduce(const std::string& name, const PresetOptions& options) {
    Config cfg = preset_config(name);
    for (const auto& o : options.overrides) cfg.apply_override(o);
    ExperimentSpec spec = experiment_from_config(cfg);
    if (!options.seeds.empty()) spec.seeds = options.seeds;
    spec.workers = options.workers;
    if (!options.output_dir.empty()) spec.output_dir = options.output_dir / name;
    if (preset_needs_mnist(name) && !options.mnist) {
        throw InvalidArgument("preset '" + name + "' needs the MNIST files");
    }

    if (!spec.output_dir.empty()) {
        write_file_atomic(spec.output_dir / "config.ini", cfg.to_ini());
    }
    PresetOutcome outcome;
    outcome.preset = name;
    outcome.record = run_experiment(spec, options.mnist, options.log);
    outcome.checks = evaluate_checks(name, outcome.record);
    if (!spec.output_dir.empty()) {
        write_file_atomic(spec.output_dir / "verdict.txt", format_verdict(outcome));
        emit_plots(spec.output_dir, spec.output_dir / "plots", options.log);
    }
    return outcome;
}

std::string format_verdict(const PresetOutcome& outcome) {
    std::ostringstream os;
    for (const auto& c : outcome.checks) {
        os << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
    }
    os << (outcome.passed() ? "PASS " : "FAIL ") << "preset " << outcome.preset << '\n';
    return os.str();
}

} // namespace debias
