#include "debias/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "debias/checkpoint.hpp"
#include "debias/dataset_io.hpp"
#include "debias/error.hpp"
#include "debias/rng.hpp"

namespace debias {

namespace fs = std::filesystem;

namespace {

std::string hex64(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string seed_dir(std::uint64_t seed) {
    return "seed" + std::to_string(seed);
}

/// Filesystem-safe method label.
std::string slug(const std::string& label) {
    std::string out;
    for (char c : label) {
        out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
    }
    return out;
}

std::string join_csv(const std::vector<std::string>& fields) {
    std::string out;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) out += ',';
        out += fields[i];
    }
    return out;
}

/// Keeps the points where recall steps up, which is all a PR plot needs.
void write_pr_curve(const fs::path& path, const std::vector<PrPoint>& curve) {
    std::ostringstream os;
    os << "recall,precision\n";
    double last = -1.0;
    for (const auto& p : curve) {
        if (p.recall > last) {
            os << format_number(p.recall) << ',' << format_number(p.precision) << '\n';
            last = p.recall;
        }
    }
    write_file_atomic(path, os.str());
}

bool needs_scores(const MethodSpec& m) {
    return m.strategy != Strategy::vanilla && m.partition == PartitionSource::scores;
}

/// A log that serialises lines from worker threads.
class RunLog {
public:
    explicit RunLog(std::ostream* out) : out_(out) {}
    void line(const std::string& text) {
        if (!out_) return;
        std::lock_guard lock(mutex_);
        *out_ << text << '\n';
        out_->flush();
    }

private:
    std::ostream* out_;
    std::mutex mutex_;
};

struct SeedOutcome {
    std::vector<ScoringRecord> scoring;
    std::vector<SeedRun> runs; // method order
};

MetricsReport evaluate_model(const MlpModel& model, const BiasedDataset& test, const std::string& label,
                             std::vector<int>& predictions) {
    MetricsReport report;
    report.label = label;
    predictions = predict(model, test.features);
    report.accuracy = plain_accuracy(predictions, test.targets);
    const EpochRecord er = evaluate_epoch(model, test);
    report.unbiased_accuracy = er.unbiased_accuracy;
    report.aligned_accuracy = er.aligned_accuracy;
    report.conflicting_accuracy = er.conflicting_accuracy;
    if (er.unbiased_accuracy) {
        const int nb = test.palette.size() > 0 ? static_cast<int>(test.palette.size()) : test.num_classes;
        report.groups = unbiased_accuracy(predictions, test.targets, test.bias[0], test.num_classes, nb);
    }
    if (test.attributes() == 2) {
        report.multi = multi_group_accuracy(predictions, test.targets, test.aligned[0], test.aligned[1]);
    }
    if (test.num_classes == 2 && test.attributes() == 1) {
        report.fairness = fairness_binary(predictions, test.targets, test.bias[0]);
    }
    return report;
}

ScoringRecord score_record(std::uint64_t seed, ScorerKind kind, const BCScoreTable& table,
                           const std::vector<std::uint8_t>& truth, double tau) {
    ScoringRecord r;
    r.seed = seed;
    r.scorer = kind;
    ApResult ap = average_precision(table.scores, truth);
    r.ap = ap.ap;
    r.curve = std::move(ap.curve);
    r.tau = tau;
    r.at_tau = precision_recall_at(table.scores, truth, tau);
    return r;
}

SeedOutcome run_seed(const ExperimentSpec& spec, const MnistSplits* mnist, std::uint64_t seed, RunLog& log) {
    const RunSeeds seeds = derive_run_seeds(seed);
    const ExperimentData data = build_data(spec.data, mnist, seed);
    const std::vector<std::uint8_t> truth = data.train.conflicting_flags();
    const fs::path out = spec.output_dir;
    const std::string tag = "[" + spec.name + " seed " + std::to_string(seed) + "] ";

    EcsConfig ecs = spec.ecs;
    ecs.peer_seed_1 = seeds.peer1;
    ecs.peer_seed_2 = seeds.peer2;
    ecs.batch_seed = seeds.ecs_batch;

    SeedOutcome outcome;
    std::optional<BCScoreTable> ecs_table;
    const bool methods_need_scores = std::any_of(spec.methods.begin(), spec.methods.end(), needs_scores);
    std::vector<ScorerKind> order = spec.scorers;
    if (methods_need_scores && std::find(order.begin(), order.end(), ScorerKind::ecs) == order.end()) {
        order.insert(order.begin(), ScorerKind::ecs);
    }

    auto persist = [&](ScorerKind kind, const BCScoreTable& table) {
        if (out.empty()) return;
        write_score_table(out / "scores" / (seed_dir(seed) + "_" + to_string(kind) + ".txt"), table,
                          {{"scorer", to_string(kind)},
                           {"seed", std::to_string(seed)},
                           {"config_hash", hex64(ecs.hash())}});
    };
    auto report = [&](ScorerKind kind, const BCScoreTable& table, bool listed) {
        persist(kind, table);
        if (!listed) return;
        outcome.scoring.push_back(score_record(seed, kind, table, truth, spec.train.tau));
        const auto& r = outcome.scoring.back();
        if (!out.empty()) {
            write_pr_curve(out / "pr" / (seed_dir(seed) + "_" + to_string(kind) + ".csv"), r.curve);
        }
        log.line(tag + to_string(kind) + " AP " + format_number(r.ap) + " precision@tau " +
                 format_number(r.at_tau.precision) + " recall@tau " + format_number(r.at_tau.recall));
    };
    auto listed = [&](ScorerKind kind) {
        return std::find(spec.scorers.begin(), spec.scorers.end(), kind) != spec.scorers.end();
    };

    // Each training trajectory runs once even when it yields two scorers.
    std::vector<ScorerKind> done;
    for (ScorerKind kind : order) {
        if (std::find(done.begin(), done.end(), kind) != done.end()) continue;
        switch (kind) {
        case ScorerKind::ecs: {
            ScoringResult r = ecs_train_and_score(data.train, ecs);
            report(kind, r.table, listed(kind));
            ecs_table = std::move(r.table);
            break;
        }
        case ScorerKind::ecs_single: {
            EcsConfig single = ecs;
            single.peer_model = false;
            report(kind, ecs_train_and_score(data.train, single).table, true);
            break;
        }
        case ScorerKind::vanilla_model:
        case ScorerKind::vanilla_ee: {
            BCScoreTable ee;
            const BCScoreTable vm = vanilla_score(data.train, ecs, &ee);
            report(ScorerKind::vanilla_model, vm, listed(ScorerKind::vanilla_model));
            report(ScorerKind::vanilla_ee, ee, listed(ScorerKind::vanilla_ee));
            done.push_back(ScorerKind::vanilla_model);
            done.push_back(ScorerKind::vanilla_ee);
            break;
        }
        case ScorerKind::gce:
        case ScorerKind::gce_ee: {
            const ScoringResult g = gce_score(data.train, ecs, true);
            report(ScorerKind::gce, *g.final_checkpoint, listed(ScorerKind::gce));
            report(ScorerKind::gce_ee, g.table, listed(ScorerKind::gce_ee));
            done.push_back(ScorerKind::gce);
            done.push_back(ScorerKind::gce_ee);
            break;
        }
        }
        done.push_back(kind);
    }

    std::optional<Partition> mined;
    if (ecs_table) {
        mined = threshold_scores(*ecs_table, spec.train.tau);
        if (mined->degenerate) {
            log.line(tag + "warning: thresholded scores put every sample on one side");
        }
    }
    const Partition truth_partition = Partition::from_flags(truth);

    for (const MethodSpec& method : spec.methods) {
        TrainConfig cfg = spec.train;
        cfg.strategy = method.strategy;
        cfg.partition_source = method.partition;
        cfg.ssl = method.ssl;
        cfg.init_seed = seeds.init;
        cfg.batch_seed = seeds.train_batch;
        cfg.record_iterations = spec.keep_iterations;

        TrainInputs in;
        in.train = &data.train;
        in.eval = &data.test;
        if (method.strategy == Strategy::rew || method.strategy == Strategy::ga) {
            in.partition = method.partition == PartitionSource::ground_truth ? &truth_partition : &*mined;
        }
        if (method.strategy == Strategy::erew) {
            if (method.partition == PartitionSource::ground_truth) {
                throw InvalidArgument("erew weights come from scores; '" + method.label + "' asks for flags");
            }
            in.scores = &*ecs_table;
        }
        TrainResult trained = [&] {
            try {
                return train(in, cfg);
            } catch (const Error& e) {
                throw Error(tag + method.label + ": " + e.what());
            }
        }();

        SeedRun run;
        run.seed = seed;
        run.report = evaluate_model(trained.model, data.test, method.label, run.predictions);
        if (method.ssl == SslMode::rotation) {
            run.rotation_accuracy = rotation_accuracy(trained.model, data.test.features, data.test.shape);
        }
        run.telemetry = std::move(trained.telemetry);
        log.line(tag + method.label + " unbiased " + format_number(run.report.unbiased_accuracy) +
                 " conflicting " + format_number(run.report.conflicting_accuracy) +
                 (run.rotation_accuracy ? " rotation " + format_number(run.rotation_accuracy) : ""));

        if (!out.empty()) {
            const fs::path dir = out / "runs" / slug(method.label) / seed_dir(seed);
            if (spec.keep_iterations) {
                write_telemetry(dir / "telemetry.txt", run.telemetry);
            }
            write_epoch_trace(dir / "epochs.csv", run.telemetry);
            write_checkpoint(dir / "model.dblb", trained.model);
            write_file_atomic(dir / "report.json", run.report.to_json().dump(2) + "\n");
        }
        outcome.runs.push_back(std::move(run));
    }
    return outcome;
}

nlohmann::json aggregate_json(const Aggregate& a) {
    return {{"mean", a.mean}, {"stddev", a.stddev}, {"count", a.count}};
}

} // namespace

fs::path resolve_data_dir(const std::optional<std::string>& configured) {
    if (const char* env = std::getenv(kDataDirEnv); env && *env) {
        return env;
    }
    if (configured && !configured->empty()) {
        return *configured;
    }
    return fs::path("data") / "mnist";
}

MnistFiles mnist_files(const fs::path& dir) {
    return {dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", dir / "t10k-images-idx3-ubyte",
            dir / "t10k-labels-idx1-ubyte"};
}

MnistSplits load_mnist(const fs::path& dir) {
    const MnistFiles f = mnist_files(dir);
    std::vector<fs::path> missing;
    for (const auto& p : {f.train_images, f.train_labels, f.test_images, f.test_labels}) {
        if (!fs::exists(p)) missing.push_back(p);
    }
    if (!missing.empty()) {
        std::string msg = "MNIST files not found; expected:";
        for (const auto& p : missing) msg += "\n  " + p.string();
        msg += std::string("\nSet ") + kDataDirEnv + " to the directory holding the uncompressed IDX files "
               "or run tools/fetch_mnist.sh.";
        throw Error(msg);
    }
    return {load_idx(f.train_images, f.train_labels), load_idx(f.test_images, f.test_labels)};
}

std::string to_string(DatasetKind kind) {
    switch (kind) {
    case DatasetKind::colored_mnist: return "colored_mnist";
    case DatasetKind::multicolor_mnist: return "multicolor_mnist";
    case DatasetKind::blobs: return "blobs";
    }
    return "colored_mnist";
}

DatasetKind parse_dataset_kind(const std::string& name) {
    if (name == "colored_mnist" || name == "cmnist") return DatasetKind::colored_mnist;
    if (name == "multicolor_mnist" || name == "multicolor") return DatasetKind::multicolor_mnist;
    if (name == "blobs") return DatasetKind::blobs;
    throw InvalidArgument("unknown dataset '" + name + "' (colored_mnist, multicolor_mnist, blobs)");
}

MetricsReport evaluate_model(const MlpModel& model, const BiasedDataset& test, const std::string& label) {
    std::vector<int> predictions;
    return evaluate_model(model, test, label, predictions);
}

RunSeeds derive_run_seeds(std::uint64_t s) {
    return {derive_seed(s, "data.train"), derive_seed(s, "data.subset"), derive_seed(s, "data.test"),
            derive_seed(s, "ecs.peer1"),  derive_seed(s, "ecs.peer2"),   derive_seed(s, "ecs.batch"),
            derive_seed(s, "train.init"), derive_seed(s, "train.batch")};
}

ExperimentData build_data(const DataOptions& o, const MnistSplits* mnist, std::uint64_t run_seed) {
    const RunSeeds seeds = derive_run_seeds(run_seed);
    if (o.kind == DatasetKind::blobs) {
        // Train and test share class means; only the sampling differs.
        BlobOptions bo;
        bo.mean_scale = o.blob_mean_scale;
        bo.bias_scale = o.blob_bias_scale;
        bo.means_seed = seeds.subset;
        ExperimentData d{synth_blobs(o.blob_train, o.blob_dim, o.rho, o.blob_classes, seeds.data, bo),
                         synth_blobs(o.blob_test, o.blob_dim, 1.0 / o.blob_classes, o.blob_classes,
                                     seeds.test, bo)};
        d.test.split = Split::test;
        return d;
    }
    if (!mnist) {
        throw InvalidArgument(to_string(o.kind) + " needs the MNIST files");
    }
    const RawImages train_raw = balanced_subset(mnist->train, o.train_per_class, seeds.subset);
    const RawImages test_raw = balanced_subset(mnist->test, o.test_per_class, derive_seed(seeds.subset, "test"));
    const Palette palette = Palette::standard();
    if (o.kind == DatasetKind::colored_mnist) {
        return {colorize(train_raw, o.rho, palette, seeds.data),
                make_unbiased_test(test_raw, palette, seeds.test, BiasLayout::tint)};
    }
    return {multi_colorize(train_raw, o.rho, o.rho_right, seeds.data, palette),
            make_unbiased_test(test_raw, palette, seeds.test, BiasLayout::halves)};
}

std::string to_string(ScorerKind kind) {
    switch (kind) {
    case ScorerKind::ecs: return "ecs";
    case ScorerKind::ecs_single: return "ecs_single";
    case ScorerKind::vanilla_model: return "vm";
    case ScorerKind::vanilla_ee: return "vm_ee";
    case ScorerKind::gce: return "gce";
    case ScorerKind::gce_ee: return "gce_ee";
    }
    return "ecs";
}

ScorerKind parse_scorer(const std::string& name) {
    for (ScorerKind k : {ScorerKind::ecs, ScorerKind::ecs_single, ScorerKind::vanilla_model,
                         ScorerKind::vanilla_ee, ScorerKind::gce, ScorerKind::gce_ee}) {
        if (to_string(k) == name) return k;
    }
    throw InvalidArgument("unknown scorer '" + name + "' (ecs, ecs_single, vm, vm_ee, gce, gce_ee)");
}

MethodSpec parse_method(const std::string& label) {
    MethodSpec m;
    m.label = label;
    std::string rest = label;
    if (const auto plus = rest.find('+'); plus != std::string::npos) {
        const std::string extra = rest.substr(plus + 1);
        if (extra != "ssl") {
            throw InvalidArgument("method '" + label + "': unknown suffix '+" + extra + "' (only +ssl)");
        }
        m.ssl = SslMode::rotation;
        rest.resize(plus);
    }
    std::string source;
    if (const auto at = rest.find('@'); at != std::string::npos) {
        source = rest.substr(at + 1);
        rest.resize(at);
    }
    m.strategy = parse_strategy(rest);
    if (source.empty()) {
        if (m.strategy == Strategy::rew || m.strategy == Strategy::ga) {
            throw InvalidArgument("method '" + label + "' needs a partition source (@ecs or @gt)");
        }
    } else if (source == "gt") {
        m.partition = PartitionSource::ground_truth;
    } else if (source != "ecs") {
        throw InvalidArgument("method '" + label + "': unknown partition source '" + source + "' (ecs, gt)");
    }
    return m;
}

void ExperimentSpec::validate() const {
    if (seeds.empty()) {
        throw InvalidArgument("an experiment needs at least one seed");
    }
    if (workers == 0) {
        throw InvalidArgument("worker count must be positive");
    }
    ecs.validate();
    train.validate();
}

std::uint64_t ExperimentSpec::hash() const {
    std::ostringstream os;
    os.precision(17);
    os << name << '|' << to_string(data.kind) << '|' << data.rho << '|' << data.rho_right << '|'
       << data.train_per_class << '|' << data.test_per_class << '|' << data.blob_train << '|' << data.blob_test
       << '|' << data.blob_dim << '|' << data.blob_classes << '|' << data.blob_mean_scale << '|'
       << data.blob_bias_scale << '|';
    for (auto s : seeds) os << s << ',';
    os << '|';
    for (auto s : scorers) os << to_string(s) << ',';
    os << '|';
    for (const auto& m : methods) os << m.label << ',';
    os << '|' << ecs.hash() << '|' << train.gamma << '|' << train.tau << '|' << train.epochs << '|'
       << train.batch_size << '|' << train.adam.learning_rate << '|' << train.ssl_weight << '|';
    for (auto h : train.hidden) os << h << ',';
    return fnv1a64(os.str());
}

ExperimentSpec experiment_from_config(const Config& cfg) {
    ExperimentSpec spec;
    spec.name = cfg.get_string("run.name", spec.name);
    DataOptions& d = spec.data;
    if (const auto k = cfg.find("data.source")) d.kind = parse_dataset_kind(*k);
    d.rho = cfg.get_double("data.rho", d.rho);
    d.rho_right = cfg.get_double("data.rho_right", d.rho_right);
    d.train_per_class = static_cast<std::size_t>(cfg.get_int("data.train_per_class", static_cast<std::int64_t>(d.train_per_class)));
    d.test_per_class = static_cast<std::size_t>(cfg.get_int("data.test_per_class", static_cast<std::int64_t>(d.test_per_class)));
    d.blob_train = static_cast<std::size_t>(cfg.get_int("data.blob_train", static_cast<std::int64_t>(d.blob_train)));
    d.blob_test = static_cast<std::size_t>(cfg.get_int("data.blob_test", static_cast<std::int64_t>(d.blob_test)));
    d.blob_dim = static_cast<std::size_t>(cfg.get_int("data.blob_dim", static_cast<std::int64_t>(d.blob_dim)));
    d.blob_classes = static_cast<int>(cfg.get_int("data.blob_classes", d.blob_classes));
    d.blob_mean_scale = cfg.get_double("data.blob_mean_scale", d.blob_mean_scale);
    d.blob_bias_scale = cfg.get_double("data.blob_bias_scale", d.blob_bias_scale);

    if (const auto seeds = cfg.get_list("run.seeds"); !seeds.empty()) {
        spec.seeds.clear();
        for (const auto& s : seeds) spec.seeds.push_back(std::stoull(s));
    } else if (cfg.contains("run.repeat")) {
        const auto repeat = cfg.get_int("run.repeat", 3);
        if (repeat < 1) throw InvalidArgument("run.repeat must be at least 1");
        spec.seeds.clear();
        for (std::int64_t s = 0; s < repeat; ++s) spec.seeds.push_back(static_cast<std::uint64_t>(s));
    }
    if (const auto scorers = cfg.get_list("run.scorers"); !scorers.empty()) {
        spec.scorers.clear();
        for (const auto& s : scorers) spec.scorers.push_back(parse_scorer(s));
    }
    for (const auto& m : cfg.get_list("run.methods")) spec.methods.push_back(parse_method(m));
    spec.output_dir = cfg.get_string("run.output_dir", "");
    spec.workers = static_cast<std::size_t>(cfg.get_int("run.workers", 1));
    spec.keep_iterations = cfg.get_bool("run.keep_iterations", spec.keep_iterations);
    spec.ecs = ecs_config_from(cfg, spec.ecs);
    spec.train = train_config_from(cfg, spec.train);
    spec.validate();
    return spec;
}

Aggregate aggregate(const std::vector<std::optional<double>>& values) {
    Aggregate a;
    double sum = 0.0;
    for (const auto& v : values) {
        if (v) {
            sum += *v;
            ++a.count;
        }
    }
    if (a.count == 0) return a;
    a.mean = sum / static_cast<double>(a.count);
    if (a.count > 1) {
        double ss = 0.0;
        for (const auto& v : values) {
            if (v) ss += (*v - a.mean) * (*v - a.mean);
        }
        a.stddev = std::sqrt(ss / static_cast<double>(a.count - 1));
    }
    return a;
}

const MethodRecord* RunRecord::find(const std::string& label) const {
    for (const auto& m : methods) {
        if (m.method.label == label) return &m;
    }
    return nullptr;
}

std::vector<const ScoringRecord*> RunRecord::scoring_for(ScorerKind kind) const {
    std::vector<const ScoringRecord*> out;
    for (const auto& s : scoring) {
        if (s.scorer == kind) out.push_back(&s);
    }
    return out;
}

void write_file_atomic(const fs::path& path, const std::string& content) {
    if (!path.parent_path().empty()) {
        fs::create_directories(path.parent_path());
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw Error("cannot write " + tmp.string());
        }
        out << content;
        if (!out) {
            throw Error("write failed for " + tmp.string());
        }
    }
    fs::rename(tmp, path);
}

RunRecord run_experiment(const ExperimentSpec& spec, const MnistSplits* mnist, std::ostream* log_stream) {
    spec.validate();
    RunLog log(log_stream);
    const fs::path out = spec.output_dir;
    if (!out.empty()) {
        fs::create_directories(out);
        write_file_atomic(out / "INCOMPLETE", "run '" + spec.name + "' has not finished\n");
    }

    std::vector<SeedOutcome> outcomes(spec.seeds.size());
    std::vector<std::exception_ptr> errors(spec.seeds.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < spec.seeds.size(); i = next++) {
            try {
                outcomes[i] = run_seed(spec, mnist, spec.seeds[i], log);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t n_workers = std::min(spec.workers, spec.seeds.size());
    if (n_workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    RunRecord record;
    record.name = spec.name;
    record.config_hash = spec.hash();
    for (auto& o : outcomes) {
        for (auto& s : o.scoring) record.scoring.push_back(std::move(s));
    }
    for (std::size_t m = 0; m < spec.methods.size(); ++m) {
        MethodRecord mr;
        mr.method = spec.methods[m];
        std::vector<std::optional<double>> unbiased, conflicting, group;
        for (auto& o : outcomes) {
            SeedRun& run = o.runs[m];
            unbiased.push_back(run.report.unbiased_accuracy);
            conflicting.push_back(run.report.conflicting_accuracy);
            group.push_back(run.report.multi ? run.report.multi->average : std::nullopt);
            mr.runs.push_back(std::move(run));
        }
        mr.unbiased = aggregate(unbiased);
        mr.conflicting = aggregate(conflicting);
        mr.group_average = aggregate(group);
        record.methods.push_back(std::move(mr));
    }

    if (!out.empty()) {
        write_summary_csv(out / "summary.csv", record);
        write_scoring_csv(out / "scoring.csv", record);
        write_report_json(out / "report.json", record);
        fs::remove(out / "INCOMPLETE");
    }
    return record;
}

void write_summary_csv(const fs::path& path, const RunRecord& record) {
    std::ostringstream os;
    std::vector<std::string> header{"method", "seed"};
    for (const auto& h : MetricsReport::csv_header()) header.push_back(h);
    header.push_back("rotation_accuracy");
    header.push_back("max_balance_residual");
    header.push_back("skipped_iterations");
    os << join_csv(header) << '\n';
    for (const auto& m : record.methods) {
        for (const auto& run : m.runs) {
            std::vector<std::string> row{m.method.label, std::to_string(run.seed)};
            for (const auto& f : run.report.csv_row()) row.push_back(f);
            row.push_back(format_number(run.rotation_accuracy));
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.3e", run.telemetry.max_balance_residual);
            row.push_back(buf);
            row.push_back(std::to_string(run.telemetry.skipped));
            os << join_csv(row) << '\n';
        }
    }
    os << '\n' << "method,statistic,unbiased_accuracy,conflicting_accuracy,group_average,runs\n";
    for (const auto& m : record.methods) {
        const auto opt = [](const Aggregate& a, bool sd) -> std::optional<double> {
            if (a.count == 0) return std::nullopt;
            return sd ? a.stddev : a.mean;
        };
        for (bool sd : {false, true}) {
            os << m.method.label << ',' << (sd ? "stddev" : "mean") << ',' << format_number(opt(m.unbiased, sd))
               << ',' << format_number(opt(m.conflicting, sd)) << ',' << format_number(opt(m.group_average, sd))
               << ',' << m.runs.size() << '\n';
        }
    }
    write_file_atomic(path, os.str());
}

void write_scoring_csv(const fs::path& path, const RunRecord& record) {
    std::ostringstream os;
    os << "seed,scorer,ap,tau,precision,recall,selected\n";
    for (const auto& s : record.scoring) {
        os << s.seed << ',' << to_string(s.scorer) << ',' << format_number(s.ap) << ',' << format_number(s.tau)
           << ',' << format_number(s.at_tau.precision) << ',' << format_number(s.at_tau.recall) << ','
           << s.at_tau.selected << '\n';
    }
    write_file_atomic(path, os.str());
}

void write_report_json(const fs::path& path, const RunRecord& record) {
    nlohmann::json j;
    j["name"] = record.name;
    j["config_hash"] = hex64(record.config_hash);
    nlohmann::json scoring = nlohmann::json::array();
    for (const auto& s : record.scoring) {
        scoring.push_back({{"seed", s.seed},
                           {"scorer", to_string(s.scorer)},
                           {"ap", s.ap},
                           {"tau", s.tau},
                           {"precision", s.at_tau.precision ? nlohmann::json(*s.at_tau.precision) : nlohmann::json()},
                           {"recall", s.at_tau.recall},
                           {"selected", s.at_tau.selected}});
    }
    j["scoring"] = scoring;
    nlohmann::json methods = nlohmann::json::array();
    for (const auto& m : record.methods) {
        nlohmann::json runs = nlohmann::json::array();
        for (const auto& r : m.runs) {
            nlohmann::json run = r.report.to_json();
            run["seed"] = r.seed;
            if (r.rotation_accuracy) run["rotation_accuracy"] = *r.rotation_accuracy;
            run["telemetry"] = {{"iterations", r.telemetry.total_iterations},
                                {"skipped", r.telemetry.skipped},
                                {"max_balance_residual", r.telemetry.max_balance_residual},
                                {"path", "runs/" + slug(m.method.label) + "/" + seed_dir(r.seed)}};
            runs.push_back(std::move(run));
        }
        methods.push_back({{"method", m.method.label},
                           {"runs", runs},
                           {"unbiased_accuracy", aggregate_json(m.unbiased)},
                           {"conflicting_accuracy", aggregate_json(m.conflicting)},
                           {"group_average", aggregate_json(m.group_average)}});
    }
    j["methods"] = methods;
    write_file_atomic(path, j.dump(2) + "\n");
}

IngestResult ingest(const DataOptions& options, std::uint64_t run_seed, const fs::path& data_dir,
                    const fs::path& cache_dir, std::ostream* log) {
    // Every data option is part of the key, so a changed rho never reuses a stale cache.
    std::ostringstream key;
    key.precision(17);
    key << options.rho << '|' << options.rho_right << '|' << options.train_per_class << '|' << options.test_per_class
        << '|' << options.blob_train << '|' << options.blob_test << '|' << options.blob_dim << '|'
        << options.blob_classes << '|' << options.blob_mean_scale << '|' << options.blob_bias_scale;
    const std::string stem = to_string(options.kind) + "_seed" + std::to_string(run_seed) + "_" +
                             hex64(fnv1a64(key.str())).substr(0, 8);
    IngestResult result{cache_dir / (stem + "_train.manifest"), cache_dir / (stem + "_test.manifest"), false};
    const std::string source = options.kind == DatasetKind::blobs ? "synthetic" : data_dir.string();

    if (fs::exists(result.train_manifest) && fs::exists(result.test_manifest)) {
        try {
            read_dataset_cache(result.train_manifest);
            read_dataset_cache(result.test_manifest);
            result.reused_cache = true;
            return result;
        } catch (const CacheError& e) {
            if (log) *log << "warning: " << e.what() << "; rebuilding the cache from the source files\n";
        }
    }
    std::optional<MnistSplits> mnist;
    if (options.kind != DatasetKind::blobs) {
        mnist = load_mnist(data_dir);
    }
    const ExperimentData d = build_data(options, mnist ? &*mnist : nullptr, run_seed);
    write_dataset_cache(d.train, source, cache_dir, stem + "_train");
    write_dataset_cache(d.test, source, cache_dir, stem + "_test");
    return result;
}

} // namespace debias
