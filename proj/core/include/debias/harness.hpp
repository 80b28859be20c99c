#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "debias/config.hpp"
#include "debias/data.hpp"
#include "debias/ecs.hpp"
#include "debias/metrics.hpp"
#include "debias/trainers.hpp"

namespace debias {

/// Environment variable naming the directory with the MNIST IDX files.
inline constexpr const char* kDataDirEnv = "DEBIAS_DATA_DIR";

/// DEBIAS_DATA_DIR, else the configured directory, else ./data/mnist.
std::filesystem::path resolve_data_dir(const std::optional<std::string>& configured = std::nullopt);

struct MnistFiles {
    std::filesystem::path train_images, train_labels, test_images, test_labels;
};
MnistFiles mnist_files(const std::filesystem::path& dir);

struct MnistSplits {
    RawImages train;
    RawImages test;
};

/// Loads both splits; a missing file raises an error that lists every
/// expected path and how to fetch them.
MnistSplits load_mnist(const std::filesystem::path& dir);

enum class DatasetKind { colored_mnist, multicolor_mnist, blobs };
std::string to_string(DatasetKind kind);
DatasetKind parse_dataset_kind(const std::string& name);

struct DataOptions {
    DatasetKind kind = DatasetKind::colored_mnist;
    double rho = 0.98;
    double rho_right = 0.95; // multicolor only
    std::size_t train_per_class = 1000;
    std::size_t test_per_class = 500;
    // blobs
    std::size_t blob_train = 2000;
    std::size_t blob_test = 2000;
    std::size_t blob_dim = 10;
    int blob_classes = 5;
    double blob_mean_scale = 0.8;
    double blob_bias_scale = 2.0;
};

struct ExperimentData {
    BiasedDataset train;
    BiasedDataset test;
};

/// Builds the train split and its unbiased test split for one run seed.
/// `mnist` is required for the image datasets.
ExperimentData build_data(const DataOptions& options, const MnistSplits* mnist, std::uint64_t run_seed);

/// Stage I scorers.
enum class ScorerKind { ecs, ecs_single, vanilla_model, vanilla_ee, gce, gce_ee };
std::string to_string(ScorerKind kind);
ScorerKind parse_scorer(const std::string& name);

/// One Stage II configuration. Labels look like `ga@ecs`, `rew@gt`,
/// `erew@ecs`, `ga@ecs+ssl` or `vanilla`.
struct MethodSpec {
    std::string label;
    Strategy strategy = Strategy::vanilla;
    PartitionSource partition = PartitionSource::scores;
    SslMode ssl = SslMode::off;
};
MethodSpec parse_method(const std::string& label);

struct ExperimentSpec {
    std::string name = "experiment";
    DataOptions data;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    /// Scorers reported in scoring.csv; the ECS scorer always runs when a
    /// method consumes scores.
    std::vector<ScorerKind> scorers{ScorerKind::ecs};
    std::vector<MethodSpec> methods;
    EcsConfig ecs;
    TrainConfig train;
    /// Empty: nothing is written.
    std::filesystem::path output_dir;
    std::size_t workers = 1;
    /// Keep per-iteration telemetry in memory and on disk.
    bool keep_iterations = true;

    void validate() const;
    /// Hash of everything that influences the emitted numbers.
    std::uint64_t hash() const;
};

/// Reads an ExperimentSpec from `data.*`, `run.*`, `ecs.*` and `train.*` keys.
ExperimentSpec experiment_from_config(const Config& cfg);

/// Seeds of one run, all derived from the run seed.
struct RunSeeds {
    std::uint64_t data, subset, test;
    std::uint64_t peer1, peer2, ecs_batch;
    std::uint64_t init, train_batch;
};
RunSeeds derive_run_seeds(std::uint64_t run_seed);

/// Test-split metrics of a trained model: unbiased, aligned and conflicting
/// accuracy, plus the multi-bias groups or binary fairness when they apply.
MetricsReport evaluate_model(const MlpModel& model, const BiasedDataset& test, const std::string& label);

struct ScoringRecord {
    std::uint64_t seed = 0;
    ScorerKind scorer = ScorerKind::ecs;
    double ap = 0.0;
    double tau = 0.8;
    PrecisionRecall at_tau;
    std::vector<PrPoint> curve;
};

struct SeedRun {
    std::uint64_t seed = 0;
    MetricsReport report;
    std::optional<double> rotation_accuracy;
    TrainTelemetry telemetry;
    /// Final-model predictions on the test split.
    std::vector<int> predictions;
};

struct Aggregate {
    double mean = 0.0;
    double stddev = 0.0; // sample standard deviation, 0 for a single run
    std::size_t count = 0;
};
/// Mean and sample standard deviation of the present values.
Aggregate aggregate(const std::vector<std::optional<double>>& values);

struct MethodRecord {
    MethodSpec method;
    std::vector<SeedRun> runs; // in seed order
    Aggregate unbiased;
    Aggregate conflicting;
    Aggregate group_average; // multicolor only
};

struct RunRecord {
    std::string name;
    std::uint64_t config_hash = 0;
    std::vector<ScoringRecord> scoring; // seed-major, scorer order of the run
    std::vector<MethodRecord> methods;

    const MethodRecord* find(const std::string& label) const;
    std::vector<const ScoringRecord*> scoring_for(ScorerKind kind) const;
};

/// Stage I once per seed, then every method on the shared scores. Files go to
/// spec.output_dir with an INCOMPLETE marker until the run finishes.
RunRecord run_experiment(const ExperimentSpec& spec, const MnistSplits* mnist, std::ostream* log = nullptr);

void write_summary_csv(const std::filesystem::path& path, const RunRecord& record);
void write_scoring_csv(const std::filesystem::path& path, const RunRecord& record);
void write_report_json(const std::filesystem::path& path, const RunRecord& record);

/// Writes `content` to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

struct IngestResult {
    std::filesystem::path train_manifest;
    std::filesystem::path test_manifest;
    bool reused_cache = false;
};

/// Builds (or reuses) the cached train/test datasets of one run seed. A cache
/// whose checksum no longer matches is rebuilt with a warning on `log`.
IngestResult ingest(const DataOptions& options, std::uint64_t run_seed, const std::filesystem::path& data_dir,
                    const std::filesystem::path& cache_dir, std::ostream* log = nullptr);

} // namespace debias
