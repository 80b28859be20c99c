#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "debias/data.hpp"
#include "debias/ecs.hpp"
#include "debias/nn.hpp"

namespace debias {

enum class Strategy { vanilla, rew, erew, ga };
enum class PartitionSource { scores, ground_truth };
enum class SslMode { off, rotation };

std::string to_string(Strategy strategy);
Strategy parse_strategy(const std::string& name);

/// Stage II settings.
struct TrainConfig {
    Strategy strategy = Strategy::vanilla;
    double gamma = 1.6;
    double tau = 0.8;
    std::size_t epochs = 50;
    std::size_t batch_size = 256;
    AdamSettings adam;
    std::vector<std::size_t> hidden{100, 100, 100};
    PartitionSource partition_source = PartitionSource::scores;
    SslMode ssl = SslMode::off;
    double ssl_weight = 1.0;
    /// Builds the rotation head even with SSL off; it then stays untouched.
    bool attach_rotation_head = false;
    std::uint64_t init_seed = 11;
    std::uint64_t batch_seed = 12;
    /// Record one telemetry row per iteration.
    bool record_iterations = true;

    void validate() const;
};

/// Gradient contribution 2 - 2p: the L1 norm of the cross-entropy logit
/// gradient of a sample whose label probability is p.
double grad_contribution(double p_of_label);

/// Static aligned-sample weight N_conflicting / (gamma * N_aligned).
double rew_weight(std::size_t n_conflicting, std::size_t n_aligned, double gamma);

/// r = sum_conflicting (1 - p) / (gamma * sum_aligned (1 - p)), with 1 - p
/// taken as the label complement of each row. Empty side gives nullopt.
std::optional<double> ga_ratio(const Matrix& probs, std::span<const int> labels,
                               std::span<const std::uint8_t> conflicting, double gamma);

struct IterationLossInputs {
    Strategy strategy = Strategy::vanilla;
    std::span<const std::uint8_t> conflicting; // pseudo partition flags of the batch
    std::span<const double> scores;            // erew only
    double aligned_weight = 1.0;               // rew: static weight, ga: r
};

/// Per-sample weights for weighted_cross_entropy_backward.
std::vector<double> build_iteration_loss(const IterationLossInputs& in, std::size_t batch);

/// Exact rotation of a channel-major C x H x W image by k quarter turns.
/// For k = 1 the source pixel (r, c) lands on (c, H - 1 - r).
std::vector<double> rotate(std::span<const double> image, const ImageShape& shape, int k);

/// Stacks the four rotations of every row: rows [0, B) are k = 0,
/// [B, 2B) k = 1, and so on.
Matrix rotated_batch(const Matrix& batch, const ImageShape& shape, std::vector<int>& labels);

/// Mean 4-way cross-entropy over all rotations of the batch, scaled by
/// `weight`. Gradients reach the trunk and the rotation head only.
BatchGrad rotation_loss(const MlpModel& model, const Matrix& batch, const ImageShape& shape,
                        double weight = 1.0);

/// Fraction of (sample, rotation) pairs whose rotation the head recovers.
double rotation_accuracy(const MlpModel& model, const Matrix& features, const ImageShape& shape);

struct IterationRecord {
    std::size_t iteration = 0;
    /// Contributions summed per ground-truth group (zero when flags unknown).
    double g_aligned = 0.0;
    double g_conflicting = 0.0;
    /// The same sums over the partition the loss used.
    double pg_aligned = 0.0;
    double pg_conflicting = 0.0;
    /// Aligned-sample weight applied (r for GA, static weight for Rew, 1 otherwise).
    double ratio = 1.0;
    bool skipped = false;
    /// |r * pg_aligned - pg_conflicting / gamma| relative to the larger term (GA only).
    double balance_residual = 0.0;
    double loss = 0.0;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    std::optional<double> unbiased_accuracy;
    std::optional<double> accuracy;
    std::optional<double> aligned_accuracy;
    std::optional<double> conflicting_accuracy;
};

struct TrainTelemetry {
    std::vector<IterationRecord> iterations;
    std::vector<EpochRecord> epochs;
    std::size_t total_iterations = 0;
    std::size_t skipped = 0;
    /// Largest balance residual over non-skipped GA iterations.
    double max_balance_residual = 0.0;
};

struct TrainInputs {
    const BiasedDataset* train = nullptr;
    /// Required for rew and ga.
    const Partition* partition = nullptr;
    /// Required for erew.
    const BCScoreTable* scores = nullptr;
    /// Evaluated after every epoch when set.
    const BiasedDataset* eval = nullptr;
};

struct TrainResult {
    MlpModel model;
    TrainTelemetry telemetry;
};

TrainResult train(const TrainInputs& inputs, const TrainConfig& cfg);

/// Unbiased/plain/aligned/conflicting accuracy on a dataset (attribute 0).
EpochRecord evaluate_epoch(const MlpModel& model, const BiasedDataset& eval);

/// One row per iteration: iter g_aligned g_conflicting r skipped (plus the
/// partition sums and residual).
void write_telemetry(const std::filesystem::path& path, const TrainTelemetry& telemetry);
void write_epoch_trace(const std::filesystem::path& path, const TrainTelemetry& telemetry);

} // namespace debias
