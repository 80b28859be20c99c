#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "debias/data.hpp"
#include "debias/nn.hpp"

namespace debias {

/// Stage I settings. Zero `iterations` means `epochs` full passes, zero
/// `checkpoint_interval` means one epoch (floor(N / B) iterations).
struct EcsConfig {
    double eta = 0.5;
    std::size_t epochs = 30;
    std::size_t iterations = 0;
    std::size_t checkpoint_interval = 0;
    std::size_t batch_size = 256;
    AdamSettings adam;
    std::vector<std::size_t> hidden{100, 100, 100};
    std::uint64_t peer_seed_1 = 1;
    std::uint64_t peer_seed_2 = 2;
    std::uint64_t batch_seed = 3;
    /// Leading iterations in which every sample descends on every model,
    /// expressed in epochs. Freshly initialised models sit near 1/C and would
    /// otherwise never leave the discarded cluster.
    double warmup_epochs = 1.0;

    // Ablation switches. All on is the full method.
    bool confident_picking = true;
    bool peer_model = true;
    bool epoch_ensemble = true;

    void validate() const;
    std::size_t total_iterations(std::size_t n) const;
    std::size_t interval(std::size_t n) const;
    std::size_t warmup_iterations(std::size_t n) const;
    /// FNV-1a of every field, for score table headers.
    std::uint64_t hash() const;
};

/// Finalized bias-conflicting scores plus the weight each sample accrued.
struct BCScoreTable {
    std::vector<double> scores;
    std::vector<double> weights;
    std::size_t checkpoints = 0;

    std::size_t size() const { return scores.size(); }
};

/// Weighted running mean of per-checkpoint (1 - mean peer probability) terms.
class ScoreAccumulator {
public:
    explicit ScoreAccumulator(std::size_t n);

    /// `complements[i]` is 1 - mean peer probability of sample i's label.
    void add_checkpoint(std::span<const double> complements, double weight);
    BCScoreTable finalize() const;

private:
    std::vector<double> sums_;
    std::vector<double> weights_;
    std::size_t checkpoints_ = 0;
};

enum class Cluster : std::uint8_t {
    both_confident = 1,  // O1: both peers descend
    both_unconfident = 2, // O2: discarded
    only_first = 3,      // O3: peer 1 ascends
    only_second = 4,     // O4: peer 2 ascends
};

Cluster classify(double p1, double p2, double eta);
std::vector<Cluster> classify_clusters(std::span<const double> p1, std::span<const double> p2,
                                       double eta);

/// Per-sample loss coefficients for the two peers implied by a cluster.
struct PeerCoefficients {
    double first;
    double second;
};
PeerCoefficients peer_coefficients(Cluster cluster);

struct EcsTrace {
    std::size_t iterations = 0;
    std::size_t checkpoints = 0;
    /// Cluster sizes summed over all iterations, indexed O1..O4.
    std::array<std::size_t, 4> cluster_totals{};
};

struct ScoringResult {
    BCScoreTable table;
    /// Single-checkpoint scores from the final models (set by scorers that
    /// can report both from one trajectory).
    std::optional<BCScoreTable> final_checkpoint;
    EcsTrace trace;
};

/// Trains the auxiliary peers on `train` and scores every sample.
ScoringResult ecs_train_and_score(const BiasedDataset& train, const EcsConfig& cfg);

/// Plain cross-entropy on all samples with one model (peer_seed_1); the table
/// holds final-checkpoint scores and `final_checkpoint` is unset. When
/// `ensemble` is non-null it receives the epoch-ensembled scores of the same
/// trajectory.
BCScoreTable vanilla_score(const BiasedDataset& train, const EcsConfig& cfg,
                           BCScoreTable* ensemble = nullptr);

/// One model trained with generalized cross entropy. `table` is the
/// epoch-ensemble when requested, and `final_checkpoint` always holds the
/// final-model scores.
ScoringResult gce_score(const BiasedDataset& train, const EcsConfig& cfg, bool use_epoch_ensemble,
                        double q = 0.7);

/// 1 - p(y|model) for every sample, evaluated in blocks.
std::vector<double> label_complements(const MlpModel& model, const Matrix& features,
                                      std::span<const int> targets);

struct Partition {
    std::vector<std::uint8_t> conflicting;
    std::size_t n_conflicting = 0;
    std::size_t n_aligned = 0;
    /// Everything landed on one side.
    bool degenerate = false;

    std::size_t size() const { return conflicting.size(); }
    static Partition from_flags(std::vector<std::uint8_t> conflicting);
};

/// Conflicting iff score >= tau.
Partition threshold_scores(const BCScoreTable& table, double tau);

/// Text table: `#` header lines (key: value) then one `index score` row each.
void write_score_table(const std::filesystem::path& path, const BCScoreTable& table,
                       const std::vector<std::pair<std::string, std::string>>& header);
BCScoreTable read_score_table(const std::filesystem::path& path);

} // namespace debias
