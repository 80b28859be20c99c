#include "debias/ecs.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "debias/batching.hpp"
#include "debias/error.hpp"
#include "debias/rng.hpp"

namespace debias {

namespace {

constexpr Eigen::Index kScoringBlock = 2048;

MlpSpec peer_spec(const BiasedDataset& train, const EcsConfig& cfg) {
    return MlpSpec{train.dim(), cfg.hidden, static_cast<std::size_t>(train.num_classes), false};
}

std::vector<int> batch_labels(const BiasedDataset& ds, std::span<const std::size_t> rows) {
    return ds.gather_targets(rows);
}

void guard_finite(const MlpModel& model, std::size_t iteration, const char* who) {
    if (!model.params().all_finite()) {
        throw DivergenceError(std::string(who) + " parameters became non-finite at iteration " +
                                  std::to_string(iteration),
                              iteration);
    }
}

/// Overflowing activations show up in the logits before the parameters.
void guard_logits(const ForwardPass& pass, std::size_t iteration, const char* who) {
    if (!pass.logits.allFinite()) {
        throw DivergenceError(std::string(who) + " logits became non-finite at iteration " +
                                  std::to_string(iteration),
                              iteration);
    }
}

/// Checkpoint weight of the checkpoint closing iteration t (0-based), or 0
/// when no checkpoint closes there.
double checkpoint_weight(std::size_t t, std::size_t total, std::size_t interval) {
    const std::size_t done = t + 1;
    if (done % interval == 0) {
        return static_cast<double>(interval) / static_cast<double>(total);
    }
    if (done == total) {
        return static_cast<double>(total % interval) / static_cast<double>(total);
    }
    return 0.0;
}

void require_trainable(const BiasedDataset& train, const EcsConfig& cfg) {
    cfg.validate();
    if (train.size() == 0) {
        throw InvalidArgument("scoring needs a non-empty training set");
    }
    if (train.split != Split::train) {
        throw InvalidArgument("scoring runs on the train split");
    }
}

} // namespace

void EcsConfig::validate() const {
    if (!(eta > 0.0 && eta < 1.0)) {
        throw InvalidArgument("eta must lie in (0, 1)");
    }
    if (peer_model && peer_seed_1 == peer_seed_2) {
        throw InvalidArgument("the two peers need distinct seeds");
    }
    if (batch_size == 0) {
        throw InvalidArgument("batch size must be positive");
    }
    if (iterations == 0 && epochs == 0) {
        throw InvalidArgument("need at least one epoch or iteration");
    }
    if (!(warmup_epochs >= 0.0)) {
        throw InvalidArgument("warm-up length must be non-negative");
    }
    if (iterations != 0 && checkpoint_interval > iterations) {
        throw InvalidArgument("checkpoint interval exceeds total iterations");
    }
}

std::size_t EcsConfig::total_iterations(std::size_t n) const {
    return iterations != 0 ? iterations : epochs * (n / batch_size);
}

std::size_t EcsConfig::interval(std::size_t n) const {
    const std::size_t t = checkpoint_interval != 0 ? checkpoint_interval : n / batch_size;
    return std::max<std::size_t>(1, std::min(t, total_iterations(n)));
}

std::size_t EcsConfig::warmup_iterations(std::size_t n) const {
    return static_cast<std::size_t>(std::llround(warmup_epochs * static_cast<double>(n / batch_size)));
}

std::uint64_t EcsConfig::hash() const {
    std::ostringstream os;
    os.precision(17);
    os << eta << '|' << epochs << '|' << iterations << '|' << checkpoint_interval << '|' << batch_size
       << '|' << adam.learning_rate << '|' << adam.beta1 << '|' << adam.beta2 << '|' << adam.epsilon
       << '|';
    for (auto h : hidden) {
        os << h << ',';
    }
    os << '|' << peer_seed_1 << '|' << peer_seed_2 << '|' << batch_seed << '|' << confident_picking
       << peer_model << epoch_ensemble << '|' << warmup_epochs;
    return fnv1a64(os.str());
}

ScoreAccumulator::ScoreAccumulator(std::size_t n) : sums_(n, 0.0), weights_(n, 0.0) {}

void ScoreAccumulator::add_checkpoint(std::span<const double> complements, double weight) {
    if (complements.size() != sums_.size()) {
        throw DimensionError("checkpoint covers " + std::to_string(complements.size()) +
                             " samples, expected " + std::to_string(sums_.size()));
    }
    if (!(weight >= 0.0)) {
        throw InvalidArgument("checkpoint weight must be non-negative");
    }
    for (std::size_t i = 0; i < sums_.size(); ++i) {
        sums_[i] += weight * complements[i];
        weights_[i] += weight;
    }
    ++checkpoints_;
}

BCScoreTable ScoreAccumulator::finalize() const {
    BCScoreTable out;
    out.scores.resize(sums_.size());
    out.weights = weights_;
    out.checkpoints = checkpoints_;
    for (std::size_t i = 0; i < sums_.size(); ++i) {
        if (weights_[i] <= 0.0) {
            throw Error("sample " + std::to_string(i) + " accrued no checkpoint weight");
        }
        out.scores[i] = std::clamp(sums_[i] / weights_[i], 0.0, 1.0);
    }
    return out;
}

Cluster classify(double p1, double p2, double eta) {
    const bool c1 = p1 > eta;
    const bool c2 = p2 > eta;
    if (c1 && c2) return Cluster::both_confident;
    if (c1) return Cluster::only_first;
    if (c2) return Cluster::only_second;
    return Cluster::both_unconfident;
}

std::vector<Cluster> classify_clusters(std::span<const double> p1, std::span<const double> p2,
                                       double eta) {
    if (p1.size() != p2.size()) {
        throw DimensionError("peer probability vectors differ in length");
    }
    std::vector<Cluster> out(p1.size());
    for (std::size_t i = 0; i < p1.size(); ++i) {
        out[i] = classify(p1[i], p2[i], eta);
    }
    return out;
}

PeerCoefficients peer_coefficients(Cluster cluster) {
    switch (cluster) {
    case Cluster::both_confident: return {1.0, 1.0};
    case Cluster::only_first: return {-1.0, 0.0};
    case Cluster::only_second: return {0.0, -1.0};
    case Cluster::both_unconfident: return {0.0, 0.0};
    }
    return {0.0, 0.0};
}

std::vector<double> label_complements(const MlpModel& model, const Matrix& features,
                                      std::span<const int> targets) {
    const Eigen::Index n = features.rows();
    std::vector<double> out(static_cast<std::size_t>(n));
    for (Eigen::Index start = 0; start < n; start += kScoringBlock) {
        const Eigen::Index rows = std::min(kScoringBlock, n - start);
        const Matrix probs = softmax_rows(forward(model, features.middleRows(start, rows)));
        for (Eigen::Index r = 0; r < rows; ++r) {
            const auto i = static_cast<std::size_t>(start + r);
            out[i] = label_complement(probs, r, targets[i]);
        }
    }
    return out;
}

ScoringResult ecs_train_and_score(const BiasedDataset& train, const EcsConfig& cfg) {
    require_trainable(train, cfg);
    const std::size_t n = train.size();
    const std::size_t total = cfg.total_iterations(n);
    const std::size_t interval = cfg.interval(n);
    const std::size_t warmup = cfg.confident_picking ? cfg.warmup_iterations(n) : 0;
    const MlpSpec spec = peer_spec(train, cfg);

    MlpModel first = MlpModel::initialize(spec, cfg.peer_seed_1);
    AdamState first_opt = AdamState::for_model(first, cfg.adam);
    std::optional<MlpModel> second;
    std::optional<AdamState> second_opt;
    if (cfg.peer_model) {
        second = MlpModel::initialize(spec, cfg.peer_seed_2);
        second_opt = AdamState::for_model(*second, cfg.adam);
    }

    EpochBatcher batches(n, cfg.batch_size, cfg.batch_seed);
    ScoreAccumulator accumulator(n);
    ScoringResult result;
    std::vector<double> c1(cfg.batch_size), c2(cfg.batch_size);

    auto score_now = [&]() {
        std::vector<double> comp = label_complements(first, train.features, train.targets);
        if (second) {
            const std::vector<double> comp2 = label_complements(*second, train.features, train.targets);
            for (std::size_t i = 0; i < n; ++i) {
                comp[i] = 0.5 * (comp[i] + comp2[i]);
            }
        }
        return comp;
    };

    for (std::size_t t = 0; t < total; ++t) {
        const auto rows = batches.next();
        const Matrix x = train.gather(rows);
        const std::vector<int> y = batch_labels(train, rows);

        const bool picking = cfg.confident_picking && t >= warmup;
        const ForwardPass pass1 = forward_pass(first, x);
        guard_logits(pass1, t, "peer 1");
        const Matrix probs1 = softmax_rows(pass1.logits);
        if (second) {
            const ForwardPass pass2 = forward_pass(*second, x);
            guard_logits(pass2, t, "peer 2");
            const Matrix probs2 = softmax_rows(pass2.logits);
            for (std::size_t j = 0; j < rows.size(); ++j) {
                const auto r = static_cast<Eigen::Index>(j);
                if (picking) {
                    const Cluster k = classify(probs1(r, y[j]), probs2(r, y[j]), cfg.eta);
                    ++result.trace.cluster_totals[static_cast<std::size_t>(k) - 1];
                    const PeerCoefficients pc = peer_coefficients(k);
                    c1[j] = pc.first;
                    c2[j] = pc.second;
                } else {
                    c1[j] = 1.0;
                    c2[j] = 1.0;
                }
            }
            const BatchGrad g2 = signed_cross_entropy_backward(*second, pass2, probs2, y, c2);
            adam_step(*second, g2.params, *second_opt);
        } else {
            for (std::size_t j = 0; j < rows.size(); ++j) {
                const auto r = static_cast<Eigen::Index>(j);
                c1[j] = (!picking || probs1(r, y[j]) > cfg.eta) ? 1.0 : 0.0;
            }
        }
        const BatchGrad g1 = signed_cross_entropy_backward(first, pass1, probs1, y, c1);
        adam_step(first, g1.params, first_opt);

        guard_finite(first, t, "peer 1");
        if (second) {
            guard_finite(*second, t, "peer 2");
        }

        if (cfg.epoch_ensemble) {
            const double w = checkpoint_weight(t, total, interval);
            if (w > 0.0) {
                accumulator.add_checkpoint(score_now(), w);
            }
        }
    }

    result.trace.iterations = total;
    if (cfg.epoch_ensemble) {
        result.table = accumulator.finalize();
    } else {
        accumulator.add_checkpoint(score_now(), 1.0);
        result.table = accumulator.finalize();
    }
    result.trace.checkpoints = result.table.checkpoints;
    return result;
}

BCScoreTable vanilla_score(const BiasedDataset& train, const EcsConfig& cfg, BCScoreTable* ensemble) {
    require_trainable(train, cfg);
    const std::size_t n = train.size();
    const std::size_t total = cfg.total_iterations(n);
    const std::size_t interval = cfg.interval(n);
    MlpModel model = MlpModel::initialize(peer_spec(train, cfg), cfg.peer_seed_1);
    AdamState opt = AdamState::for_model(model, cfg.adam);
    EpochBatcher batches(n, cfg.batch_size, cfg.batch_seed);
    const std::vector<double> ones(cfg.batch_size, 1.0);
    ScoreAccumulator accumulator(n);

    for (std::size_t t = 0; t < total; ++t) {
        const auto rows = batches.next();
        const ForwardPass pass = forward_pass(model, train.gather(rows));
        guard_logits(pass, t, "model");
        const BatchGrad g = weighted_cross_entropy_backward(model, pass, batch_labels(train, rows), ones, +1);
        adam_step(model, g.params, opt);
        guard_finite(model, t, "model");
        if (ensemble) {
            const double w = checkpoint_weight(t, total, interval);
            if (w > 0.0) {
                accumulator.add_checkpoint(label_complements(model, train.features, train.targets), w);
            }
        }
    }
    if (ensemble) {
        *ensemble = accumulator.finalize();
    }
    ScoreAccumulator last(n);
    last.add_checkpoint(label_complements(model, train.features, train.targets), 1.0);
    return last.finalize();
}

ScoringResult gce_score(const BiasedDataset& train, const EcsConfig& cfg, bool use_epoch_ensemble,
                        double q) {
    require_trainable(train, cfg);
    if (!(q > 0.0 && q <= 1.0)) {
        throw InvalidArgument("GCE exponent q must lie in (0, 1]");
    }
    const std::size_t n = train.size();
    const std::size_t total = cfg.total_iterations(n);
    const std::size_t interval = cfg.interval(n);
    MlpModel model = MlpModel::initialize(peer_spec(train, cfg), cfg.peer_seed_1);
    AdamState opt = AdamState::for_model(model, cfg.adam);
    EpochBatcher batches(n, cfg.batch_size, cfg.batch_seed);
    ScoreAccumulator accumulator(n);

    for (std::size_t t = 0; t < total; ++t) {
        const auto rows = batches.next();
        const ForwardPass pass = forward_pass(model, train.gather(rows));
        guard_logits(pass, t, "model");
        const BatchGrad g = gce_backward(model, pass, batch_labels(train, rows), q);
        adam_step(model, g.params, opt);
        guard_finite(model, t, "model");
        if (use_epoch_ensemble) {
            const double w = checkpoint_weight(t, total, interval);
            if (w > 0.0) {
                accumulator.add_checkpoint(label_complements(model, train.features, train.targets), w);
            }
        }
    }
    ScoringResult result;
    result.trace.iterations = total;
    ScoreAccumulator last(n);
    last.add_checkpoint(label_complements(model, train.features, train.targets), 1.0);
    result.final_checkpoint = last.finalize();
    result.table = use_epoch_ensemble ? accumulator.finalize() : *result.final_checkpoint;
    result.trace.checkpoints = result.table.checkpoints;
    return result;
}

Partition Partition::from_flags(std::vector<std::uint8_t> conflicting) {
    Partition p;
    p.conflicting = std::move(conflicting);
    for (auto f : p.conflicting) {
        (f ? p.n_conflicting : p.n_aligned) += 1;
    }
    p.degenerate = p.n_conflicting == 0 || p.n_aligned == 0;
    return p;
}

Partition threshold_scores(const BCScoreTable& table, double tau) {
    if (!(tau > 0.0 && tau < 1.0)) {
        throw InvalidArgument("tau must lie in (0, 1)");
    }
    std::vector<std::uint8_t> flags(table.size());
    for (std::size_t i = 0; i < table.size(); ++i) {
        flags[i] = table.scores[i] >= tau ? 1 : 0;
    }
    return Partition::from_flags(std::move(flags));
}

void write_score_table(const std::filesystem::path& path, const BCScoreTable& table,
                       const std::vector<std::pair<std::string, std::string>>& header) {
    if (!path.parent_path().empty()) {
        std::filesystem::create_directories(path.parent_path());
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) {
            throw Error("cannot write " + tmp.string());
        }
        for (const auto& [key, value] : header) {
            out << "# " << key << ": " << value << '\n';
        }
        out << "# checkpoints: " << table.checkpoints << '\n';
        char buf[64];
        for (std::size_t i = 0; i < table.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%zu %.17g %.17g\n", i, table.scores[i],
                          table.weights.empty() ? 1.0 : table.weights[i]);
            out << buf;
        }
    }
    std::filesystem::rename(tmp, path);
}

BCScoreTable read_score_table(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open score table " + path.string());
    }
    BCScoreTable table;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        if (line[0] == '#') {
            const std::string key = "# checkpoints: ";
            if (line.rfind(key, 0) == 0) {
                table.checkpoints = std::stoull(line.substr(key.size()));
            }
            continue;
        }
        std::istringstream row(line);
        std::size_t index = 0;
        double score = 0.0, weight = 0.0;
        if (!(row >> index >> score >> weight) || index != table.scores.size()) {
            throw FormatError("malformed score row in " + path.string() + ": " + line);
        }
        table.scores.push_back(score);
        table.weights.push_back(weight);
    }
    return table;
}

} // namespace debias
