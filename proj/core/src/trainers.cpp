#include "debias/trainers.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "debias/batching.hpp"
#include "debias/error.hpp"
#include "debias/metrics.hpp"

namespace debias {

namespace {

int bias_values(const BiasedDataset& ds) {
    return ds.palette.size() > 0 ? static_cast<int>(ds.palette.size()) : ds.num_classes;
}

void guard_finite(const MlpModel& model, std::size_t iteration) {
    if (!model.params().all_finite()) {
        throw DivergenceError("parameters became non-finite at iteration " + std::to_string(iteration),
                              iteration);
    }
}

void guard_logits(const ForwardPass& pass, std::size_t iteration) {
    if (!pass.logits.allFinite()) {
        throw DivergenceError("logits became non-finite at iteration " + std::to_string(iteration),
                              iteration);
    }
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::ofstream open_for_write(const std::filesystem::path& path) {
    if (!path.parent_path().empty()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw Error("cannot write " + path.string());
    }
    return out;
}

} // namespace

std::string to_string(Strategy strategy) {
    switch (strategy) {
    case Strategy::vanilla: return "vanilla";
    case Strategy::rew: return "rew";
    case Strategy::erew: return "erew";
    case Strategy::ga: return "ga";
    }
    return "vanilla";
}

Strategy parse_strategy(const std::string& name) {
    if (name == "vanilla") return Strategy::vanilla;
    if (name == "rew") return Strategy::rew;
    if (name == "erew") return Strategy::erew;
    if (name == "ga") return Strategy::ga;
    throw InvalidArgument("unknown strategy '" + name + "' (vanilla, rew, erew, ga)");
}

void TrainConfig::validate() const {
    if (!(gamma > 0.0) || !std::isfinite(gamma)) {
        throw InvalidArgument("gamma must be a positive finite number");
    }
    if (!(tau > 0.0 && tau < 1.0)) {
        throw InvalidArgument("tau must lie in (0, 1)");
    }
    if (epochs == 0 || batch_size == 0) {
        throw InvalidArgument("epochs and batch size must be positive");
    }
    if (ssl == SslMode::rotation && !(ssl_weight >= 0.0)) {
        throw InvalidArgument("ssl weight must be non-negative");
    }
}

double grad_contribution(double p_of_label) {
    if (!(p_of_label >= 0.0 && p_of_label <= 1.0)) {
        throw InvalidArgument("probability outside [0, 1]");
    }
    return 2.0 - 2.0 * p_of_label;
}

double rew_weight(std::size_t n_conflicting, std::size_t n_aligned, double gamma) {
    if (n_aligned == 0) {
        throw InvalidArgument("no aligned samples to reweight; train with the vanilla strategy instead");
    }
    if (!(gamma > 0.0)) {
        throw InvalidArgument("gamma must be positive");
    }
    return static_cast<double>(n_conflicting) / (gamma * static_cast<double>(n_aligned));
}

std::optional<double> ga_ratio(const Matrix& probs, std::span<const int> labels,
                               std::span<const std::uint8_t> conflicting, double gamma) {
    if (static_cast<std::size_t>(probs.rows()) != labels.size() || labels.size() != conflicting.size()) {
        throw DimensionError("ga_ratio inputs differ in length");
    }
    double sum_conf = 0.0, sum_align = 0.0;
    std::size_t n_conf = 0, n_align = 0;
    for (std::size_t j = 0; j < labels.size(); ++j) {
        const double c = label_complement(probs, static_cast<Eigen::Index>(j), labels[j]);
        if (conflicting[j]) {
            sum_conf += c;
            ++n_conf;
        } else {
            sum_align += c;
            ++n_align;
        }
    }
    if (n_conf == 0 || n_align == 0 || !(sum_align > 0.0)) {
        return std::nullopt;
    }
    return sum_conf / (gamma * sum_align);
}

std::vector<double> build_iteration_loss(const IterationLossInputs& in, std::size_t batch) {
    std::vector<double> w(batch, 1.0);
    switch (in.strategy) {
    case Strategy::vanilla:
        break;
    case Strategy::rew:
    case Strategy::ga:
        if (in.conflicting.size() != batch) {
            throw DimensionError("partition flags do not cover the batch");
        }
        for (std::size_t j = 0; j < batch; ++j) {
            if (!in.conflicting[j]) {
                w[j] = in.aligned_weight;
            }
        }
        break;
    case Strategy::erew: {
        if (in.scores.size() != batch) {
            throw DimensionError("scores do not cover the batch");
        }
        double sum = 0.0;
        for (double s : in.scores) {
            sum += s;
        }
        if (sum > 0.0) {
            const double scale = static_cast<double>(batch) / sum;
            for (std::size_t j = 0; j < batch; ++j) {
                w[j] = in.scores[j] * scale;
            }
        }
        break;
    }
    }
    return w;
}

std::vector<double> rotate(std::span<const double> image, const ImageShape& shape, int k) {
    if (shape.height != shape.width) {
        throw InvalidArgument("rotation needs square images");
    }
    if (image.size() != shape.size()) {
        throw DimensionError("image has " + std::to_string(image.size()) + " values, shape needs " +
                             std::to_string(shape.size()));
    }
    k = ((k % 4) + 4) % 4;
    const std::size_t n = shape.height;
    const std::size_t plane = n * n;
    std::vector<double> out(image.size());
    for (std::size_t ch = 0; ch < shape.channels; ++ch) {
        const double* src = image.data() + ch * plane;
        double* dst = out.data() + ch * plane;
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < n; ++c) {
                std::size_t rr = r, cc = c;
                switch (k) {
                case 0: break;
                case 1: rr = c; cc = n - 1 - r; break;
                case 2: rr = n - 1 - r; cc = n - 1 - c; break;
                case 3: rr = n - 1 - c; cc = r; break;
                }
                dst[rr * n + cc] = src[r * n + c];
            }
        }
    }
    return out;
}

Matrix rotated_batch(const Matrix& batch, const ImageShape& shape, std::vector<int>& labels) {
    const Eigen::Index b = batch.rows();
    Matrix out(4 * b, batch.cols());
    labels.assign(static_cast<std::size_t>(4 * b), 0);
    for (int k = 0; k < 4; ++k) {
        for (Eigen::Index i = 0; i < b; ++i) {
            const Eigen::Index row = k * b + i;
            if (k == 0) {
                out.row(row) = batch.row(i);
            } else {
                const auto rotated = rotate({batch.row(i).data(), static_cast<std::size_t>(batch.cols())},
                                            shape, k);
                out.row(row) = Eigen::Map<const RowVector>(rotated.data(), batch.cols());
            }
            labels[static_cast<std::size_t>(row)] = k;
        }
    }
    return out;
}

BatchGrad rotation_loss(const MlpModel& model, const Matrix& batch, const ImageShape& shape,
                        double weight) {
    if (!model.has_rotation_head()) {
        throw InvalidArgument("rotation loss needs a model with a rotation head");
    }
    std::vector<int> labels;
    const Matrix stacked = rotated_batch(batch, shape, labels);
    const std::vector<double> w(labels.size(), weight);
    return weighted_cross_entropy_backward(model, stacked, labels, w, +1, Head::rotation);
}

double rotation_accuracy(const MlpModel& model, const Matrix& features, const ImageShape& shape) {
    if (!model.has_rotation_head()) {
        throw InvalidArgument("rotation accuracy needs a model with a rotation head");
    }
    constexpr Eigen::Index block = 512;
    std::size_t correct = 0, total = 0;
    std::vector<int> labels;
    for (Eigen::Index start = 0; start < features.rows(); start += block) {
        const Eigen::Index rows = std::min(block, features.rows() - start);
        const Matrix stacked = rotated_batch(features.middleRows(start, rows), shape, labels);
        const std::vector<int> preds = predict(model, stacked, Head::rotation);
        for (std::size_t i = 0; i < preds.size(); ++i) {
            correct += preds[i] == labels[i];
        }
        total += preds.size();
    }
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

EpochRecord evaluate_epoch(const MlpModel& model, const BiasedDataset& eval) {
    EpochRecord rec;
    const std::vector<int> preds = predict(model, eval.features);
    rec.accuracy = plain_accuracy(preds, eval.targets);
    if (eval.attributes() > 0) {
        const int nb = bias_values(eval);
        std::vector<std::size_t> counts(static_cast<std::size_t>(eval.num_classes * nb), 0);
        for (std::size_t i = 0; i < eval.size(); ++i) {
            ++counts[static_cast<std::size_t>(eval.targets[i] * nb + eval.bias[0][i])];
        }
        if (std::none_of(counts.begin(), counts.end(), [](std::size_t c) { return c == 0; })) {
            rec.unbiased_accuracy =
                unbiased_accuracy(preds, eval.targets, eval.bias[0], eval.num_classes, nb).overall;
        }
        std::vector<std::uint8_t> aligned(eval.size());
        for (std::size_t i = 0; i < eval.size(); ++i) {
            aligned[i] = eval.conflicting(i) ? 0 : 1;
        }
        const SplitAccuracy split = split_accuracy(preds, eval.targets, aligned);
        rec.aligned_accuracy = split.aligned;
        rec.conflicting_accuracy = split.conflicting;
    }
    return rec;
}

TrainResult train(const TrainInputs& inputs, const TrainConfig& cfg) {
    cfg.validate();
    if (!inputs.train) {
        throw InvalidArgument("train() needs a training set");
    }
    const BiasedDataset& ds = *inputs.train;
    const std::size_t n = ds.size();
    const bool needs_partition = cfg.strategy == Strategy::rew || cfg.strategy == Strategy::ga;
    if (needs_partition && (!inputs.partition || inputs.partition->size() != n)) {
        throw InvalidArgument(to_string(cfg.strategy) + " needs a partition covering the train split");
    }
    if (cfg.strategy == Strategy::erew && (!inputs.scores || inputs.scores->size() != n)) {
        throw InvalidArgument("erew needs scores covering the train split");
    }
    const bool ssl = cfg.ssl == SslMode::rotation;
    if (ssl && !ds.shape.is_image()) {
        throw InvalidArgument("rotation prediction needs image features");
    }

    const MlpSpec spec{ds.dim(), cfg.hidden, static_cast<std::size_t>(ds.num_classes),
                      ssl || cfg.attach_rotation_head};
    MlpModel model = MlpModel::initialize(spec, cfg.init_seed);
    AdamState opt = AdamState::for_model(model, cfg.adam);
    EpochBatcher batches(n, cfg.batch_size, cfg.batch_seed);

    const std::vector<std::uint8_t> truth = ds.conflicting_flags();
    const std::vector<std::uint8_t>& split_flags = inputs.partition ? inputs.partition->conflicting : truth;
    const double static_weight = cfg.strategy == Strategy::rew
                                     ? rew_weight(inputs.partition->n_conflicting,
                                                  inputs.partition->n_aligned, cfg.gamma)
                                     : 1.0;

    TrainResult result{model, {}};
    TrainTelemetry& tel = result.telemetry;
    const std::size_t per_epoch = batches.batches_per_epoch();
    tel.total_iterations = cfg.epochs * per_epoch;
    if (cfg.record_iterations) {
        tel.iterations.reserve(tel.total_iterations);
    }

    std::vector<std::uint8_t> flags(cfg.batch_size);
    std::vector<double> scores(cfg.batch_size);
    double epoch_loss = 0.0;
    std::size_t epoch_steps = 0;

    for (std::size_t t = 0; t < tel.total_iterations; ++t) {
        const auto rows = batches.next();
        const Matrix x = ds.gather(rows);
        const std::vector<int> y = ds.gather_targets(rows);
        const ForwardPass pass = forward_pass(model, x);
        guard_logits(pass, t);
        const Matrix probs = softmax_rows(pass.logits);

        IterationRecord rec;
        rec.iteration = t;
        for (std::size_t j = 0; j < rows.size(); ++j) {
            const double g = 2.0 * label_complement(probs, static_cast<Eigen::Index>(j), y[j]);
            (truth[rows[j]] ? rec.g_conflicting : rec.g_aligned) += g;
            flags[j] = split_flags[rows[j]];
            (flags[j] ? rec.pg_conflicting : rec.pg_aligned) += g;
            if (inputs.scores) {
                scores[j] = inputs.scores->scores[rows[j]];
            }
        }

        IterationLossInputs loss_in;
        loss_in.strategy = cfg.strategy;
        loss_in.conflicting = flags;
        loss_in.scores = scores;
        loss_in.aligned_weight = static_weight;
        if (cfg.strategy == Strategy::ga) {
            const auto r = ga_ratio(probs, y, flags, cfg.gamma);
            if (!r) {
                rec.skipped = true;
                ++tel.skipped;
            } else {
                loss_in.aligned_weight = *r;
                const double lhs = *r * rec.pg_aligned;
                const double rhs = rec.pg_conflicting / cfg.gamma;
                const double scale = std::max(std::abs(lhs), std::abs(rhs));
                rec.balance_residual = scale > 0.0 ? std::abs(lhs - rhs) / scale : 0.0;
                tel.max_balance_residual = std::max(tel.max_balance_residual, rec.balance_residual);
            }
        }
        rec.ratio = cfg.strategy == Strategy::vanilla || cfg.strategy == Strategy::erew
                        ? 1.0
                        : loss_in.aligned_weight;

        if (!rec.skipped) {
            const std::vector<double> w = build_iteration_loss(loss_in, rows.size());
            BatchGrad grads = weighted_cross_entropy_backward(model, pass, y, w, +1);
            rec.loss = grads.mean_loss;
            if (ssl) {
                const BatchGrad rot = rotation_loss(model, x, ds.shape, cfg.ssl_weight);
                grads.params += rot.params;
                rec.loss += rot.mean_loss;
            }
            adam_step(model, grads.params, opt);
            guard_finite(model, t);
            epoch_loss += rec.loss;
            ++epoch_steps;
        }
        if (cfg.record_iterations) {
            tel.iterations.push_back(rec);
        }

        if ((t + 1) % per_epoch == 0) {
            EpochRecord er = inputs.eval ? evaluate_epoch(model, *inputs.eval) : EpochRecord{};
            er.epoch = (t + 1) / per_epoch;
            er.train_loss = epoch_steps ? epoch_loss / static_cast<double>(epoch_steps) : 0.0;
            tel.epochs.push_back(er);
            epoch_loss = 0.0;
            epoch_steps = 0;
        }
    }
    result.model = std::move(model);
    return result;
}

void write_telemetry(const std::filesystem::path& path, const TrainTelemetry& telemetry) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out = open_for_write(tmp);
        out << "iter g_aligned g_conflicting r skipped pg_aligned pg_conflicting residual loss\n";
        for (const auto& r : telemetry.iterations) {
            out << r.iteration << ' ' << fmt(r.g_aligned) << ' ' << fmt(r.g_conflicting) << ' '
                << fmt(r.ratio) << ' ' << (r.skipped ? 1 : 0) << ' ' << fmt(r.pg_aligned) << ' '
                << fmt(r.pg_conflicting) << ' ' << fmt(r.balance_residual) << ' ' << fmt(r.loss) << '\n';
        }
    }
    std::filesystem::rename(tmp, path);
}

void write_epoch_trace(const std::filesystem::path& path, const TrainTelemetry& telemetry) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out = open_for_write(tmp);
        out << "epoch,train_loss,unbiased_accuracy,accuracy,aligned_accuracy,conflicting_accuracy\n";
        for (const auto& e : telemetry.epochs) {
            out << e.epoch << ',' << format_number(e.train_loss) << ',' << format_number(e.unbiased_accuracy)
                << ',' << format_number(e.accuracy) << ',' << format_number(e.aligned_accuracy) << ','
                << format_number(e.conflicting_accuracy) << '\n';
        }
    }
    std::filesystem::rename(tmp, path);
}

} // namespace debias
