#include "debias/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include <nlohmann/json.hpp>

#include "debias/error.hpp"

namespace debias {

namespace {

void require_same_length(std::size_t a, std::size_t b, const char* what) {
    if (a != b) {
        throw DimensionError(std::string(what) + ": length " + std::to_string(a) + " vs " +
                             std::to_string(b));
    }
}

std::optional<double> ratio(std::size_t num, std::size_t den) {
    if (den == 0) {
        return std::nullopt;
    }
    return static_cast<double>(num) / static_cast<double>(den);
}

nlohmann::json opt_json(const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

} // namespace

GroupAccuracy unbiased_accuracy(std::span<const int> preds, std::span<const int> targets,
                                std::span<const int> bias, int num_targets, int num_bias) {
    require_same_length(preds.size(), targets.size(), "unbiased_accuracy preds/targets");
    require_same_length(preds.size(), bias.size(), "unbiased_accuracy preds/bias");
    if (num_targets <= 0 || num_bias <= 0) {
        throw InvalidArgument("group counts must be positive");
    }
    GroupAccuracy out;
    out.num_targets = num_targets;
    out.num_bias = num_bias;
    const auto cells = static_cast<std::size_t>(num_targets * num_bias);
    std::vector<std::size_t> correct(cells, 0);
    out.counts.assign(cells, 0);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (targets[i] < 0 || targets[i] >= num_targets || bias[i] < 0 || bias[i] >= num_bias) {
            throw InvalidArgument("sample " + std::to_string(i) + " has a label outside the group grid");
        }
        const auto cell = static_cast<std::size_t>(targets[i] * num_bias + bias[i]);
        ++out.counts[cell];
        correct[cell] += preds[i] == targets[i] ? 1 : 0;
    }
    std::string empty;
    for (int y = 0; y < num_targets; ++y) {
        for (int b = 0; b < num_bias; ++b) {
            if (out.counts[static_cast<std::size_t>(y * num_bias + b)] == 0) {
                empty += " (target " + std::to_string(y) + ", bias " + std::to_string(b) + ")";
            }
        }
    }
    if (!empty.empty()) {
        throw InvalidArgument("empty groups:" + empty);
    }
    out.cells.resize(cells);
    double sum = 0.0;
    for (std::size_t c = 0; c < cells; ++c) {
        out.cells[c] = static_cast<double>(correct[c]) / static_cast<double>(out.counts[c]);
        sum += out.cells[c];
    }
    out.overall = sum / static_cast<double>(cells);
    return out;
}

double plain_accuracy(std::span<const int> preds, std::span<const int> targets) {
    require_same_length(preds.size(), targets.size(), "plain_accuracy");
    if (preds.empty()) {
        throw InvalidArgument("accuracy of an empty set");
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        correct += preds[i] == targets[i] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(preds.size());
}

SplitAccuracy split_accuracy(std::span<const int> preds, std::span<const int> targets,
                             std::span<const std::uint8_t> aligned_flags) {
    require_same_length(preds.size(), targets.size(), "split_accuracy preds/targets");
    require_same_length(preds.size(), aligned_flags.size(), "split_accuracy preds/flags");
    std::size_t n_al = 0, ok_al = 0, n_co = 0, ok_co = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const bool ok = preds[i] == targets[i];
        if (aligned_flags[i]) {
            ++n_al;
            ok_al += ok;
        } else {
            ++n_co;
            ok_co += ok;
        }
    }
    return {ratio(ok_al, n_al), ratio(ok_co, n_co)};
}

ApResult average_precision(std::span<const double> scores, std::span<const std::uint8_t> positive) {
    require_same_length(scores.size(), positive.size(), "average_precision");
    const std::size_t total_pos =
        static_cast<std::size_t>(std::count_if(positive.begin(), positive.end(), [](auto f) { return f != 0; }));
    if (total_pos == 0) {
        throw InvalidArgument("average precision needs at least one positive sample");
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    ApResult out;
    out.curve.reserve(order.size());
    std::size_t hits = 0;
    double prev_recall = 0.0;
    for (std::size_t k = 0; k < order.size(); ++k) {
        const bool pos = positive[order[k]] != 0;
        hits += pos;
        const double precision = static_cast<double>(hits) / static_cast<double>(k + 1);
        const double recall = static_cast<double>(hits) / static_cast<double>(total_pos);
        if (pos) {
            out.ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        out.curve.push_back({recall, precision});
    }
    return out;
}

PrecisionRecall precision_recall_at(std::span<const double> scores,
                                    std::span<const std::uint8_t> positive, double tau) {
    require_same_length(scores.size(), positive.size(), "precision_recall_at");
    std::size_t selected = 0, hits = 0, total_pos = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool pos = positive[i] != 0;
        total_pos += pos;
        if (scores[i] >= tau) {
            ++selected;
            hits += pos;
        }
    }
    if (total_pos == 0) {
        throw InvalidArgument("recall needs at least one positive sample");
    }
    PrecisionRecall out;
    out.selected = selected;
    out.precision = ratio(hits, selected);
    out.recall = static_cast<double>(hits) / static_cast<double>(total_pos);
    return out;
}

Fairness fairness_binary(std::span<const int> preds, std::span<const int> targets,
                         std::span<const int> bias) {
    require_same_length(preds.size(), targets.size(), "fairness preds/targets");
    require_same_length(preds.size(), bias.size(), "fairness preds/bias");
    // positives[y][b] and counts[y][b]; index 2 pools over y.
    std::size_t pos[3][2] = {}, cnt[3][2] = {};
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const int p = preds[i], y = targets[i], b = bias[i];
        if ((p != 0 && p != 1) || (y != 0 && y != 1) || (b != 0 && b != 1)) {
            throw InvalidArgument("fairness metrics need binary predictions, targets and bias");
        }
        for (int row : {y, 2}) {
            ++cnt[row][b];
            pos[row][b] += static_cast<std::size_t>(p);
        }
    }
    auto gap_score = [&](int row) -> std::optional<double> {
        const auto r1 = ratio(pos[row][1], cnt[row][1]);
        const auto r0 = ratio(pos[row][0], cnt[row][0]);
        if (!r1 || !r0) {
            return std::nullopt;
        }
        return 1.0 - std::abs(*r1 - *r0);
    };
    Fairness out;
    out.dp = gap_score(2);
    out.eq_opp0 = gap_score(0);
    out.eq_opp1 = gap_score(1);
    if (out.eq_opp0 && out.eq_opp1) {
        out.eq_odd = 0.5 * (*out.eq_opp0 + *out.eq_opp1);
    }
    return out;
}

MultiGroupAccuracy multi_group_accuracy(std::span<const int> preds, std::span<const int> targets,
                                        std::span<const std::uint8_t> aligned_first,
                                        std::span<const std::uint8_t> aligned_second) {
    require_same_length(preds.size(), targets.size(), "multi_group preds/targets");
    require_same_length(preds.size(), aligned_first.size(), "multi_group first flags");
    require_same_length(preds.size(), aligned_second.size(), "multi_group second flags");
    std::array<std::size_t, 4> n{}, ok{};
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const std::size_t g = (aligned_first[i] ? 0 : 2) + (aligned_second[i] ? 0 : 1);
        ++n[g];
        ok[g] += preds[i] == targets[i];
    }
    MultiGroupAccuracy out;
    double sum = 0.0;
    bool complete = true;
    for (std::size_t g = 0; g < 4; ++g) {
        out.groups[g] = ratio(ok[g], n[g]);
        if (out.groups[g]) {
            sum += *out.groups[g];
        } else {
            complete = false;
        }
    }
    if (complete) {
        out.average = sum / 4.0;
    }
    return out;
}

std::string format_number(std::optional<double> value) {
    if (!value) {
        return "";
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", *value);
    return buf;
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json j;
    j["label"] = label;
    j["unbiased_accuracy"] = opt_json(unbiased_accuracy);
    j["accuracy"] = opt_json(accuracy);
    j["aligned_accuracy"] = opt_json(aligned_accuracy);
    j["conflicting_accuracy"] = opt_json(conflicting_accuracy);
    if (groups) {
        j["groups"] = {{"num_targets", groups->num_targets},
                       {"num_bias", groups->num_bias},
                       {"accuracy", groups->cells},
                       {"count", groups->counts}};
    }
    if (multi) {
        nlohmann::json g = nlohmann::json::array();
        for (const auto& v : multi->groups) {
            g.push_back(opt_json(v));
        }
        j["multi_bias"] = {{"groups", g}, {"average", opt_json(multi->average)}};
    }
    j["scoring"] = {{"ap", opt_json(ap)},
                    {"tau", opt_json(tau)},
                    {"precision_at_tau", opt_json(precision_at_tau)},
                    {"recall_at_tau", opt_json(recall_at_tau)}};
    if (fairness) {
        j["fairness"] = {{"dp", opt_json(fairness->dp)},
                         {"eq_opp0", opt_json(fairness->eq_opp0)},
                         {"eq_opp1", opt_json(fairness->eq_opp1)},
                         {"eq_odd", opt_json(fairness->eq_odd)}};
    }
    return j;
}

std::vector<std::string> MetricsReport::csv_header() {
    return {"label",     "unbiased_accuracy", "accuracy",   "aligned_accuracy", "conflicting_accuracy",
            "group_aa",  "group_ac",          "group_ca",   "group_cc",         "group_average",
            "ap",        "tau",               "precision",  "recall",           "dp",
            "eq_opp0",   "eq_opp1",           "eq_odd"};
}

std::vector<std::string> MetricsReport::csv_row() const {
    std::vector<std::string> row{label,
                                 format_number(unbiased_accuracy),
                                 format_number(accuracy),
                                 format_number(aligned_accuracy),
                                 format_number(conflicting_accuracy)};
    for (std::size_t g = 0; g < 4; ++g) {
        row.push_back(multi ? format_number(multi->groups[g]) : "");
    }
    row.push_back(multi ? format_number(multi->average) : "");
    row.push_back(format_number(ap));
    row.push_back(format_number(tau));
    row.push_back(format_number(precision_at_tau));
    row.push_back(format_number(recall_at_tau));
    const Fairness f = fairness.value_or(Fairness{});
    row.push_back(format_number(f.dp));
    row.push_back(format_number(f.eq_opp0));
    row.push_back(format_number(f.eq_opp1));
    row.push_back(format_number(f.eq_odd));
    return row;
}

} // namespace debias
