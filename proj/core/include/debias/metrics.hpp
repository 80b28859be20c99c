#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace debias {

/// Accuracy of every (target, bias) cell plus their unweighted mean.
struct GroupAccuracy {
    int num_targets = 0;
    int num_bias = 0;
    /// Row-major num_targets x num_bias table.
    std::vector<double> cells;
    std::vector<std::size_t> counts;
    double overall = 0.0;

    double at(int target, int bias) const { return cells[static_cast<std::size_t>(target * num_bias + bias)]; }
};

/// Throws InvalidArgument naming every empty (target, bias) cell.
GroupAccuracy unbiased_accuracy(std::span<const int> preds, std::span<const int> targets,
                                std::span<const int> bias, int num_targets, int num_bias);

double plain_accuracy(std::span<const int> preds, std::span<const int> targets);

struct SplitAccuracy {
    std::optional<double> aligned;
    std::optional<double> conflicting;
};

/// Accuracy over aligned (flag 1) and conflicting (flag 0) samples; an empty
/// side is absent.
SplitAccuracy split_accuracy(std::span<const int> preds, std::span<const int> targets,
                             std::span<const std::uint8_t> aligned_flags);

struct PrPoint {
    double recall;
    double precision;
};

struct ApResult {
    double ap = 0.0;
    /// One point per rank position, in rank order.
    std::vector<PrPoint> curve;
};

/// Ranks by descending score (ties by ascending index) and sums precision at
/// each rank where recall increases, weighted by the recall step.
ApResult average_precision(std::span<const double> scores, std::span<const std::uint8_t> positive);

struct PrecisionRecall {
    std::optional<double> precision; // absent when nothing is selected
    double recall = 0.0;
    std::size_t selected = 0;
};

/// Selection is score >= tau.
PrecisionRecall precision_recall_at(std::span<const double> scores,
                                    std::span<const std::uint8_t> positive, double tau);

struct Fairness {
    std::optional<double> dp;
    std::optional<double> eq_opp0;
    std::optional<double> eq_opp1;
    std::optional<double> eq_odd;
};

/// Binary target and bias; rates conditioned on an empty cell make the
/// dependent scores absent.
Fairness fairness_binary(std::span<const int> preds, std::span<const int> targets,
                         std::span<const int> bias);

/// Accuracy of the four alignment groups of a two-attribute dataset, in the
/// order aligned/aligned, aligned/conflicting, conflicting/aligned,
/// conflicting/conflicting (first attribute first).
struct MultiGroupAccuracy {
    std::array<std::optional<double>, 4> groups;
    std::optional<double> average;
};
MultiGroupAccuracy multi_group_accuracy(std::span<const int> preds, std::span<const int> targets,
                                        std::span<const std::uint8_t> aligned_first,
                                        std::span<const std::uint8_t> aligned_second);

struct MetricsReport {
    std::string label;
    std::optional<GroupAccuracy> groups;
    std::optional<double> unbiased_accuracy;
    std::optional<double> accuracy;
    std::optional<double> aligned_accuracy;
    std::optional<double> conflicting_accuracy;
    std::optional<MultiGroupAccuracy> multi;
    std::optional<double> ap;
    std::vector<PrPoint> pr_curve;
    std::optional<double> precision_at_tau;
    std::optional<double> recall_at_tau;
    std::optional<double> tau;
    std::optional<Fairness> fairness;

    nlohmann::json to_json() const;
    static std::vector<std::string> csv_header();
    /// Flat row matching csv_header(); absent values are empty fields.
    std::vector<std::string> csv_row() const;
};

/// Fixed-precision text used by every CSV writer (%.6f), so reruns compare
/// byte for byte.
std::string format_number(std::optional<double> value);

} // namespace debias
