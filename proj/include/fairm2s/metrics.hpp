#pragma once
// Hard-decision fairness metrics and accuracy/Eopp Pareto analysis.
//
// With two groups the metrics are the usual ones. With more groups the
// pairwise differences become (max - min) over groups and DI becomes
// min rate / max rate, which reduce to the two-group forms.

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fairm2s {

inline constexpr double kDecisionThreshold = 0.5;

struct GroupCounts {
  int tp = 0, fp = 0, tn = 0, fn = 0;

  int size() const { return tp + fp + tn + fn; }
  int positives() const { return tp + fn; }
  int negatives() const { return fp + tn; }
  friend bool operator==(const GroupCounts&, const GroupCounts&) = default;
};

struct GroupConfusion {
  std::vector<GroupCounts> groups;
  friend bool operator==(const GroupConfusion&, const GroupConfusion&) = default;
};

/// 1 where p >= threshold.
std::vector<int> threshold_predictions(std::span<const double> probs, double threshold = kDecisionThreshold);

GroupConfusion confusion(std::span<const int> preds, std::span<const int> labels, std::span<const int> groups,
                         int n_groups = 2);

double accuracy(const GroupConfusion& conf);

/// min/max ratio of positive-prediction rates; 1 if all rates are 0, 0 if only
/// some are. Throws std::invalid_argument if a group is empty.
double disparate_impact(const GroupConfusion& conf);

/// |TPR_0 - TPR_1|; nullopt if some group has no positives.
std::optional<double> equal_opportunity(const GroupConfusion& conf);

/// (|dTPR| + |dFPR|) / 2; nullopt if some group lacks positives or negatives.
std::optional<double> equalized_odds_gap(const GroupConfusion& conf);

struct FairnessReport {
  double accuracy = 0;
  std::optional<double> di;
  std::optional<double> eopp;
  std::optional<double> eodd;
  GroupConfusion confusion;
  std::vector<std::string> warnings;
};

FairnessReport fairness_report(std::span<const int> preds, std::span<const int> labels, std::span<const int> groups,
                               int n_groups = 2);

/// Flat `key=value` lines.
std::string to_text(const FairnessReport& report);

struct MetricSummary {
  double mean = 0;
  double std = 0;  // population standard deviation
  int count = 0;
  int excluded = 0;
};

struct AggregateReport {
  MetricSummary accuracy, di, eopp, eodd;
  int n_tasks = 0;
};

/// Mean / population std per metric; undefined values are excluded and counted.
AggregateReport aggregate(std::span<const FairnessReport> reports);
MetricSummary summarize_values(std::span<const std::optional<double>> values);

struct ParetoPoint {
  double accuracy = 0;
  double eopp = 0;
  std::string tag;
  friend bool operator==(const ParetoPoint&, const ParetoPoint&) = default;
};

/// a >= b on accuracy and a <= b on eopp, with at least one strict.
bool dominates(const ParetoPoint& a, const ParetoPoint& b);

/// Non-dominated points, accuracy descending; equal-accuracy points keep input order.
std::vector<ParetoPoint> pareto_frontier(std::span<const ParetoPoint> points);

}  // namespace fairm2s
