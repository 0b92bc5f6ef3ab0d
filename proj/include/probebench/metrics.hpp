#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "probebench/matrix.hpp"

namespace probebench::metrics {

/// P(score+ > score-) + 0.5 P(score+ == score-), via midranks in O(n log n).
/// Throws ValidationError when either class is absent.
double roc_auc_binary(std::span<const double> scores, std::span<const int> labels);

struct MacroAuc {
  std::vector<std::optional<double>> per_class;  ///< nullopt: no positives (or no negatives) in eval
  double macro = 0.0;
  std::vector<std::string> absent;  ///< classes excluded from the mean
};

/// One-vs-rest AUC per column of `scores`; `labels` are class indices.
MacroAuc macro_auc(const Matrix& scores, std::span<const std::size_t> labels, std::span<const std::string> classes);

/// Column index of the row maximum, lowest index on ties.
std::size_t argmax(std::span<const double> row);

double top1_accuracy(const Matrix& scores, std::span<const std::size_t> labels);

/// counts[true][predicted].
using Confusion = std::vector<std::vector<std::size_t>>;
Confusion confusion_matrix(const Matrix& scores, std::span<const std::size_t> labels, std::size_t num_classes);

struct ConfusionEntry {
  std::string true_class;
  std::string predicted_class;
  double rate = 0.0;
  friend bool operator==(const ConfusionEntry&, const ConfusionEntry&) = default;
};

/// Largest off-diagonal rates (count / true-class count), descending; ties
/// keep row-major order. Empty rows are skipped.
std::vector<ConfusionEntry> top_confusions(const Confusion& confusion, std::span<const std::string> class_names,
                                           std::size_t m);

inline constexpr double kLogOddsEpsilon = 1e-6;

struct LogOdds {
  double value = 0.0;
  bool clamped = false;
};

/// ln(p / (1 - p)). p at or beyond 0 or 1 is replaced by eps or 1 - eps and
/// flagged as clamped.
LogOdds log_odds(double p);

struct MetricsReport {
  std::vector<std::string> classes;
  std::vector<std::optional<double>> per_class_auc;
  double macro_auc = 0.0;
  double top1 = 0.0;
  Confusion confusion;
  std::size_t n_eval = 0;
};

MetricsReport evaluate(const Matrix& scores, std::span<const std::size_t> labels, std::span<const std::string> classes);

std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const std::string& text);

}  // namespace probebench::metrics
