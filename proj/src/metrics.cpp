#include "probebench/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "probebench/error.hpp"

namespace probebench::metrics {

double roc_auc_binary(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ValidationError("roc_auc_binary: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Sum of positive midranks (1-based), ties sharing their average rank.
  double positive_rank_sum = 0.0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]] != 0) {
        positive_rank_sum += midrank;
        ++positives;
      }
    }
    i = j;
  }
  const std::size_t negatives = n - positives;
  if (positives == 0 || negatives == 0) {
    throw ValidationError("roc_auc_binary: need at least one positive and one negative label");
  }
  const double p = static_cast<double>(positives);
  const double u = positive_rank_sum - p * (p + 1.0) / 2.0;
  return u / (p * static_cast<double>(negatives));
}

MacroAuc macro_auc(const Matrix& scores, std::span<const std::size_t> labels, std::span<const std::string> classes) {
  if (scores.cols() != classes.size()) throw ValidationError("macro_auc: score width differs from class count");
  if (scores.rows() != labels.size()) throw ValidationError("macro_auc: score rows differ from label count");
  MacroAuc out;
  out.per_class.resize(classes.size());
  std::vector<double> column(scores.rows());
  std::vector<int> binary(scores.rows());
  double sum = 0.0;
  std::size_t included = 0;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::size_t pos = 0;
    for (std::size_t r = 0; r < scores.rows(); ++r) {
      column[r] = scores(r, c);
      binary[r] = labels[r] == c ? 1 : 0;
      pos += static_cast<std::size_t>(binary[r]);
    }
    if (pos == 0 || pos == scores.rows()) {
      out.absent.push_back(classes[c]);
      continue;
    }
    const double auc = roc_auc_binary(column, binary);
    out.per_class[c] = auc;
    sum += auc;
    ++included;
  }
  if (included == 0) throw ValidationError("macro_auc: every class is degenerate in the evaluation set");
  out.macro = sum / static_cast<double>(included);
  return out;
}

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < row.size(); ++c) {
    if (row[c] > row[best]) best = c;
  }
  return best;
}

double top1_accuracy(const Matrix& scores, std::span<const std::size_t> labels) {
  if (scores.rows() == 0) throw ValidationError("top1_accuracy: empty evaluation set");
  if (scores.rows() != labels.size()) throw ValidationError("top1_accuracy: score rows differ from label count");
  std::size_t correct = 0;
  for (std::size_t r = 0; r < scores.rows(); ++r) correct += argmax(scores.row(r)) == labels[r] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(scores.rows());
}

Confusion confusion_matrix(const Matrix& scores, std::span<const std::size_t> labels, std::size_t num_classes) {
  if (scores.rows() != labels.size()) throw ValidationError("confusion_matrix: score rows differ from label count");
  Confusion counts(num_classes, std::vector<std::size_t>(num_classes, 0));
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    if (labels[r] >= num_classes) throw ValidationError("confusion_matrix: label out of range");
    ++counts[labels[r]][argmax(scores.row(r))];
  }
  return counts;
}

std::vector<ConfusionEntry> top_confusions(const Confusion& confusion, std::span<const std::string> class_names,
                                           std::size_t m) {
  if (confusion.size() != class_names.size()) throw ValidationError("top_confusions: matrix/class count mismatch");
  std::vector<ConfusionEntry> entries;
  for (std::size_t t = 0; t < confusion.size(); ++t) {
    if (confusion[t].size() != class_names.size()) throw ValidationError("top_confusions: matrix is not square");
    const std::size_t total = std::accumulate(confusion[t].begin(), confusion[t].end(), std::size_t{0});
    if (total == 0) continue;
    for (std::size_t p = 0; p < confusion[t].size(); ++p) {
      if (p == t || confusion[t][p] == 0) continue;
      entries.push_back({class_names[t], class_names[p], static_cast<double>(confusion[t][p]) / total});
    }
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [](const ConfusionEntry& a, const ConfusionEntry& b) { return a.rate > b.rate; });
  if (entries.size() > m) entries.resize(m);
  return entries;
}

LogOdds log_odds(double p) {
  LogOdds out;
  if (!(p > 0.0 && p < 1.0)) {
    out.clamped = true;
    p = p >= 1.0 ? 1.0 - kLogOddsEpsilon : kLogOddsEpsilon;
  }
  out.value = std::log(p / (1.0 - p));
  return out;
}

MetricsReport evaluate(const Matrix& scores, std::span<const std::size_t> labels, std::span<const std::string> classes) {
  MetricsReport r;
  r.classes.assign(classes.begin(), classes.end());
  const MacroAuc auc = macro_auc(scores, labels, classes);
  r.per_class_auc = auc.per_class;
  r.macro_auc = auc.macro;
  r.top1 = top1_accuracy(scores, labels);
  r.confusion = confusion_matrix(scores, labels, classes.size());
  r.n_eval = scores.rows();
  return r;
}

std::string report_to_json(const MetricsReport& report) {
  nlohmann::ordered_json j;
  j["macro_auc"] = report.macro_auc;
  j["top1"] = report.top1;
  j["n_eval"] = report.n_eval;
  nlohmann::ordered_json per_class = nlohmann::ordered_json::object();
  for (std::size_t c = 0; c < report.classes.size(); ++c) {
    per_class[report.classes[c]] = report.per_class_auc[c] ? nlohmann::ordered_json(*report.per_class_auc[c])
                                                           : nlohmann::ordered_json(nullptr);
  }
  j["per_class_auc"] = per_class;
  j["classes"] = report.classes;
  j["confusion"] = report.confusion;
  return j.dump();
}

MetricsReport report_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    MetricsReport r;
    r.macro_auc = j.at("macro_auc").get<double>();
    r.top1 = j.at("top1").get<double>();
    r.n_eval = j.at("n_eval").get<std::size_t>();
    r.classes = j.at("classes").get<std::vector<std::string>>();
    for (const auto& c : r.classes) {
      const auto& v = j.at("per_class_auc").at(c);
      r.per_class_auc.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
    }
    r.confusion = j.at("confusion").get<Confusion>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metrics JSON: ") + e.what());
  }
}

}  // namespace probebench::metrics
