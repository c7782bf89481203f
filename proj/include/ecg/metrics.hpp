#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ecg/dataio.hpp"
#include "json.hpp"

namespace ecg::learn {

struct ClassMetrics {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  double accuracy = 0, f1 = 0, sensitivity = 0, specificity = 0, ppv = 0, gmean = 0;
  double ap = 0, auc = 0;
  bool ap_defined = false;   // at least one positive
  bool auc_defined = false;  // at least one positive and one negative
};

/// Macro averages over classes. A ratio with a zero denominator counts as 0.
/// Classes whose AP or AUC is undefined are left out of MAP/AUC and named in
/// `warnings`.
struct MetricsReport {
  double accuracy = 0, f1 = 0, map = 0, gmean = 0, auc = 0, sensitivity = 0, specificity = 0, ppv = 0;
  std::vector<ClassMetrics> per_class;
  std::vector<std::string> warnings;

  nlohmann::json to_json(const std::vector<std::string>& class_names = {}) const;
  static MetricsReport from_json(const nlohmann::json& j);
};

/// Precision averaged over the ranks of the positives, scores sorted
/// descending with ties kept in input order.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);
/// Fraction of (positive, negative) pairs in which the positive ranks first
/// under the same ordering.
double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Binary decisions from scores: per-class `score >= threshold` for
/// multi-label and binary tasks, row argmax (first maximum) for multi-class.
std::vector<std::uint8_t> decide(std::span<const double> scores, std::int64_t n, int k, data::TaskKind task,
                                 double threshold = 0.5);

/// scores and targets are row-major (n, k); scores are probabilities.
MetricsReport compute_metrics(std::span<const double> scores, std::span<const std::uint8_t> targets, std::int64_t n,
                              int k, data::TaskKind task, double threshold = 0.5);

/// Probabilities from logits: sigmoid per entry, or row softmax for multi-class.
std::vector<double> probabilities(std::span<const float> logits, std::int64_t n, int k, data::TaskKind task);

}  // namespace ecg::learn
