#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "ecg/dataio.hpp"
#include "ecg/losses.hpp"
#include "ecg/metrics.hpp"
#include "ecg/models.hpp"
#include "ecg/optim.hpp"

namespace ecg::learn {

enum class LossKind { Focal, WeightedBCE };

struct LossConfig {
  LossKind kind = LossKind::Focal;
  FocalLossParams focal;
  /// WeightedBCE only; empty means derive from the training labels.
  std::vector<double> class_weights;
};

template <class T>
Tensor<T> compute_loss(const Tensor<T>& logits, const Tensor<T>& targets, const LossConfig& cfg);

struct OptimizerConfig {
  AdamConfig adam;
  std::int64_t batch_size = 32;
  int epochs = 50;
  /// Epochs without validation-F1 improvement before stopping; 0 disables.
  int patience = 10;
  void validate() const;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  bool has_val = false;
  MetricsReport val;
  bool improved = false;
};

struct History {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_val_f1 = -1.0;
  bool stopped_early = false;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

using Model = models::Model<float>;
/// Replaces the validation pass; receives the model after each epoch.
using Validator = std::function<MetricsReport(Model&, int epoch)>;
/// Called after each epoch (after validation); returning true stops training.
using EpochCallback = std::function<bool(Model&, const EpochRecord&)>;

struct TrainOptions {
  OptimizerConfig optim;
  LossConfig loss;
  std::uint64_t seed = 0;
  /// Only head-prefixed parameters are updated; the rest run frozen.
  bool head_only = false;
  bool restore_best = true;
  Validator validator;
  EpochCallback on_epoch;
  std::ostream* log = nullptr;
};

struct Evaluation {
  MetricsReport report;
  std::vector<double> scores;  // probabilities, row-major (n, k)
  std::vector<std::uint8_t> targets;
  std::int64_t n = 0;
  int k = 0;
};

/// Eval-mode pass over every batch.
Evaluation evaluate(Model& model, const data::BatchIterator& it, data::TaskKind task, double threshold = 0.5);

/// Epoch loop with Adam, best-validation-F1 retention and early stopping.
/// Throws NumericError with epoch/batch coordinates on a non-finite loss.
History train(Model& model, data::BatchIterator& train_it, const data::BatchIterator* val_it, data::TaskKind task,
              const TrainOptions& options);

}  // namespace ecg::learn
