#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ecg/augment.hpp"
#include "ecg/rng.hpp"
#include "ecg/signal.hpp"
#include "ecg/tensor.hpp"

namespace ecg::data {

namespace fs = std::filesystem;

enum class TaskKind { MultiLabel, MultiClass, Binary };

std::string_view to_string(TaskKind kind);
TaskKind parse_task(std::string_view name);

/// Task shape and class names. Binary tasks have one class name (the
/// positive condition) and label vectors of length 1.
struct Schema {
  TaskKind task = TaskKind::Binary;
  std::vector<std::string> classes;
  double fs = 500.0;

  int num_outputs() const { return static_cast<int>(classes.size()); }
  /// Throws DataError if the vector does not fit the task.
  void check_labels(const LabelVector& labels, std::string_view id) const;
  void validate() const;
};

struct ManifestEntry {
  std::string id;
  fs::path path;  // absolute, or relative to the manifest directory
  LabelVector labels;
  int fold = 0;   // 0 = unassigned
};

struct Manifest {
  fs::path directory;
  Schema schema;
  std::vector<ManifestEntry> entries;
  bool has_folds = false;
  /// Set when the signals were already band-pass filtered by `prepare`.
  bool prefiltered = false;
  signal::FilterSpec prefilter;

  fs::path resolve(const ManifestEntry& e) const;
};

/// Reads `manifest.csv` (columns id,path,labels[,fold]; labels are
/// ';'-separated class names) plus the `schema.json` sidecar in the same
/// directory. Throws DataError naming a missing column or bad row.
Manifest read_manifest(const fs::path& csv_path);
void write_manifest(const Manifest& manifest, const fs::path& csv_path);

std::string format_labels(const Schema& schema, const LabelVector& labels);
LabelVector parse_labels(const Schema& schema, std::string_view field, std::string_view id);

// ------------------------------------------------------------------- WFDB

struct WfdbOptions {
  double gain = 200.0;  // ADC units per mV
  int baseline = 0;
};

/// Parses a WFDB header (format 16 only) and its companion sample file.
EcgRecord load_wfdb_record(const fs::path& header_path);
/// Writes `<stem>.hea` and `<stem>.dat` into `directory`; samples are rounded
/// to the nearest ADC unit and saturate at the int16 range.
fs::path write_wfdb_record(const EcgRecord& record, const fs::path& directory, const WfdbOptions& options = {});

/// One row per sample, 12 comma-separated columns in mV, optional header row.
EcgRecord load_csv_record(const fs::path& path, double fs);

/// Dispatches on extension (.hea or .csv).
EcgRecord load_record(const fs::path& path, double fs);

// ----------------------------------------------------------------- splits

struct SplitPlan {
  std::vector<std::size_t> train, val, test;
};

/// Folds 1-8 train, 9 validation, 10 test. Throws if folds are missing or
/// outside 1-10.
SplitPlan ptbxl_split(const Manifest& manifest);
/// Generic fold-to-split mapping for fold ids in [1, n_folds].
SplitPlan split_by_folds(const std::vector<int>& folds, int val_fold, int test_fold, int n_folds = 10);

/// Assigns folds 1..k so that every fold holds at least one positive of
/// every class and, per class group, fold sizes differ by at most one.
/// Records are grouped by their rarest positive label (records without
/// labels form their own group). Throws DataError naming any class with
/// fewer than k positives.
std::vector<int> stratified_kfold(const std::vector<LabelVector>& labels, const Schema& schema, int k,
                                  std::uint64_t seed);

// -------------------------------------------------------------- synthetic

struct SyntheticSpec {
  TaskKind task = TaskKind::MultiClass;
  /// Records per primary class; for Binary {negatives, positives}.
  std::vector<std::int64_t> counts{64, 64};
  std::uint64_t seed = 0;
  double fs = 500.0;
  std::int64_t length = 5000;
  /// Peak amplitude of class signatures in mV.
  double signature_amplitude = 0.3;
  double noise = 0.05;
  /// Signature id per class (defaults to the class index). For Binary the
  /// single entry is the positive class's signature.
  std::vector<int> signatures;
  /// MultiLabel only: probability that each non-primary label is also set.
  double cooccurrence = 0.15;
  std::string tag = "synthetic";

  int num_classes() const;
  void validate() const;
};

struct Dataset {
  Schema schema;
  std::vector<EcgRecord> records;
  std::vector<int> folds;  // parallel to records; 0 = unassigned

  std::vector<LabelVector> labels() const;
};

/// Pseudo-ECG: a ~1.2 Hz train of QRS-like spikes with per-lead gains,
/// baseline wander and white noise. Signature s adds either an ST-like offset
/// after each beat (even s) or a narrow-band oscillation at 9 + 3s Hz
/// (odd s) on a signature-specific lead subset.
Dataset generate_synthetic_dataset(const SyntheticSpec& spec);

/// Adds signature `id` of the given peak amplitude to the record in place.
/// `beats` are the QRS sample positions of the base rhythm.
void add_signature(EcgRecord& record, int id, double amplitude, const std::vector<std::int64_t>& beats, Rng& rng);

/// Writes every record as WFDB plus manifest.csv/schema.json into `directory`.
Manifest write_dataset(const Dataset& dataset, const fs::path& directory);

/// Loads all manifest records into memory, validating label shapes.
Dataset load_dataset(const Manifest& manifest);

// ---------------------------------------------------------------- pipeline

struct PipelineConfig {
  bool filter = true;
  signal::FilterSpec filter_spec;
  /// Pad/truncate target applied before segmentation; 0 disables padding.
  std::int64_t max_length = signal::kMaxRecordLength;
  std::int64_t segment_length = signal::kDefaultSegmentLength;
  signal::NormalizationMethod normalization = signal::NormalizationMethod::ZScore;
  augment::AugmentConfig augment;

  void validate() const;
};

/// Deterministic stage shared by every epoch: filter, then pad/truncate.
EcgRecord preprocess_static(const EcgRecord& record, const PipelineConfig& cfg, bool skip_filter = false);

enum class Mode { Train, Eval };

/// Per-draw stage: segmentation (random start in Train, start 0 in Eval),
/// normalization and, in Train mode only, augmentation.
EcgRecord preprocess_draw(const EcgRecord& prepared, const PipelineConfig& cfg, Mode mode, Rng& rng);

struct Batch {
  ad::Tensor<float> x;  // (B, 12, l)
  ad::Tensor<float> y;  // (B, k)
  std::vector<std::size_t> indices;
};

/// Ordered batch stream over a subset of prepared records. In Train mode the
/// order is reshuffled per epoch and every record draws from its own
/// substream keyed by (seed, epoch, record), so batches do not depend on
/// thread scheduling.
class BatchIterator {
 public:
  BatchIterator(const std::vector<EcgRecord>& prepared, std::vector<std::size_t> indices, std::int64_t batch_size,
                PipelineConfig cfg, Mode mode, std::uint64_t seed, int num_outputs);

  std::size_t num_batches() const;
  std::size_t size() const { return indices_.size(); }
  /// Sets the epoch used for ordering and augmentation draws.
  void set_epoch(std::uint64_t epoch);
  Batch batch(std::size_t b) const;
  Mode mode() const { return mode_; }

 private:
  const std::vector<EcgRecord>* prepared_;
  std::vector<std::size_t> indices_;
  std::vector<std::size_t> order_;
  std::int64_t batch_size_;
  PipelineConfig cfg_;
  Mode mode_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  int outputs_;
};

}  // namespace ecg::data
