#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ecg/config.hpp"
#include "ecg/dataio.hpp"
#include "ecg/metrics.hpp"
#include "ecg/train.hpp"

namespace ecg::cli {

namespace fs = std::filesystem;

/// Process exit codes.
enum ExitCode : int { kOk = 0, kRuntimeFailure = 1, kConfigError = 2 };

/// Maps the exception in flight to an exit code and prints it to `err`.
int report_exception(std::ostream& err);

// ----------------------------------------------------------------- prepare

struct PrepareOptions {
  fs::path out_dir;
  /// Generate a synthetic dataset instead of reading `manifest`.
  std::optional<data::SyntheticSpec> synthetic;
  fs::path manifest;
  /// Assign stratified folds (synthetic data, or manifests without folds).
  int folds = 0;
  std::uint64_t fold_seed = 0;
  /// Write band-pass filtered copies of the records and mark the manifest.
  bool filter = false;
  signal::FilterSpec filter_spec;
};

struct PrepareSummary {
  fs::path manifest;
  std::size_t records = 0;
  std::vector<std::int64_t> class_counts;
  std::vector<std::int64_t> fold_counts;  // index 0 = fold 1
};

/// Writes a manifest (and records when generating or filtering) into
/// `out_dir`. Input datasets are never modified. Throws DataError listing
/// every unreadable record id.
PrepareSummary cmd_prepare(const PrepareOptions& options, std::ostream& out);

// ------------------------------------------------------------------- train

inline constexpr const char* kConfigFile = "config.json";
inline constexpr const char* kHistoryCsv = "history.csv";
inline constexpr const char* kHistoryJson = "history.json";
inline constexpr const char* kCheckpointFile = "best.ckpt";
inline constexpr const char* kReportFile = "report.json";

struct RunResult {
  fs::path dir;
  learn::History history;
  learn::MetricsReport val;
  learn::MetricsReport test;
  bool has_val = false;
  bool has_test = false;
};

/// Run directory for a config: output_dir if set, else <root>/<name>.
fs::path run_directory(const config::RunConfig& cfg);

/// Trains (or fine-tunes when cfg.finetune is set) and writes the run
/// directory. Config/checkpoint compatibility is checked before training.
RunResult cmd_train(const config::RunConfig& cfg, std::ostream* log);

// ------------------------------------------------------------------- sweep

/// Named override axes; the sweep runs their cartesian product.
struct SweepGrid {
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;

  /// {"optimizer.lr": [0.001, 0.0005], ...}; scalar values become text.
  static SweepGrid from_json(const nlohmann::json& j);
  std::vector<std::vector<std::string>> combinations() const;
};

struct SweepRow {
  std::string name;
  std::vector<std::string> overrides;
  fs::path dir;
  bool ok = false;
  std::string error;
  double val_f1 = 0.0;
  double test_f1 = 0.0;
};

/// Runs every grid point sequentially under the base seed; failures are
/// recorded and the sweep continues. Writes leaderboard.csv sorted by
/// descending validation F1 (failed runs last).
std::vector<SweepRow> cmd_sweep(const config::RunConfig& base, const SweepGrid& grid, const fs::path& sweep_dir,
                                std::ostream* log);

// ---------------------------------------------------------------- evaluate

/// Evaluates a checkpoint on one split ("train", "val", "test" or "all") of
/// the config's dataset.
learn::Evaluation cmd_evaluate(const config::RunConfig& cfg, const fs::path& checkpoint, const std::string& split);

// ------------------------------------------------------------------ report

struct ReportRow {
  std::string run;
  std::string model;
  std::string source;
  learn::MetricsReport metrics;
};

/// Reads each run's report.json (test metrics, else validation). Incomplete
/// run directories are skipped with a warning on `warn`. Writes table.md,
/// table.csv and radial.json into `out_dir`.
std::vector<ReportRow> cmd_report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir, std::ostream& warn);

std::string format_table_markdown(const std::vector<ReportRow>& rows);
std::string format_table_csv(const std::vector<ReportRow>& rows);
nlohmann::json radial_json(const learn::MetricsReport& m);

// ------------------------------------------------------- verify-checkpoint

struct VerifyResult {
  std::string fingerprint;
  std::uint64_t backbone_hash = 0;
  std::uint64_t head_hash = 0;
  std::size_t tensors = 0;
  /// Set when a second checkpoint was given.
  std::optional<bool> backbone_identical;
  std::optional<bool> head_identical;
  std::vector<std::string> changed;
};

/// Loads (and thereby validates) a checkpoint, prints its hashes and, with
/// `against`, compares backbone and head tensors by name.
VerifyResult cmd_verify_checkpoint(const fs::path& checkpoint, const std::optional<fs::path>& against, std::ostream& out);

}  // namespace ecg::cli
