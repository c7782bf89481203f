#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ecg/dataio.hpp"
#include "ecg/models.hpp"
#include "ecg/train.hpp"
#include "ecg/transfer.hpp"
#include "json.hpp"

namespace ecg::config {

namespace fs = std::filesystem;

/// How records are assigned to train/validation/test.
struct SplitConfig {
  /// "ptbxl": manifest folds 1-8/9/10. "folds": manifest folds with the
  /// given validation/test ids. "stratified": folds recomputed with
  /// stratified_kfold(n_folds, seed) before mapping.
  std::string kind = "folds";
  int val_fold = 9;
  int test_fold = 10;
  int n_folds = 10;
};

struct FineTuneConfig {
  fs::path checkpoint;
  transfer::FineTuneMode mode = transfer::FineTuneMode::AllWeights;
};

/// Complete description of one run. Serialized as JSON; unknown keys are
/// rejected at every level.
struct RunConfig {
  std::string name = "run";
  fs::path manifest;
  data::TaskKind task = data::TaskKind::Binary;
  data::PipelineConfig pipeline;
  models::ModelSpec model;
  learn::OptimizerConfig optimizer;
  learn::LossConfig loss;
  SplitConfig split;
  std::uint64_t seed = 0;
  fs::path output_dir;
  /// Recorded as provenance in checkpoints written by this run.
  std::string source = "none";
  std::optional<FineTuneConfig> finetune;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  void validate() const;
};

RunConfig load_run_config(const fs::path& path);
void save_run_config(const RunConfig& cfg, const fs::path& path);

/// Sets a dotted key ("optimizer.lr") in a JSON tree. The value text is
/// parsed as JSON when possible, otherwise stored as a string. The key must
/// already exist unless its parent is an object that accepts new members.
void set_dotted(nlohmann::json& tree, const std::string& dotted, const std::string& value);

/// Applies "key=value" overrides and re-validates.
RunConfig with_overrides(const RunConfig& cfg, const std::vector<std::string>& overrides);

/// Environment variable naming the default output root.
inline constexpr const char* kOutputRootEnv = "ECG_OUTPUT_ROOT";
fs::path default_output_root();

}  // namespace ecg::config
