#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "ecg/models.hpp"
#include "ecg/train.hpp"
#include "json.hpp"

namespace ecg::transfer {

namespace fs = std::filesystem;
using Model = models::Model<float>;

inline constexpr int kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'E', 'C', 'G', 'C', 'K', 'P', 'T', '\0'};

struct Provenance {
  /// One of "PTB-XL", "CPSC18", "MedalCare", "synthetic:<tag>", "none".
  std::string source = "none";
  int epochs = 0;
  nlohmann::json final_val_metrics = nlohmann::json::object();

  nlohmann::json to_json() const;
  static Provenance from_json(const nlohmann::json& j);
  /// Throws ConfigError for a source outside the allowed set.
  void validate() const;
};

struct CheckpointTensor {
  std::string name;
  ad::Shape shape;
  bool buffer = false;  // batch-norm running statistics
  std::vector<float> values;
};

struct Checkpoint {
  int version = kCheckpointVersion;
  std::string fingerprint;
  models::ModelSpec spec;
  Provenance provenance;
  std::uint64_t seed = 0;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const;
};

/// Snapshot of a model's parameters and buffers.
Checkpoint capture(const Model& model, const Provenance& provenance, std::uint64_t seed);

/// Layout: 8-byte magic, u64 LE header length, JSON header (version,
/// fingerprint, spec, provenance, seed, name/shape/offset table), then the
/// tensors as consecutive little-endian float32 blocks. Written to a
/// temporary file and renamed into place.
void save_checkpoint(const Checkpoint& checkpoint, const fs::path& path);
void save_checkpoint(const Model& model, const Provenance& provenance, std::uint64_t seed, const fs::path& path);

/// Validates magic, version, fingerprint, the exact file size and every
/// tensor name and shape against the embedded spec before returning.
Checkpoint load_checkpoint(const fs::path& path);

/// Copies every tensor into `model`; names and shapes must match exactly.
void apply_checkpoint(const Checkpoint& checkpoint, Model& model);

/// Builds the checkpoint's architecture and loads its values.
std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& checkpoint);

/// Backbone tensors come from the checkpoint; the head is rebuilt for
/// `outputs` classes and initialized from `seed`.
std::unique_ptr<Model> adapt_head(const Checkpoint& checkpoint, int outputs, std::uint64_t seed);

enum class FineTuneMode { AllWeights, HeadOnly };
std::string_view to_string(FineTuneMode mode);
FineTuneMode parse_finetune_mode(std::string_view name);

/// learn::train with the trainable set chosen by `mode`.
learn::History finetune(Model& model, FineTuneMode mode, data::BatchIterator& train_it,
                        const data::BatchIterator* val_it, data::TaskKind task, learn::TrainOptions options);

/// FNV-1a 64 of a tensor's little-endian bytes.
std::uint64_t tensor_hash(std::span<const float> values);
/// Combined hash over the named tensors that do (head=true) or do not
/// (head=false) start with the head prefix, in name order.
std::uint64_t group_hash(const Checkpoint& checkpoint, bool head);

/// Names of tensors whose bytes differ; both must share names and shapes.
std::vector<std::string> changed_tensors(const Checkpoint& before, const Checkpoint& after);

}  // namespace ecg::transfer
