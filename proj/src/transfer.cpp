#include "ecg/transfer.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "ecg/error.hpp"

namespace ecg::transfer {

using nlohmann::json;
using Kind = CheckpointError::Kind;

json Provenance::to_json() const {
  return {{"source", source}, {"epochs", epochs}, {"final_val_metrics", final_val_metrics}};
}

Provenance Provenance::from_json(const json& j) {
  Provenance p;
  p.source = j.at("source").get<std::string>();
  p.epochs = j.value("epochs", 0);
  p.final_val_metrics = j.value("final_val_metrics", json::object());
  return p;
}

void Provenance::validate() const {
  static const std::vector<std::string> fixed = {"PTB-XL", "CPSC18", "MedalCare", "none"};
  if (std::find(fixed.begin(), fixed.end(), source) != fixed.end()) return;
  if (source.starts_with("synthetic:") && source.size() > 10) return;
  throw ConfigError("provenance source '" + source + "' must be PTB-XL, CPSC18, MedalCare, synthetic:<tag> or none");
}

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

Checkpoint capture(const Model& model, const Provenance& provenance, std::uint64_t seed) {
  Checkpoint c;
  c.spec = model.spec();
  c.fingerprint = c.spec.fingerprint();
  c.provenance = provenance;
  c.seed = seed;
  for (const auto& p : model.named_parameters())
    c.tensors.push_back({p.name, p.tensor.shape(), false, {p.tensor.data().begin(), p.tensor.data().end()}});
  for (const auto& b : const_cast<Model&>(model).named_buffers())
    c.tensors.push_back({b.name, {static_cast<std::int64_t>(b.values->size())}, true, *b.values});
  return c;
}

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_f32(std::string& out, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

float get_f32(const unsigned char* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(u);
}

std::vector<CheckpointTensor> skeleton(const models::ModelSpec& spec) {
  auto model = models::build<float>(spec, 0);
  return capture(*model, {}, 0).tensors;
}

}  // namespace

void save_checkpoint(const Checkpoint& checkpoint, const fs::path& path) {
  checkpoint.provenance.validate();
  json table = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : checkpoint.tensors) {
    if (static_cast<std::int64_t>(t.values.size()) != ad::numel(t.shape))
      throw CheckpointError(Kind::Shape, "checkpoint: tensor " + t.name + " does not fill its shape");
    table.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"kind", t.buffer ? "buffer" : "param"}});
    offset += 4 * t.values.size();
  }
  const json header = {{"version", checkpoint.version},
                       {"fingerprint", checkpoint.fingerprint},
                       {"spec", checkpoint.spec.to_json()},
                       {"provenance", checkpoint.provenance.to_json()},
                       {"seed", checkpoint.seed},
                       {"dtype", "f32"},
                       {"endianness", "little"},
                       {"tensors", table}};
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, 8);
  put_u64(out, h.size());
  out += h;
  out.reserve(out.size() + offset);
  for (const auto& t : checkpoint.tensors)
    for (float v : t.values) put_f32(out, v);

  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError(Kind::Io, "cannot write checkpoint " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw CheckpointError(Kind::Io, "cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

void save_checkpoint(const Model& model, const Provenance& provenance, std::uint64_t seed, const fs::path& path) {
  save_checkpoint(capture(model, provenance, seed), path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(Kind::Io, "cannot open checkpoint " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw CheckpointError(Kind::Format, "checkpoint " + path.string() + ": bad magic");
  const std::uint64_t hlen = get_u64(bytes.data() + 8);
  if (hlen > bytes.size() - 16) throw CheckpointError(Kind::Format, "checkpoint " + path.string() + ": header truncated");
  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const json::exception& e) {
    throw CheckpointError(Kind::Format, "checkpoint " + path.string() + ": unreadable header: " + e.what());
  }

  Checkpoint c;
  std::vector<std::pair<CheckpointTensor, std::uint64_t>> entries;
  try {
    c.version = header.at("version").get<int>();
    if (c.version != kCheckpointVersion)
      throw CheckpointError(Kind::Version, "checkpoint " + path.string() + ": version " + std::to_string(c.version) +
                                               " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
    if (header.value("dtype", "") != "f32") throw CheckpointError(Kind::Format, "checkpoint: dtype must be f32");
    c.fingerprint = header.at("fingerprint").get<std::string>();
    c.spec = models::ModelSpec::from_json(header.at("spec"));
    c.provenance = Provenance::from_json(header.at("provenance"));
    c.seed = header.at("seed").get<std::uint64_t>();
    for (const auto& t : header.at("tensors")) {
      CheckpointTensor ct;
      ct.name = t.at("name").get<std::string>();
      ct.shape = t.at("shape").get<ad::Shape>();
      ct.buffer = t.at("kind").get<std::string>() == "buffer";
      entries.emplace_back(std::move(ct), t.at("offset").get<std::uint64_t>());
    }
  } catch (const json::exception& e) {
    throw CheckpointError(Kind::Format, "checkpoint " + path.string() + ": malformed header: " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(Kind::Format, "checkpoint " + path.string() + ": invalid spec: " + e.what());
  }
  if (c.fingerprint != c.spec.fingerprint())
    throw CheckpointError(Kind::Fingerprint, "checkpoint " + path.string() + ": fingerprint " + c.fingerprint +
                                                 " does not match embedded spec (" + c.spec.fingerprint() + ")");

  // Names and shapes must equal what the spec builds, in order.
  const auto expected = skeleton(c.spec);
  std::map<std::string, const CheckpointTensor*> present;
  for (const auto& [t, off] : entries) present[t.name] = &t;
  for (const auto& e : expected) {
    const auto it = present.find(e.name);
    if (it == present.end()) throw CheckpointError(Kind::Missing, "checkpoint: missing tensor " + e.name);
    if (it->second->shape != e.shape)
      throw CheckpointError(Kind::Shape, "checkpoint: tensor " + e.name + " has shape " + ad::to_string(it->second->shape) +
                                             ", spec expects " + ad::to_string(e.shape));
  }
  if (entries.size() != expected.size()) {
    for (const auto& [t, off] : entries) {
      const bool known = std::any_of(expected.begin(), expected.end(), [&](const auto& e) { return e.name == t.name; });
      if (!known) throw CheckpointError(Kind::Missing, "checkpoint: unexpected tensor " + t.name);
    }
    throw CheckpointError(Kind::Format, "checkpoint: duplicate tensor names");
  }

  const std::uint64_t data_start = 16 + hlen;
  std::uint64_t total = 0;
  for (const auto& [t, off] : entries) {
    if (off != total) throw CheckpointError(Kind::Format, "checkpoint: tensor " + t.name + " has a non-contiguous offset");
    total += 4 * static_cast<std::uint64_t>(ad::numel(t.shape));
  }
  if (bytes.size() != data_start + total)
    throw CheckpointError(Kind::Format, "checkpoint " + path.string() + ": expected " + std::to_string(data_start + total) +
                                            " bytes, found " + std::to_string(bytes.size()));
  for (auto& [t, off] : entries) {
    const auto n = static_cast<std::size_t>(ad::numel(t.shape));
    t.values.resize(n);
    const unsigned char* p = bytes.data() + data_start + off;
    for (std::size_t i = 0; i < n; ++i) t.values[i] = get_f32(p + 4 * i);
    c.tensors.push_back(std::move(t));
  }
  return c;
}

void apply_checkpoint(const Checkpoint& checkpoint, Model& model) {
  auto params = model.named_parameters();
  auto buffers = model.named_buffers();
  const std::size_t expected = params.size() + buffers.size();
  if (checkpoint.tensors.size() != expected)
    throw CheckpointError(Kind::Missing, "checkpoint holds " + std::to_string(checkpoint.tensors.size()) +
                                             " tensors, model has " + std::to_string(expected));
  // Validate everything before writing so a failure leaves the model intact.
  for (auto& p : params) {
    const auto* t = checkpoint.find(p.name);
    if (!t) throw CheckpointError(Kind::Missing, "checkpoint: missing tensor " + p.name);
    if (t->shape != p.tensor.shape())
      throw CheckpointError(Kind::Shape, "checkpoint: tensor " + p.name + " has shape " + ad::to_string(t->shape) +
                                             ", model expects " + ad::to_string(p.tensor.shape()));
  }
  for (auto& b : buffers) {
    const auto* t = checkpoint.find(b.name);
    if (!t) throw CheckpointError(Kind::Missing, "checkpoint: missing buffer " + b.name);
    if (t->values.size() != b.values->size()) throw CheckpointError(Kind::Shape, "checkpoint: buffer " + b.name + " size differs");
  }
  for (auto& p : params) {
    const auto* t = checkpoint.find(p.name);
    std::copy(t->values.begin(), t->values.end(), p.tensor.mutable_data().begin());
  }
  for (auto& b : buffers) *b.values = checkpoint.find(b.name)->values;
}

std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& checkpoint) {
  auto model = models::build<float>(checkpoint.spec, checkpoint.seed);
  apply_checkpoint(checkpoint, *model);
  return model;
}

std::unique_ptr<Model> adapt_head(const Checkpoint& checkpoint, int outputs, std::uint64_t seed) {
  models::ModelSpec spec = checkpoint.spec;
  spec.outputs = outputs;
  auto model = models::build<float>(spec, seed);
  if (model->head_parameters().empty())
    throw CheckpointError(Kind::Architecture, std::string(models::to_string(spec.architecture)) +
                                                  " has no parameters under the head prefix");
  for (auto& p : model->backbone_parameters()) {
    const auto* t = checkpoint.find(p.name);
    if (!t) throw CheckpointError(Kind::Missing, "checkpoint: missing tensor " + p.name);
    if (t->shape != p.tensor.shape()) throw CheckpointError(Kind::Shape, "checkpoint: tensor " + p.name + " shape differs");
    std::copy(t->values.begin(), t->values.end(), p.tensor.mutable_data().begin());
  }
  for (auto& b : model->named_buffers()) {
    if (b.name.starts_with(models::kHeadPrefix)) continue;
    const auto* t = checkpoint.find(b.name);
    if (!t || t->values.size() != b.values->size()) throw CheckpointError(Kind::Missing, "checkpoint: missing buffer " + b.name);
    *b.values = t->values;
  }
  return model;
}

std::string_view to_string(FineTuneMode mode) { return mode == FineTuneMode::AllWeights ? "all" : "head"; }

FineTuneMode parse_finetune_mode(std::string_view name) {
  if (name == "all") return FineTuneMode::AllWeights;
  if (name == "head") return FineTuneMode::HeadOnly;
  throw ConfigError("finetune mode must be 'all' or 'head', got '" + std::string(name) + "'");
}

learn::History finetune(Model& model, FineTuneMode mode, data::BatchIterator& train_it, const data::BatchIterator* val_it,
                        data::TaskKind task, learn::TrainOptions options) {
  options.head_only = mode == FineTuneMode::HeadOnly;
  return learn::train(model, train_it, val_it, task, options);
}

std::uint64_t tensor_hash(std::span<const float> values) {
  std::string bytes;
  bytes.reserve(values.size() * 4);
  for (float v : values) put_f32(bytes, v);
  return fnv1a64(bytes);
}

std::uint64_t group_hash(const Checkpoint& checkpoint, bool head) {
  std::vector<const CheckpointTensor*> sel;
  for (const auto& t : checkpoint.tensors)
    if (t.name.starts_with(models::kHeadPrefix) == head) sel.push_back(&t);
  std::sort(sel.begin(), sel.end(), [](auto* a, auto* b) { return a->name < b->name; });
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* t : sel) {
    h = fnv1a64(t->name, h);
    std::string th;
    put_u64(th, tensor_hash(t->values));
    h = fnv1a64(th, h);
  }
  return h;
}

std::vector<std::string> changed_tensors(const Checkpoint& before, const Checkpoint& after) {
  std::vector<std::string> out;
  for (const auto& t : before.tensors) {
    const auto* u = after.find(t.name);
    if (!u || u->shape != t.shape) throw CheckpointError(Kind::Shape, "changed_tensors: layouts differ at " + t.name);
    if (std::memcmp(t.values.data(), u->values.data(), 4 * t.values.size()) != 0) out.push_back(t.name);
  }
  return out;
}

}  // namespace ecg::transfer
