#include <gtest/gtest.h>

#include <fstream>
#include <numeric>

#include "ecg/error.hpp"
#include "ecg/transfer.hpp"

using namespace ecg;
using namespace ecg::transfer;
namespace fs = std::filesystem;
using Kind = CheckpointError::Kind;

namespace {

class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() / (std::string("ecg_transfer_") + info->test_suite_name() + "_" + info->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary);
  f << bytes;
}

Kind load_error(const fs::path& p) {
  try {
    load_checkpoint(p);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "checkpoint loaded";
  return Kind::Io;
}

models::ModelSpec small(models::Architecture a, int k) { return models::reduced_spec(a, k); }

// Nudges every parameter and BN statistic so a reload cannot pass by
// coincidence with a fresh build.
void perturb(Model& m, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& p : m.named_parameters())
    for (auto& v : p.tensor.mutable_data()) v += static_cast<float>(0.1 * rng.normal());
  for (auto& b : m.named_buffers())
    for (auto& v : *b.values) v += static_cast<float>(0.5 + rng.uniform());
}

bool same_values(const Checkpoint& a, const Checkpoint& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    if (a.tensors[i].name != b.tensors[i].name || a.tensors[i].shape != b.tensors[i].shape) return false;
    if (a.tensors[i].values != b.tensors[i].values) return false;
  }
  return true;
}

struct Data {
  std::vector<EcgRecord> prepared;
  data::PipelineConfig pipe;
  std::vector<std::size_t> all;
};

Data tiny_data(int classes) {
  Data d;
  data::SyntheticSpec spec;
  spec.counts.assign(static_cast<std::size_t>(classes), 6);
  spec.length = 512;
  spec.seed = 17;
  const auto ds = data::generate_synthetic_dataset(spec);
  d.pipe.max_length = 512;
  d.pipe.segment_length = 256;
  for (const auto& r : ds.records) d.prepared.push_back(data::preprocess_static(r, d.pipe));
  d.all.resize(d.prepared.size());
  std::iota(d.all.begin(), d.all.end(), 0);
  return d;
}

learn::TrainOptions short_run() {
  learn::TrainOptions o;
  o.optim.epochs = 2;
  o.optim.batch_size = 4;
  o.optim.adam.lr = 1e-2;
  o.seed = 3;
  return o;
}

}  // namespace

TEST(Checkpoint, RoundTripEveryArchitecture) {
  TempDir dir;
  for (auto a : models::kAllArchitectures) {
    auto m = models::build<float>(small(a, 3), 5);
    perturb(*m, 6);
    const Provenance prov{"synthetic:test", 4, {{"f1", 0.5}}};
    const auto path = dir.path() / (std::string(models::to_string(a)) + ".ckpt");
    save_checkpoint(*m, prov, 5, path);

    const auto back = load_checkpoint(path);
    EXPECT_TRUE(same_values(capture(*m, prov, 5), back)) << models::to_string(a);
    EXPECT_EQ(back.fingerprint, m->spec().fingerprint());
    EXPECT_EQ(back.provenance.source, "synthetic:test");
    EXPECT_EQ(back.provenance.epochs, 4);
    EXPECT_EQ(back.provenance.final_val_metrics["f1"], 0.5);

    // Reloaded model gives bitwise identical eval outputs.
    auto re = model_from_checkpoint(back);
    m->train(false);
    re->train(false);
    Rng rng(7);
    std::vector<float> xv(2 * kLeads * 256);
    for (auto& v : xv) v = static_cast<float>(rng.normal());
    const auto x = ad::Tensor<float>::from({2, kLeads, 256}, xv);
    const auto y1 = m->forward(x), y2 = re->forward(x);
    EXPECT_TRUE(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin())) << models::to_string(a);
  }
}

TEST(Checkpoint, StoresBatchNormStatistics) {
  auto m = models::build<float>(small(models::Architecture::ResNet18_1D, 2), 1);
  perturb(*m, 2);
  const auto c = capture(*m, {}, 1);
  std::size_t buffers = 0;
  for (const auto& t : c.tensors) buffers += t.buffer;
  EXPECT_EQ(buffers, m->named_buffers().size());
  EXPECT_GT(buffers, 0u);
}

TEST(Checkpoint, SaveLeavesNoTemporary) {
  TempDir dir;
  auto m = models::build<float>(small(models::Architecture::CRNN_GRU, 1), 1);
  save_checkpoint(*m, {}, 1, dir.path() / "a.ckpt");
  save_checkpoint(*m, {}, 1, dir.path() / "a.ckpt");
  EXPECT_EQ(std::distance(fs::directory_iterator(dir.path()), fs::directory_iterator{}), 1);
}

TEST(Checkpoint, DistinctFailureKinds) {
  TempDir dir;
  auto m = models::build<float>(small(models::Architecture::ResNet18_1D, 2), 1);
  const auto good = dir.path() / "good.ckpt";
  save_checkpoint(*m, {}, 1, good);
  const auto bytes = read_file(good);
  const auto bad = dir.path() / "bad.ckpt";

  EXPECT_EQ(load_error(dir.path() / "absent.ckpt"), Kind::Io);

  write_file(bad, bytes.substr(0, bytes.size() - 1));
  EXPECT_EQ(load_error(bad), Kind::Format);
  write_file(bad, bytes + "x");
  EXPECT_EQ(load_error(bad), Kind::Format);
  write_file(bad, bytes.substr(0, 12));
  EXPECT_EQ(load_error(bad), Kind::Format);

  auto magic = bytes;
  magic[0] = 'X';
  write_file(bad, magic);
  EXPECT_EQ(load_error(bad), Kind::Format);

  auto version = bytes;
  const auto vpos = version.find("\"version\":1");
  ASSERT_NE(vpos, std::string::npos);
  version[vpos + 10] = '7';
  write_file(bad, version);
  EXPECT_EQ(load_error(bad), Kind::Version);

  auto finger = bytes;
  const auto fp = m->spec().fingerprint();
  const auto fpos = finger.find(fp);
  ASSERT_NE(fpos, std::string::npos);
  finger[fpos] = fp[0] == '0' ? '1' : '0';
  write_file(bad, finger);
  EXPECT_EQ(load_error(bad), Kind::Fingerprint);

  auto c = capture(*m, {}, 1);
  c.tensors[0].shape[0] += 1;
  c.tensors[0].values.resize(static_cast<std::size_t>(ad::numel(c.tensors[0].shape)));
  save_checkpoint(c, bad);
  EXPECT_EQ(load_error(bad), Kind::Shape);

  auto missing = capture(*m, {}, 1);
  missing.tensors.erase(missing.tensors.begin() + 1);
  save_checkpoint(missing, bad);
  EXPECT_EQ(load_error(bad), Kind::Missing);
}

TEST(Checkpoint, TruncatedFileMessageGivesSizes) {
  TempDir dir;
  auto m = models::build<float>(small(models::Architecture::CRNN_GRU, 1), 1);
  const auto path = dir.path() / "t.ckpt";
  save_checkpoint(*m, {}, 1, path);
  const auto bytes = read_file(path);
  write_file(path, bytes.substr(0, bytes.size() - 8));
  try {
    load_checkpoint(path);
    FAIL();
  } catch (const CheckpointError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find(std::to_string(bytes.size())), std::string::npos) << what;
    EXPECT_NE(what.find(std::to_string(bytes.size() - 8)), std::string::npos) << what;
  }
}

TEST(Checkpoint, ApplyRejectsOtherArchitecture) {
  auto a = models::build<float>(small(models::Architecture::ResNet18_1D, 2), 1);
  auto b = models::build<float>(small(models::Architecture::CRNN_GRU, 2), 1);
  const auto before = capture(*b, {}, 1);
  EXPECT_THROW(apply_checkpoint(capture(*a, {}, 1), *b), CheckpointError);
  EXPECT_TRUE(same_values(before, capture(*b, {}, 1)));
}

TEST(Provenance, Sources) {
  for (const char* ok : {"PTB-XL", "CPSC18", "MedalCare", "synthetic:x", "none"})
    EXPECT_NO_THROW((Provenance{ok}).validate()) << ok;
  EXPECT_THROW((Provenance{"imagenet"}).validate(), ConfigError);
  const Provenance p{"CPSC18", 12, {{"auc", 0.9}}};
  const auto back = Provenance::from_json(p.to_json());
  EXPECT_EQ(back.source, "CPSC18");
  EXPECT_EQ(back.epochs, 12);
  EXPECT_EQ(back.final_val_metrics, p.final_val_metrics);
}

TEST(AdaptHead, KeepsBackboneAndReinitializesHead) {
  for (auto a : models::kAllArchitectures) {
    auto src = models::build<float>(small(a, 9), 2);
    perturb(*src, 3);
    const auto ck = capture(*src, {"PTB-XL"}, 2);

    auto adapted = adapt_head(ck, 1, 44);
    EXPECT_EQ(adapted->spec().outputs, 1);
    const auto out = capture(*adapted, {}, 44);
    EXPECT_EQ(group_hash(out, false), group_hash(ck, false)) << models::to_string(a);

    auto spec = small(a, 1);
    auto fresh = models::build<float>(spec, 44);
    EXPECT_EQ(group_hash(out, true), group_hash(capture(*fresh, {}, 44), true)) << models::to_string(a);
    for (auto& p : adapted->head_parameters()) {
      if (p.name == "head.weight") {
        EXPECT_EQ(p.tensor.dim(0), 1);
      }
    }
  }
}

TEST(AdaptHead, SameClassCountStillReinitializes) {
  auto src = models::build<float>(small(models::Architecture::CRNN_GRU, 2), 2);
  perturb(*src, 3);
  const auto ck = capture(*src, {}, 2);
  const auto out = capture(*adapt_head(ck, 2, 2), {}, 2);
  EXPECT_NE(group_hash(out, true), group_hash(ck, true));
}

TEST(FineTune, Modes) {
  EXPECT_EQ(parse_finetune_mode("all"), FineTuneMode::AllWeights);
  EXPECT_EQ(parse_finetune_mode("head"), FineTuneMode::HeadOnly);
  EXPECT_EQ(to_string(FineTuneMode::HeadOnly), "head");
  EXPECT_THROW(parse_finetune_mode("backbone"), ConfigError);
}

class FineTuneArch : public ::testing::TestWithParam<models::Architecture> {};

TEST_P(FineTuneArch, HeadOnlyTouchesOnlyHead) {
  const auto d = tiny_data(2);
  auto src = models::build<float>(small(GetParam(), 5), 2);
  perturb(*src, 4);
  const auto ck = capture(*src, {"synthetic:src"}, 2);

  auto head_model = adapt_head(ck, 2, 8);
  const auto start = capture(*head_model, {}, 8);
  data::BatchIterator it(d.prepared, d.all, 4, d.pipe, data::Mode::Train, 1, 2);
  auto opt = short_run();
  opt.restore_best = false;
  finetune(*head_model, FineTuneMode::HeadOnly, it, nullptr, data::TaskKind::MultiClass, opt);
  const auto after = capture(*head_model, {}, 8);
  EXPECT_EQ(group_hash(after, false), group_hash(ck, false));
  for (const auto& name : changed_tensors(start, after)) EXPECT_TRUE(name.starts_with(models::kHeadPrefix)) << name;
  EXPECT_NE(group_hash(after, true), group_hash(start, true));

  auto all_model = adapt_head(ck, 2, 8);
  finetune(*all_model, FineTuneMode::AllWeights, it, nullptr, data::TaskKind::MultiClass, opt);
  const auto all_after = capture(*all_model, {}, 8);
  EXPECT_NE(group_hash(all_after, false), group_hash(ck, false));
  EXPECT_NE(group_hash(all_after, true), group_hash(start, true));
}

INSTANTIATE_TEST_SUITE_P(All, FineTuneArch, ::testing::ValuesIn(models::kAllArchitectures),
                         [](const auto& info) { return std::string(models::to_string(info.param)); });

TEST(Hashes, TensorHashIsFnv) {
  // FNV-1a of the empty string.
  EXPECT_EQ(tensor_hash({}), 0xcbf29ce484222325ULL);
  const std::vector<float> a{1.0f, 2.0f}, b{1.0f, 2.0000002f};
  EXPECT_NE(tensor_hash(a), tensor_hash(b));
}
