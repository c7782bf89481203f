#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>

#include "ecg/dataio.hpp"
#include "ecg/error.hpp"
#include "oracles.hpp"

using namespace ecg;
using namespace ecg::data;

namespace {

class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() / (std::string("ecg_dataio_") + info->test_suite_name() + "_" + info->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

void write_bytes(const fs::path& p, const std::vector<std::int16_t>& raw) {
  std::ofstream out(p, std::ios::binary);
  for (auto v : raw) {
    const auto u = static_cast<std::uint16_t>(v);
    out.put(static_cast<char>(u & 0xff));
    out.put(static_cast<char>(u >> 8));
  }
}

void write_header(const fs::path& p, int nsig, double fs, std::int64_t nsamp, double gain, int baseline) {
  std::ofstream out(p);
  out << "rec " << nsig << ' ' << fs << ' ' << nsamp << '\n';
  for (int c = 0; c < nsig; ++c) out << "rec.dat 16 " << gain << '(' << baseline << ")/mV 16 0 0 0 0 L" << c << '\n';
}

Schema two_classes() {
  Schema s;
  s.task = TaskKind::MultiClass;
  s.classes = {"a", "b"};
  return s;
}

SyntheticSpec small_spec(std::int64_t length = 256) {
  SyntheticSpec s;
  s.counts = {64, 64};
  s.length = length;
  s.seed = 5;
  return s;
}

}  // namespace

// ------------------------------------------------------------------- WFDB

TEST(Wfdb, GainArithmetic) {
  TempDir dir;
  // Two samples per lead; lead c holds raw [200, -200] shifted by c.
  std::vector<std::int16_t> raw;
  for (int t = 0; t < 2; ++t)
    for (int c = 0; c < kLeads; ++c) raw.push_back(static_cast<std::int16_t>((t == 0 ? 200 : -200) + 10 * c));
  write_bytes(dir.path() / "rec.dat", raw);
  write_header(dir.path() / "rec.hea", 12, 500, 2, 200, 0);
  const auto r = load_wfdb_record(dir.path() / "rec.hea");
  EXPECT_EQ(r.fs, 500.0);
  ASSERT_EQ(r.length, 2);
  EXPECT_EQ(r.lead(0)[0], 1.0);
  EXPECT_EQ(r.lead(0)[1], -1.0);
  for (int c = 0; c < kLeads; ++c) {
    EXPECT_DOUBLE_EQ(r.lead(c)[0], (200.0 + 10 * c) / 200.0);
    EXPECT_DOUBLE_EQ(r.lead(c)[1], (-200.0 + 10 * c) / 200.0);
  }
}

TEST(Wfdb, Baseline) {
  TempDir dir;
  std::vector<std::int16_t> raw(kLeads, 1124);
  write_bytes(dir.path() / "rec.dat", raw);
  write_header(dir.path() / "rec.hea", 12, 500, 1, 1000, 100);
  const auto r = load_wfdb_record(dir.path() / "rec.hea");
  for (int c = 0; c < kLeads; ++c) EXPECT_DOUBLE_EQ(r.lead(c)[0], 1.024);
}

TEST(Wfdb, SizeCheck) {
  TempDir dir;
  std::vector<std::int16_t> raw(12 * 5000, 7);
  write_bytes(dir.path() / "rec.dat", raw);
  write_header(dir.path() / "rec.hea", 12, 500, 5000, 200, 0);
  const auto r = load_wfdb_record(dir.path() / "rec.hea");
  EXPECT_EQ(r.length, 5000);
  EXPECT_EQ(r.fs, 500.0);

  fs::resize_file(dir.path() / "rec.dat", 12 * 5000 * 2 - 1);
  try {
    load_wfdb_record(dir.path() / "rec.hea");
    FAIL() << "truncated file accepted";
  } catch (const DataError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("120000"), std::string::npos) << what;
    EXPECT_NE(what.find("119999"), std::string::npos) << what;
  }
}

TEST(Wfdb, LeadCount) {
  TempDir dir;
  write_bytes(dir.path() / "rec.dat", std::vector<std::int16_t>(11 * 4, 0));
  write_header(dir.path() / "rec.hea", 11, 500, 4, 200, 0);
  EXPECT_THROW(load_wfdb_record(dir.path() / "rec.hea"), DataError);
}

TEST(Wfdb, RoundTrip) {
  TempDir dir;
  EcgRecord r("rt", 500.0, 300);
  Rng rng(3);
  for (auto& v : r.signal) v = 2.0 * rng.normal();
  WfdbOptions opt;
  opt.gain = 200.0;
  const auto hea = write_wfdb_record(r, dir.path(), opt);
  const auto back = load_wfdb_record(hea);
  ASSERT_EQ(back.length, r.length);
  EXPECT_EQ(back.fs, r.fs);
  for (std::size_t i = 0; i < r.signal.size(); ++i) {
    // Integer domain is exact, mV within one quantisation step.
    const double raw = std::round(r.signal[i] * 200.0);
    EXPECT_EQ(std::round(back.signal[i] * 200.0), raw);
    EXPECT_EQ(back.signal[i], raw / 200.0);
    EXPECT_LE(std::abs(back.signal[i] - r.signal[i]), 1.0 / 200.0);
  }
  // Writing the loaded record again is lossless.
  const auto hea2 = write_wfdb_record(back, dir.path() / "b", opt);
  EXPECT_EQ(load_wfdb_record(hea2).signal, back.signal);
}

TEST(Csv, LoadsWithHeader) {
  TempDir dir;
  {
    std::ofstream out(dir.path() / "r.csv");
    out << "I,II,III,aVR,aVL,aVF,V1,V2,V3,V4,V5,V6\n";
    for (int t = 0; t < 3; ++t) {
      for (int c = 0; c < kLeads; ++c) out << (c ? "," : "") << t + 0.5 * c;
      out << '\n';
    }
  }
  const auto r = load_record(dir.path() / "r.csv", 250.0);
  EXPECT_EQ(r.length, 3);
  EXPECT_EQ(r.fs, 250.0);
  EXPECT_EQ(r.lead(4)[2], 4.0);
  EXPECT_THROW(load_record(dir.path() / "r.edf", 500.0), DataError);
}

// ----------------------------------------------------------------- manifest

TEST(Manifest, RoundTripAndMissingColumn) {
  TempDir dir;
  Manifest m;
  m.directory = dir.path();
  m.schema = two_classes();
  m.has_folds = true;
  m.entries = {{"r1", "x/r1.hea", {1, 0}, 3}, {"r2", "x/r2.hea", {0, 1}, 9}};
  write_manifest(m, dir.path() / "manifest.csv");
  const auto back = read_manifest(dir.path() / "manifest.csv");
  ASSERT_EQ(back.entries.size(), 2u);
  EXPECT_EQ(back.entries[1].labels, (LabelVector{0, 1}));
  EXPECT_EQ(back.entries[1].fold, 9);
  EXPECT_EQ(back.schema.classes, m.schema.classes);
  EXPECT_TRUE(back.has_folds);

  {
    std::ofstream out(dir.path() / "manifest.csv");
    out << "id,path,fold\nr1,x/r1.hea,3\n";
  }
  try {
    read_manifest(dir.path() / "manifest.csv");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("missing column 'labels'"), std::string::npos);
  }
}

TEST(Manifest, BadLabels) {
  const auto s = two_classes();
  EXPECT_EQ(parse_labels(s, "b", "x"), (LabelVector{0, 1}));
  EXPECT_THROW(parse_labels(s, "c", "x"), DataError);
  EXPECT_THROW(parse_labels(s, "a;b", "x"), DataError);
  Schema ml = s;
  ml.task = TaskKind::MultiLabel;
  EXPECT_EQ(parse_labels(ml, "a;b", "x"), (LabelVector{1, 1}));
  EXPECT_EQ(format_labels(ml, {1, 1}), "a;b");
}

// ------------------------------------------------------------------- splits

TEST(Split, Ptbxl) {
  Manifest m;
  m.schema = two_classes();
  m.has_folds = true;
  for (int f = 1; f <= 10; ++f)
    for (int i = 0; i < 3; ++i) m.entries.push_back({"r" + std::to_string(f * 10 + i), "p", {1, 0}, f});
  const auto plan = ptbxl_split(m);
  for (auto i : plan.test) EXPECT_EQ(m.entries[i].fold, 10);
  for (auto i : plan.val) EXPECT_EQ(m.entries[i].fold, 9);
  for (auto i : plan.train) {
    EXPECT_GE(m.entries[i].fold, 1);
    EXPECT_LE(m.entries[i].fold, 8);
  }
  EXPECT_EQ(plan.train.size() + plan.val.size() + plan.test.size(), m.entries.size());
  std::set<std::size_t> all(plan.train.begin(), plan.train.end());
  all.insert(plan.val.begin(), plan.val.end());
  all.insert(plan.test.begin(), plan.test.end());
  EXPECT_EQ(all.size(), m.entries.size());

  m.has_folds = false;
  EXPECT_THROW(ptbxl_split(m), DataError);
  m.has_folds = true;
  m.entries[0].fold = 11;
  EXPECT_THROW(ptbxl_split(m), DataError);
}

TEST(Split, Stratified55) {
  std::vector<LabelVector> labels;
  for (int i = 0; i < 50; ++i) labels.push_back({1, 0});
  for (int i = 0; i < 50; ++i) labels.push_back({0, 1});
  const auto folds = stratified_kfold(labels, two_classes(), 10, 1);
  std::vector<std::array<int, 2>> counts(11, {0, 0});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ASSERT_GE(folds[i], 1);
    ASSERT_LE(folds[i], 10);
    ++counts[folds[i]][labels[i][1]];
  }
  for (int f = 1; f <= 10; ++f) {
    EXPECT_EQ(counts[f][0], 5);
    EXPECT_EQ(counts[f][1], 5);
  }
}

TEST(Split, StratifiedTooFew) {
  std::vector<LabelVector> labels;
  for (int i = 0; i < 40; ++i) labels.push_back({1, 0});
  for (int i = 0; i < 9; ++i) labels.push_back({0, 1});
  try {
    stratified_kfold(labels, two_classes(), 10, 1);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos);
  }
}

TEST(Split, StratifiedDeterministicAndCovering) {
  Schema ml;
  ml.task = TaskKind::MultiLabel;
  ml.classes = {"a", "b", "c", "d", "e"};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    std::vector<LabelVector> labels;
    for (int i = 0; i < 400; ++i) {
      LabelVector v(5, 0);
      v[rng.uniform_int(0, 4)] = 1;
      for (int c = 0; c < 5; ++c)
        if (rng.bernoulli(c == 4 ? 0.02 : 0.2)) v[c] = 1;
      labels.push_back(v);
    }
    const auto a = stratified_kfold(labels, ml, 10, 42);
    EXPECT_EQ(a, stratified_kfold(labels, ml, 10, 42));
    for (int c = 0; c < 5; ++c) {
      std::vector<int> per_fold(11, 0);
      for (std::size_t i = 0; i < labels.size(); ++i) per_fold[a[i]] += labels[i][c];
      EXPECT_GE(*std::min_element(per_fold.begin() + 1, per_fold.end()), 1) << "class " << c;
    }
    std::vector<int> sizes(11, 0);
    for (int f : a) ++sizes[f];
    EXPECT_LE(*std::max_element(sizes.begin() + 1, sizes.end()) - *std::min_element(sizes.begin() + 1, sizes.end()),
              10);
  }
}

TEST(Split, ByFolds) {
  const auto plan = split_by_folds({1, 2, 3, 1, 2, 3}, 2, 3, 3);
  EXPECT_EQ(plan.train, (std::vector<std::size_t>{0, 3}));
  EXPECT_EQ(plan.val, (std::vector<std::size_t>{1, 4}));
  EXPECT_EQ(plan.test, (std::vector<std::size_t>{2, 5}));
  EXPECT_THROW(split_by_folds({1, 2}, 2, 2, 3), ConfigError);
}

// ---------------------------------------------------------------- synthetic

TEST(Synthetic, Counts) {
  const auto ds = generate_synthetic_dataset(small_spec());
  ASSERT_EQ(ds.records.size(), 128u);
  int b = 0;
  for (const auto& r : ds.records) {
    EXPECT_NO_THROW(r.validate());
    EXPECT_EQ(r.labels[0] + r.labels[1], 1);
    b += r.labels[1];
    EXPECT_EQ(r.length, 256);
  }
  EXPECT_EQ(b, 64);
}

TEST(Synthetic, Deterministic) {
  const auto a = generate_synthetic_dataset(small_spec());
  const auto b = generate_synthetic_dataset(small_spec());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].signal, b.records[i].signal);
    EXPECT_EQ(a.records[i].labels, b.records[i].labels);
  }
  auto other = small_spec();
  other.seed = 6;
  EXPECT_NE(generate_synthetic_dataset(other).records[0].signal, a.records[0].signal);
}

TEST(Synthetic, PeHsmShape) {
  SyntheticSpec train;
  train.task = TaskKind::Binary;
  train.counts = {602, 222};
  train.length = 64;
  SyntheticSpec test = train;
  test.counts = {64, 39};
  test.seed = 1;
  for (auto [spec, pos, total] : {std::tuple{train, 222, 824}, std::tuple{test, 39, 103}}) {
    const auto ds = generate_synthetic_dataset(spec);
    ASSERT_EQ(static_cast<int>(ds.records.size()), total);
    int positives = 0;
    for (const auto& r : ds.records) {
      ASSERT_EQ(r.labels.size(), 1u);
      positives += r.labels[0];
    }
    EXPECT_EQ(positives, pos);
    EXPECT_EQ(ds.schema.num_outputs(), 1);
  }
}

// Class 1 carries a 12 Hz oscillation on leads 2, 5, 8 and 11; a least-squares
// fit at that frequency separates the classes.
TEST(Synthetic, MatchedFilterRecoversLabels) {
  auto spec = small_spec(5000);
  spec.counts = {100, 100};
  const auto ds = generate_synthetic_dataset(spec);
  int correct = 0;
  for (const auto& r : ds.records) {
    double amp = 0.0;
    for (int c : {2, 5, 8, 11}) {
      std::vector<double> lead(r.lead(c).begin(), r.lead(c).end());
      amp += oracle::fit_sinusoid(lead, 12.0, r.fs, 0, lead.size()).amplitude / 4.0;
    }
    const int predicted = amp > 0.5 * spec.signature_amplitude ? 1 : 0;
    correct += predicted == r.labels[1];
  }
  EXPECT_GT(correct, 0.95 * ds.records.size());
}

TEST(Synthetic, WriteAndLoad) {
  TempDir dir;
  auto ds = generate_synthetic_dataset(small_spec());
  const auto m = write_dataset(ds, dir.path());
  const auto back = load_dataset(read_manifest(dir.path() / "manifest.csv"));
  ASSERT_EQ(back.records.size(), ds.records.size());
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    EXPECT_EQ(back.records[i].labels, ds.records[i].labels);
    for (std::size_t j = 0; j < ds.records[i].signal.size(); ++j)
      ASSERT_LE(std::abs(back.records[i].signal[j] - ds.records[i].signal[j]), 1e-3);
  }
}

// ---------------------------------------------------------------- pipeline

namespace {

std::vector<float> values(const ad::Tensor<float>& t) { return {t.data().begin(), t.data().end()}; }

std::vector<EcgRecord> prepared_set(std::int64_t length, const PipelineConfig& cfg) {
  const auto ds = generate_synthetic_dataset(small_spec(length));
  std::vector<EcgRecord> out;
  for (const auto& r : ds.records) out.push_back(preprocess_static(r, cfg));
  return out;
}

std::vector<std::size_t> all(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

TEST(Pipeline, BatchShapes) {
  PipelineConfig cfg;
  cfg.max_length = 2500;
  const auto prepared = prepared_set(2500, cfg);
  BatchIterator it(prepared, all(128), 32, cfg, Mode::Train, 1, 2);
  ASSERT_EQ(it.num_batches(), 4u);
  std::set<std::size_t> seen;
  for (std::size_t b = 0; b < 4; ++b) {
    const auto batch = it.batch(b);
    EXPECT_EQ(batch.x.shape(), (ad::Shape{32, 12, 2048}));
    EXPECT_EQ(batch.y.shape(), (ad::Shape{32, 2}));
    seen.insert(batch.indices.begin(), batch.indices.end());
  }
  EXPECT_EQ(seen.size(), 128u);
}

TEST(Pipeline, PartialBatch) {
  PipelineConfig cfg;
  cfg.filter = false;
  cfg.max_length = 0;
  cfg.segment_length = 100;
  const auto prepared = prepared_set(128, cfg);
  BatchIterator it(prepared, all(50), 16, cfg, Mode::Eval, 1, 2);
  ASSERT_EQ(it.num_batches(), 4u);
  EXPECT_EQ(it.batch(3).x.shape(), (ad::Shape{2, 12, 100}));
  EXPECT_THROW(it.batch(4), Error);
}

TEST(Pipeline, EvalIsDeterministicAndStartsAtZero) {
  PipelineConfig cfg;
  cfg.filter = false;
  cfg.max_length = 0;
  cfg.segment_length = 100;
  const auto prepared = prepared_set(256, cfg);
  BatchIterator a(prepared, all(20), 8, cfg, Mode::Eval, 1, 2);
  BatchIterator b(prepared, all(20), 8, cfg, Mode::Eval, 99, 2);
  b.set_epoch(7);
  for (std::size_t i = 0; i < a.num_batches(); ++i) {
    const auto ba = a.batch(i), bb = b.batch(i);
    EXPECT_EQ(values(ba.x), values(bb.x));
    EXPECT_EQ(ba.indices, bb.indices);
  }
  const auto first = a.batch(0);
  auto expect = signal::normalize(signal::apply_segment(prepared[0], {100, 0, 256}), cfg.normalization);
  for (std::size_t j = 0; j < expect.signal.size(); ++j)
    EXPECT_EQ(values(first.x)[j], static_cast<float>(expect.signal[j]));
}

TEST(Pipeline, TrainIsDeterministicUnderSeed) {
  PipelineConfig cfg;
  cfg.max_length = 600;
  cfg.segment_length = 300;
  cfg.augment.flip.p = cfg.augment.sine.p = 0.5;
  const auto prepared = prepared_set(600, cfg);
  BatchIterator a(prepared, all(64), 16, cfg, Mode::Train, 3, 2);
  BatchIterator b(prepared, all(64), 16, cfg, Mode::Train, 3, 2);
  for (std::uint64_t e = 0; e < 3; ++e) {
    a.set_epoch(e);
    b.set_epoch(e);
    for (std::size_t i = 0; i < a.num_batches(); ++i) {
      EXPECT_EQ(values(a.batch(i).x), values(b.batch(i).x));
      EXPECT_EQ(a.batch(i).indices, b.batch(i).indices);
    }
  }
  a.set_epoch(0);
  b.set_epoch(1);
  EXPECT_NE(a.batch(0).indices, b.batch(0).indices);
}

TEST(Pipeline, ShortRecordWithoutPadding) {
  PipelineConfig cfg;
  cfg.filter = false;
  cfg.max_length = 0;
  cfg.segment_length = 300;
  const auto prepared = prepared_set(256, cfg);
  BatchIterator it(prepared, all(4), 4, cfg, Mode::Eval, 1, 2);
  EXPECT_THROW(it.batch(0), DataError);
  // With padding enabled the same records are accepted.
  cfg.max_length = 300;
  const auto padded = prepared_set(256, cfg);
  EXPECT_NO_THROW(BatchIterator(padded, all(4), 4, cfg, Mode::Eval, 1, 2).batch(0));
}

TEST(Pipeline, OrderIsFilterThenPadThenSegmentThenNormalize) {
  PipelineConfig cfg;
  cfg.max_length = 1500;
  cfg.segment_length = 1000;
  cfg.augment = augment::AugmentConfig::none();
  const auto raw = generate_synthetic_dataset(small_spec(1200)).records[0];
  const auto prepared = preprocess_static(raw, cfg);
  auto expect = signal::pad_or_truncate(signal::butterworth_bandpass(raw, cfg.filter_spec), 1500);
  EXPECT_EQ(prepared.signal, expect.signal);
  Rng a(4), b(4);
  const auto drawn = preprocess_draw(prepared, cfg, Mode::Train, a);
  const auto manual = signal::normalize(signal::segment_extract(expect, 1000, b), cfg.normalization);
  EXPECT_EQ(drawn.signal, manual.signal);
}

TEST(Pipeline, InvalidConfig) {
  PipelineConfig cfg;
  cfg.max_length = 1000;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = PipelineConfig{};
  cfg.filter_spec.high_cut = 300;
  EXPECT_THROW(cfg.validate(), ConfigError);
  const std::vector<EcgRecord> none;
  EXPECT_THROW(BatchIterator(none, {}, 4, PipelineConfig{}, Mode::Eval, 1, 2), DataError);
}
