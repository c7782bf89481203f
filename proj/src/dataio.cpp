#include "ecg/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

#include "ecg/error.hpp"
#include "json.hpp"

namespace ecg::data {

using nlohmann::json;

namespace {

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> tokens(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  std::string t;
  while (is >> t) out.push_back(t);
  return out;
}

double parse_double(const std::string& s, std::string_view what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(std::string(what) + ": cannot parse number '" + s + "'");
  }
}

long long parse_int(const std::string& s, std::string_view what) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(std::string(what) + ": cannot parse integer '" + s + "'");
  }
}

}  // namespace

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::MultiLabel: return "multilabel";
    case TaskKind::MultiClass: return "multiclass";
    case TaskKind::Binary: return "binary";
  }
  return "unknown";
}

TaskKind parse_task(std::string_view name) {
  for (auto k : {TaskKind::MultiLabel, TaskKind::MultiClass, TaskKind::Binary})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown task '" + std::string(name) + "' (expected multilabel, multiclass, binary)");
}

void Schema::validate() const {
  if (classes.empty()) throw DataError("schema: no classes declared");
  if (task == TaskKind::Binary && classes.size() != 1)
    throw DataError("schema: binary task must declare exactly one (positive) class");
  if (task == TaskKind::MultiClass && classes.size() < 2) throw DataError("schema: multiclass needs >= 2 classes");
  if (!(fs > 0.0)) throw DataError("schema: fs must be positive");
  std::vector<std::string> sorted = classes;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw DataError("schema: duplicate class names");
}

void Schema::check_labels(const LabelVector& labels, std::string_view id) const {
  if (labels.size() != classes.size())
    throw DataError("record " + std::string(id) + ": label vector length " + std::to_string(labels.size()) +
                    " does not match " + std::to_string(classes.size()) + " classes");
  for (auto v : labels)
    if (v > 1) throw DataError("record " + std::string(id) + ": labels must be binary");
  if (task == TaskKind::MultiClass && std::count(labels.begin(), labels.end(), 1) != 1)
    throw DataError("record " + std::string(id) + ": multiclass record must have exactly one label");
}

fs::path Manifest::resolve(const ManifestEntry& e) const {
  return e.path.is_absolute() ? e.path : directory / e.path;
}

std::string format_labels(const Schema& schema, const LabelVector& labels) {
  std::string out;
  for (std::size_t c = 0; c < labels.size(); ++c) {
    if (!labels[c]) continue;
    if (!out.empty()) out += ';';
    out += schema.classes[c];
  }
  return out;
}

LabelVector parse_labels(const Schema& schema, std::string_view field, std::string_view id) {
  LabelVector labels(schema.classes.size(), 0);
  const std::string f = trim(field);
  if (!f.empty()) {
    for (const auto& raw : split(f, ';')) {
      const std::string name = trim(raw);
      if (name.empty()) continue;
      const auto it = std::find(schema.classes.begin(), schema.classes.end(), name);
      if (it == schema.classes.end())
        throw DataError("record " + std::string(id) + ": unknown label '" + name + "'");
      labels[static_cast<std::size_t>(it - schema.classes.begin())] = 1;
    }
  }
  schema.check_labels(labels, id);
  return labels;
}

Manifest read_manifest(const fs::path& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw DataError("cannot open manifest " + csv_path.string());
  Manifest m;
  m.directory = csv_path.parent_path();
  const fs::path schema_path = m.directory / "schema.json";
  std::ifstream sin(schema_path);
  if (!sin) throw DataError("missing schema sidecar " + schema_path.string());
  try {
    const json j = json::parse(sin);
    m.schema.task = parse_task(j.at("task").get<std::string>());
    m.schema.classes = j.at("classes").get<std::vector<std::string>>();
    m.schema.fs = j.value("fs", 500.0);
    if (j.contains("prefiltered")) {
      const auto& p = j.at("prefiltered");
      m.prefiltered = true;
      m.prefilter.order = p.at("order").get<int>();
      m.prefilter.low_cut = p.at("low_cut").get<double>();
      m.prefilter.high_cut = p.at("high_cut").get<double>();
      m.prefilter.fs = m.schema.fs;
    }
  } catch (const json::exception& e) {
    throw DataError("schema " + schema_path.string() + ": " + e.what());
  }
  m.schema.validate();

  std::string line;
  if (!std::getline(in, line)) throw DataError("manifest " + csv_path.string() + " is empty");
  const auto header = split(trim(line), ',');
  auto column = [&](const std::string& name, bool required) -> int {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (trim(header[i]) == name) return static_cast<int>(i);
    if (required) throw DataError("manifest " + csv_path.string() + ": missing column '" + name + "'");
    return -1;
  };
  const int c_id = column("id", true);
  const int c_path = column("path", true);
  const int c_labels = column("labels", true);
  const int c_fold = column("fold", false);
  m.has_folds = c_fold >= 0;

  std::size_t row = 1;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto cells = split(line, ',');
    if (cells.size() != header.size())
      throw DataError("manifest row " + std::to_string(row) + ": expected " + std::to_string(header.size()) +
                      " fields, found " + std::to_string(cells.size()));
    ManifestEntry e;
    e.id = trim(cells[static_cast<std::size_t>(c_id)]);
    if (e.id.empty()) throw DataError("manifest row " + std::to_string(row) + ": empty id");
    if (!seen.emplace(e.id, row).second) throw DataError("manifest: duplicate id '" + e.id + "'");
    e.path = trim(cells[static_cast<std::size_t>(c_path)]);
    e.labels = parse_labels(m.schema, cells[static_cast<std::size_t>(c_labels)], e.id);
    if (c_fold >= 0) {
      const std::string f = trim(cells[static_cast<std::size_t>(c_fold)]);
      e.fold = f.empty() ? 0 : static_cast<int>(parse_int(f, "manifest fold"));
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

void write_manifest(const Manifest& manifest, const fs::path& csv_path) {
  fs::create_directories(csv_path.parent_path());
  {
    json j;
    j["task"] = to_string(manifest.schema.task);
    j["classes"] = manifest.schema.classes;
    j["fs"] = manifest.schema.fs;
    if (manifest.prefiltered) {
      j["prefiltered"] = {{"order", manifest.prefilter.order},
                          {"low_cut", manifest.prefilter.low_cut},
                          {"high_cut", manifest.prefilter.high_cut}};
    }
    std::ofstream out(csv_path.parent_path() / "schema.json");
    out << j.dump(2) << '\n';
    if (!out) throw Error("cannot write schema.json next to " + csv_path.string());
  }
  std::ofstream out(csv_path);
  out << "id,path,labels" << (manifest.has_folds ? ",fold" : "") << '\n';
  for (const auto& e : manifest.entries) {
    out << e.id << ',' << e.path.generic_string() << ',' << format_labels(manifest.schema, e.labels);
    if (manifest.has_folds) out << ',' << e.fold;
    out << '\n';
  }
  if (!out) throw Error("cannot write manifest " + csv_path.string());
}

// ------------------------------------------------------------------- WFDB

EcgRecord load_wfdb_record(const fs::path& header_path) {
  std::ifstream in(header_path);
  if (!in) throw DataError("cannot open WFDB header " + header_path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (!t.empty() && t[0] != '#') lines.push_back(t);
  }
  if (lines.empty()) throw DataError("WFDB header " + header_path.string() + " is empty");
  const auto rec = tokens(lines[0]);
  if (rec.size() < 2) throw DataError("WFDB header: malformed record line");
  const long long nsig = parse_int(rec[1], "WFDB signal count");
  if (nsig != kLeads)
    throw DataError("WFDB header " + header_path.string() + ": expected 12 leads, found " + std::to_string(nsig));
  double fs = 250.0;
  if (rec.size() >= 3) fs = parse_double(split(rec[2], '/')[0], "WFDB sampling frequency");
  long long nsamp = -1;
  if (rec.size() >= 4) nsamp = parse_int(rec[3], "WFDB sample count");
  if (static_cast<long long>(lines.size()) < 1 + nsig) throw DataError("WFDB header: missing signal lines");

  std::string file;
  std::vector<double> gain(kLeads), baseline(kLeads);
  for (int c = 0; c < kLeads; ++c) {
    const auto f = tokens(lines[1 + static_cast<std::size_t>(c)]);
    if (f.size() < 2) throw DataError("WFDB header: malformed signal line " + std::to_string(c + 1));
    if (c == 0) file = f[0];
    if (f[0] != file) throw DataError("WFDB header: signals spread over several files are not supported");
    if (split(f[1], 'x')[0] != "16") throw DataError("WFDB header: only format 16 is supported, got " + f[1]);
    double g = 200.0;
    double zero = 0.0;
    bool have_base = false;
    double base = 0.0;
    if (f.size() >= 3) {
      std::string spec = split(f[2], '/')[0];
      const auto paren = spec.find('(');
      if (paren != std::string::npos) {
        base = static_cast<double>(parse_int(spec.substr(paren + 1, spec.find(')') - paren - 1), "WFDB baseline"));
        have_base = true;
        spec = spec.substr(0, paren);
      }
      g = parse_double(spec, "WFDB gain");
      if (g == 0.0) g = 200.0;
    }
    if (f.size() >= 5) zero = static_cast<double>(parse_int(f[4], "WFDB ADC zero"));
    gain[static_cast<std::size_t>(c)] = g;
    baseline[static_cast<std::size_t>(c)] = have_base ? base : zero;
  }

  const fs::path dat = header_path.parent_path() / file;
  std::ifstream din(dat, std::ios::binary);
  if (!din) throw DataError("cannot open WFDB sample file " + dat.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(din)), std::istreambuf_iterator<char>());
  const std::size_t frame = 2 * kLeads;
  if (nsamp < 0) {
    if (bytes.size() % frame) throw DataError("WFDB sample file " + dat.string() + ": size is not a whole frame");
    nsamp = static_cast<long long>(bytes.size() / frame);
  }
  const std::size_t expected = static_cast<std::size_t>(nsamp) * frame;
  if (bytes.size() < expected)
    throw DataError("WFDB sample file " + dat.string() + " truncated: expected " + std::to_string(expected) +
                    " bytes, found " + std::to_string(bytes.size()));
  if (nsamp < 1) throw DataError("WFDB record " + header_path.string() + " has no samples");

  EcgRecord r(header_path.stem().string(), fs, nsamp);
  for (long long t = 0; t < nsamp; ++t) {
    for (int c = 0; c < kLeads; ++c) {
      const std::size_t o = static_cast<std::size_t>(t) * frame + 2 * static_cast<std::size_t>(c);
      const auto raw = static_cast<std::int16_t>(static_cast<std::uint16_t>(bytes[o] | (bytes[o + 1] << 8)));
      r.lead(c)[static_cast<std::size_t>(t)] =
          (static_cast<double>(raw) - baseline[static_cast<std::size_t>(c)]) / gain[static_cast<std::size_t>(c)];
    }
  }
  return r;
}

fs::path write_wfdb_record(const EcgRecord& record, const fs::path& directory, const WfdbOptions& options) {
  record.validate();
  fs::create_directories(directory);
  const std::string stem = record.id;
  const fs::path hea = directory / (stem + ".hea");
  const fs::path dat = directory / (stem + ".dat");
  std::vector<unsigned char> bytes(static_cast<std::size_t>(record.length) * 2 * kLeads);
  std::vector<std::int16_t> first(kLeads);
  for (std::int64_t t = 0; t < record.length; ++t) {
    for (int c = 0; c < kLeads; ++c) {
      double v = std::round(record.lead(c)[static_cast<std::size_t>(t)] * options.gain + options.baseline);
      v = std::clamp(v, -32768.0, 32767.0);
      const auto raw = static_cast<std::int16_t>(v);
      if (t == 0) first[static_cast<std::size_t>(c)] = raw;
      const auto u = static_cast<std::uint16_t>(raw);
      const std::size_t o = (static_cast<std::size_t>(t) * kLeads + static_cast<std::size_t>(c)) * 2;
      bytes[o] = static_cast<unsigned char>(u & 0xff);
      bytes[o + 1] = static_cast<unsigned char>(u >> 8);
    }
  }
  {
    std::ofstream out(dat, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("cannot write " + dat.string());
  }
  static constexpr const char* kLeadNames[kLeads] = {"I", "II", "III", "aVR", "aVL", "aVF",
                                                     "V1", "V2", "V3", "V4", "V5", "V6"};
  std::ofstream out(hea);
  out << stem << ' ' << kLeads << ' ' << record.fs << ' ' << record.length << '\n';
  for (int c = 0; c < kLeads; ++c) {
    out << stem << ".dat 16 " << options.gain << '(' << options.baseline << ")/mV 16 0 " << first[static_cast<std::size_t>(c)]
        << " 0 0 " << kLeadNames[c] << '\n';
  }
  if (!out) throw Error("cannot write " + hea.string());
  return hea;
}

EcgRecord load_csv_record(const fs::path& path, double fs) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open CSV record " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto cells = split(t, ',');
    if (cells.size() != kLeads)
      throw DataError("CSV record " + path.string() + ": expected 12 columns, found " + std::to_string(cells.size()));
    std::vector<double> row(kLeads);
    bool numeric = true;
    for (int c = 0; c < kLeads && numeric; ++c) {
      try {
        row[static_cast<std::size_t>(c)] = parse_double(trim(cells[static_cast<std::size_t>(c)]), "CSV sample");
      } catch (const DataError&) {
        if (!first) throw;
        numeric = false;
      }
    }
    first = false;
    if (numeric) rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError("CSV record " + path.string() + " has no samples");
  EcgRecord r(path.stem().string(), fs, static_cast<std::int64_t>(rows.size()));
  for (std::size_t t = 0; t < rows.size(); ++t)
    for (int c = 0; c < kLeads; ++c) r.lead(c)[t] = rows[t][static_cast<std::size_t>(c)];
  return r;
}

EcgRecord load_record(const fs::path& path, double fs) {
  const auto ext = path.extension().string();
  if (ext == ".hea") return load_wfdb_record(path);
  if (ext == ".csv") return load_csv_record(path, fs);
  throw DataError("unsupported record format '" + ext + "' for " + path.string());
}

// ----------------------------------------------------------------- splits

SplitPlan split_by_folds(const std::vector<int>& folds, int val_fold, int test_fold, int n_folds) {
  if (val_fold == test_fold) throw ConfigError("split: validation and test folds must differ");
  SplitPlan plan;
  for (std::size_t i = 0; i < folds.size(); ++i) {
    const int f = folds[i];
    if (f < 1 || f > n_folds)
      throw DataError("split: record " + std::to_string(i) + " has fold " + std::to_string(f) + " outside [1, " +
                      std::to_string(n_folds) + "]");
    if (f == val_fold) {
      plan.val.push_back(i);
    } else if (f == test_fold) {
      plan.test.push_back(i);
    } else {
      plan.train.push_back(i);
    }
  }
  return plan;
}

SplitPlan ptbxl_split(const Manifest& manifest) {
  if (!manifest.has_folds) throw DataError("ptbxl_split: manifest has no 'fold' column");
  std::vector<int> folds;
  folds.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) folds.push_back(e.fold);
  return split_by_folds(folds, 9, 10, 10);
}

std::vector<int> stratified_kfold(const std::vector<LabelVector>& labels, const Schema& schema, int k,
                                  std::uint64_t seed) {
  if (k < 2) throw ConfigError("stratified_kfold: k must be >= 2");
  const std::size_t n_classes = schema.classes.size();
  std::vector<std::size_t> positives(n_classes, 0);
  for (const auto& l : labels) {
    if (l.size() != n_classes) throw DataError("stratified_kfold: label vector length mismatch");
    for (std::size_t c = 0; c < n_classes; ++c) positives[c] += l[c];
  }
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (positives[c] < static_cast<std::size_t>(k))
      throw DataError("stratified_kfold: class '" + schema.classes[c] + "' has " + std::to_string(positives[c]) +
                      " positives, fewer than k=" + std::to_string(k));
  }

  // Group each record under its rarest positive class (ties by index).
  std::map<long, std::vector<std::size_t>> groups;
  std::vector<long> group_of(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    long g = -1;
    for (std::size_t c = 0; c < n_classes; ++c) {
      if (labels[i][c] && (g < 0 || positives[c] < positives[static_cast<std::size_t>(g)])) g = static_cast<long>(c);
    }
    group_of[i] = g;
    groups[g].push_back(i);
  }

  Rng rng = Rng(seed).substream("stratified_kfold");
  std::vector<int> folds(labels.size(), 0);
  std::size_t next = 0;
  for (auto& [g, members] : groups) {
    rng.shuffle(std::span<std::size_t>(members));
    for (std::size_t j = 0; j < members.size(); ++j) folds[members[j]] = static_cast<int>((next + j) % k) + 1;
    next = (next + members.size()) % static_cast<std::size_t>(k);
  }

  // Repair folds that lack a class by swapping within a group, which keeps
  // the per-group balance intact.
  auto count = [&](std::size_t c, int f) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) n += (folds[i] == f && labels[i][c]) ? 1 : 0;
    return n;
  };
  for (std::size_t c = 0; c < n_classes; ++c) {
    for (int f = 1; f <= k; ++f) {
      if (count(c, f) > 0) continue;
      bool fixed = false;
      for (std::size_t i = 0; i < labels.size() && !fixed; ++i) {
        if (!labels[i][c] || count(c, folds[i]) < 2) continue;
        for (std::size_t j = 0; j < labels.size() && !fixed; ++j) {
          if (folds[j] != f || group_of[j] != group_of[i] || labels[j][c]) continue;
          // Do not break coverage of any other class in either fold.
          bool safe = true;
          for (std::size_t d = 0; d < n_classes && safe; ++d) {
            if (labels[j][d] && !labels[i][d] && count(d, f) < 2) safe = false;
            if (labels[i][d] && !labels[j][d] && count(d, folds[i]) < 2) safe = false;
          }
          if (!safe) continue;
          std::swap(folds[i], folds[j]);
          fixed = true;
        }
      }
      if (!fixed)
        throw DataError("stratified_kfold: cannot place class '" + schema.classes[c] + "' in every fold");
    }
  }
  return folds;
}

// -------------------------------------------------------------- synthetic

int SyntheticSpec::num_classes() const {
  return task == TaskKind::Binary ? 1 : static_cast<int>(counts.size());
}

void SyntheticSpec::validate() const {
  if (task == TaskKind::Binary && counts.size() != 2)
    throw ConfigError("synthetic: binary task needs counts {negatives, positives}");
  if (task != TaskKind::Binary && counts.size() < 2) throw ConfigError("synthetic: need at least 2 classes");
  for (auto n : counts)
    if (n < 0) throw ConfigError("synthetic: negative class count");
  if (length < 1) throw ConfigError("synthetic: length must be >= 1");
  if (!(fs > 0.0)) throw ConfigError("synthetic: fs must be positive");
  if (!signatures.empty() && static_cast<int>(signatures.size()) != num_classes())
    throw ConfigError("synthetic: one signature id per class required");
  if (!(cooccurrence >= 0.0 && cooccurrence <= 1.0)) throw ConfigError("synthetic: cooccurrence must be in [0,1]");
}

std::vector<LabelVector> Dataset::labels() const {
  std::vector<LabelVector> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.labels);
  return out;
}

namespace {

constexpr double kLeadGain[kLeads] = {1.0, 1.2, 0.4, -0.9, 0.3, 0.8, -0.5, 0.2, 0.8, 1.2, 1.1, 0.9};

void add_gaussian(std::span<double> lead, double fs, double centre_s, double sigma_s, double amplitude) {
  const double n = static_cast<double>(lead.size());
  const double lo = std::max(0.0, std::floor((centre_s - 5 * sigma_s) * fs));
  const double hi = std::min(n - 1, std::ceil((centre_s + 5 * sigma_s) * fs));
  for (double t = lo; t <= hi; t += 1.0) {
    const double d = (t / fs - centre_s) / sigma_s;
    lead[static_cast<std::size_t>(t)] += amplitude * std::exp(-0.5 * d * d);
  }
}

}  // namespace

void add_signature(EcgRecord& record, int id, double amplitude, const std::vector<std::int64_t>& beats, Rng& rng) {
  const double fs = record.fs;
  for (int c = 0; c < kLeads; ++c) {
    if ((c + id) % 3 != 0) continue;
    auto lead = record.lead(c);
    if (id % 2 == 0) {
      // ST-like plateau 60-200 ms after each beat with raised-cosine edges.
      const double sign = (id / 2) % 2 == 0 ? 1.0 : -1.0;
      const auto begin = static_cast<std::int64_t>(0.06 * fs);
      const auto end = static_cast<std::int64_t>(0.20 * fs);
      const auto ramp = std::max<std::int64_t>(1, static_cast<std::int64_t>(0.02 * fs));
      for (auto b : beats) {
        for (std::int64_t k = begin; k < end; ++k) {
          const std::int64_t t = b + k;
          if (t < 0 || t >= record.length) continue;
          double w = 1.0;
          if (k - begin < ramp) w = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(k - begin) / static_cast<double>(ramp));
          if (end - 1 - k < ramp) w = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(end - 1 - k) / static_cast<double>(ramp));
          lead[static_cast<std::size_t>(t)] += sign * amplitude * w;
        }
      }
    } else {
      const double f = 9.0 + 3.0 * id;
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      for (std::int64_t t = 0; t < record.length; ++t)
        lead[static_cast<std::size_t>(t)] += amplitude * std::sin(2.0 * std::numbers::pi * f * static_cast<double>(t) / fs + phase);
    }
  }
}

Dataset generate_synthetic_dataset(const SyntheticSpec& spec) {
  spec.validate();
  const int k = spec.num_classes();
  Dataset ds;
  ds.schema.task = spec.task;
  ds.schema.fs = spec.fs;
  if (spec.task == TaskKind::Binary) {
    ds.schema.classes = {"positive"};
  } else {
    for (int c = 0; c < k; ++c) ds.schema.classes.push_back("class" + std::to_string(c));
  }
  std::vector<int> signature(static_cast<std::size_t>(k));
  for (int c = 0; c < k; ++c) signature[static_cast<std::size_t>(c)] = spec.signatures.empty() ? c : spec.signatures[static_cast<std::size_t>(c)];

  // Primary class per record: for Binary, slot 0 is negatives (-1).
  std::vector<int> primary;
  for (std::size_t g = 0; g < spec.counts.size(); ++g) {
    const int cls = spec.task == TaskKind::Binary ? static_cast<int>(g) - 1 : static_cast<int>(g);
    for (std::int64_t i = 0; i < spec.counts[g]; ++i) primary.push_back(cls);
  }
  const Rng root(spec.seed, fnv1a64(spec.tag));
  ds.records.resize(primary.size());
  ds.folds.assign(primary.size(), 0);

#pragma omp parallel for schedule(dynamic, 4)
  for (std::size_t i = 0; i < primary.size(); ++i) {
    Rng rng = root.substream(i);
    EcgRecord r(spec.tag + "_" + std::to_string(i), spec.fs, spec.length);
    r.labels.assign(static_cast<std::size_t>(k), 0);
    if (primary[i] >= 0) r.labels[static_cast<std::size_t>(primary[i])] = 1;
    if (spec.task == TaskKind::MultiLabel) {
      for (int c = 0; c < k; ++c)
        if (c != primary[i] && rng.bernoulli(spec.cooccurrence)) r.labels[static_cast<std::size_t>(c)] = 1;
    }

    const double duration = static_cast<double>(spec.length) / spec.fs;
    const double period = 1.0 / rng.uniform(1.0, 1.4);
    std::vector<std::int64_t> beats;
    for (double t = rng.uniform(0.0, period); t < duration; t += period * (1.0 + 0.03 * rng.normal()))
      beats.push_back(static_cast<std::int64_t>(std::llround(t * spec.fs)));

    const double wander_f = rng.uniform(0.1, 0.4);
    const double wander_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (int c = 0; c < kLeads; ++c) {
      auto lead = r.lead(c);
      const double g = kLeadGain[c] * rng.uniform(0.8, 1.2);
      for (auto b : beats) {
        const double tb = static_cast<double>(b) / spec.fs;
        add_gaussian(lead, spec.fs, tb - 0.18, 0.025, 0.1 * g);
        add_gaussian(lead, spec.fs, tb, 0.012, g);
        add_gaussian(lead, spec.fs, tb + 0.25, 0.04, 0.25 * g);
      }
      for (std::int64_t t = 0; t < spec.length; ++t) {
        const double ts = static_cast<double>(t) / spec.fs;
        lead[static_cast<std::size_t>(t)] +=
            0.1 * std::sin(2.0 * std::numbers::pi * wander_f * ts + wander_phase) + spec.noise * rng.normal();
      }
    }
    for (int c = 0; c < k; ++c) {
      if (r.labels[static_cast<std::size_t>(c)]) add_signature(r, signature[static_cast<std::size_t>(c)], spec.signature_amplitude, beats, rng);
    }
    ds.records[i] = std::move(r);
  }
  return ds;
}

Manifest write_dataset(const Dataset& dataset, const fs::path& directory) {
  Manifest m;
  m.directory = directory;
  m.schema = dataset.schema;
  m.has_folds = std::any_of(dataset.folds.begin(), dataset.folds.end(), [](int f) { return f > 0; });
  WfdbOptions opts;
  opts.gain = 1000.0;
  for (std::size_t i = 0; i < dataset.records.size(); ++i) {
    const auto& r = dataset.records[i];
    write_wfdb_record(r, directory / "records", opts);
    m.entries.push_back({r.id, fs::path("records") / (r.id + ".hea"), r.labels, i < dataset.folds.size() ? dataset.folds[i] : 0});
  }
  write_manifest(m, directory / "manifest.csv");
  return m;
}

Dataset load_dataset(const Manifest& manifest) {
  Dataset ds;
  ds.schema = manifest.schema;
  ds.records.resize(manifest.entries.size());
  ds.folds.resize(manifest.entries.size());
  std::vector<std::string> errors(manifest.entries.size());
#pragma omp parallel for schedule(dynamic, 8)
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const auto& e = manifest.entries[i];
    try {
      EcgRecord r = load_record(manifest.resolve(e), manifest.schema.fs);
      r.id = e.id;
      r.labels = e.labels;
      r.validate();
      ds.records[i] = std::move(r);
    } catch (const std::exception& ex) {
      errors[i] = e.id + ": " + ex.what();
    }
    ds.folds[i] = e.fold;
  }
  std::string failed;
  for (const auto& e : errors)
    if (!e.empty()) failed += "\n  " + e;
  if (!failed.empty()) throw DataError("malformed records:" + failed);
  return ds;
}

// ---------------------------------------------------------------- pipeline

void PipelineConfig::validate() const {
  if (filter) filter_spec.validate();
  if (segment_length < 1) throw ConfigError("pipeline: segment_length must be >= 1");
  if (max_length < 0) throw ConfigError("pipeline: max_length must be >= 0");
  if (max_length > 0 && max_length < segment_length)
    throw ConfigError("pipeline: max_length " + std::to_string(max_length) + " is shorter than segment_length " +
                      std::to_string(segment_length));
  augment.validate();
}

EcgRecord preprocess_static(const EcgRecord& record, const PipelineConfig& cfg, bool skip_filter) {
  EcgRecord out = (cfg.filter && !skip_filter) ? signal::butterworth_bandpass(record, cfg.filter_spec) : record;
  if (cfg.max_length > 0) out = signal::pad_or_truncate(out, cfg.max_length);
  return out;
}

EcgRecord preprocess_draw(const EcgRecord& prepared, const PipelineConfig& cfg, Mode mode, Rng& rng) {
  if (prepared.length < cfg.segment_length)
    throw DataError("record " + prepared.id + " has " + std::to_string(prepared.length) +
                    " samples, shorter than segment length " + std::to_string(cfg.segment_length) +
                    " with padding disabled");
  EcgRecord seg = mode == Mode::Train
                      ? signal::segment_extract(prepared, cfg.segment_length, rng)
                      : signal::apply_segment(prepared, {cfg.segment_length, 0, prepared.length});
  seg = signal::normalize(seg, cfg.normalization);
  if (mode == Mode::Train) seg = augment::apply_augmentations(seg, cfg.augment, rng);
  return seg;
}

BatchIterator::BatchIterator(const std::vector<EcgRecord>& prepared, std::vector<std::size_t> indices,
                             std::int64_t batch_size, PipelineConfig cfg, Mode mode, std::uint64_t seed,
                             int num_outputs)
    : prepared_(&prepared),
      indices_(std::move(indices)),
      batch_size_(batch_size),
      cfg_(std::move(cfg)),
      mode_(mode),
      seed_(seed),
      outputs_(num_outputs) {
  if (indices_.empty()) throw DataError("batch iterator: split is empty");
  if (batch_size_ < 1) throw ConfigError("batch iterator: batch size must be >= 1");
  for (auto i : indices_)
    if (i >= prepared.size()) throw DataError("batch iterator: record index out of range");
  set_epoch(0);
}

std::size_t BatchIterator::num_batches() const {
  const auto b = static_cast<std::size_t>(batch_size_);
  return (indices_.size() + b - 1) / b;
}

void BatchIterator::set_epoch(std::uint64_t epoch) {
  epoch_ = epoch;
  order_ = indices_;
  if (mode_ == Mode::Train) {
    Rng rng = Rng(seed_).substream("order").substream(epoch);
    rng.shuffle(std::span<std::size_t>(order_));
  }
}

Batch BatchIterator::batch(std::size_t b) const {
  if (b >= num_batches()) throw Error("batch iterator: batch index out of range");
  const auto bs = static_cast<std::size_t>(batch_size_);
  const std::size_t begin = b * bs;
  const std::size_t end = std::min(begin + bs, order_.size());
  const std::size_t n = end - begin;
  const std::int64_t l = cfg_.segment_length;
  std::vector<float> x(n * kLeads * static_cast<std::size_t>(l));
  std::vector<float> y(n * static_cast<std::size_t>(outputs_));
  const Rng draws = Rng(seed_).substream("draw").substream(epoch_);
  std::vector<std::string> errors(n);

#pragma omp parallel for schedule(dynamic, 1)
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t idx = order_[begin + j];
    const EcgRecord& rec = (*prepared_)[idx];
    try {
      Rng rng = draws.substream(idx);
      const EcgRecord seg = preprocess_draw(rec, cfg_, mode_, rng);
      std::transform(seg.signal.begin(), seg.signal.end(), x.begin() + static_cast<std::ptrdiff_t>(j * kLeads * l),
                     [](double v) { return static_cast<float>(v); });
      if (rec.labels.size() != static_cast<std::size_t>(outputs_))
        throw DataError("record " + rec.id + ": label vector does not match model outputs");
      for (int c = 0; c < outputs_; ++c) y[j * static_cast<std::size_t>(outputs_) + static_cast<std::size_t>(c)] = rec.labels[static_cast<std::size_t>(c)];
    } catch (const std::exception& e) {
      errors[j] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw DataError(e);

  Batch out;
  out.x = ad::Tensor<float>::from({static_cast<std::int64_t>(n), kLeads, l}, std::move(x));
  out.y = ad::Tensor<float>::from({static_cast<std::int64_t>(n), outputs_}, std::move(y));
  out.indices.assign(order_.begin() + static_cast<std::ptrdiff_t>(begin), order_.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

}  // namespace ecg::data
