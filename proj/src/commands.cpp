#include "ecg/commands.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "ecg/error.hpp"
#include "ecg/transfer.hpp"

namespace ecg::cli {

using nlohmann::json;

int report_exception(std::ostream& err) {
  try {
    throw;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kConfigError;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kConfigError;
  } catch (const ShapeError& e) {
    err << "shape error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return json::parse(in);
}

std::vector<std::int64_t> class_counts(const std::vector<LabelVector>& labels, int k) {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(k), 0);
  for (const auto& l : labels)
    for (int c = 0; c < k; ++c) counts[static_cast<std::size_t>(c)] += l[static_cast<std::size_t>(c)];
  return counts;
}

// Loaded dataset, static preprocessing and split for one config.
struct Prepared {
  data::Manifest manifest;
  data::Dataset dataset;
  std::vector<EcgRecord> records;
  data::SplitPlan plan;
};

Prepared prepare(const config::RunConfig& cfg) {
  Prepared p;
  p.manifest = data::read_manifest(cfg.manifest);
  const auto& schema = p.manifest.schema;
  if (schema.task != cfg.task)
    throw ConfigError("task '" + std::string(data::to_string(cfg.task)) + "' does not match the manifest task '" +
                      std::string(data::to_string(schema.task)) + "'");
  if (cfg.model.outputs != schema.num_outputs())
    throw ConfigError("model.outputs " + std::to_string(cfg.model.outputs) + " does not match the " +
                      std::to_string(schema.num_outputs()) + " manifest classes");
  if (cfg.pipeline.filter && cfg.pipeline.filter_spec.fs != schema.fs) {
    auto spec = cfg.pipeline.filter_spec;
    spec.fs = schema.fs;
    spec.validate();
  }

  if (cfg.split.kind == "stratified") {
    p.dataset = data::load_dataset(p.manifest);
    const auto folds = data::stratified_kfold(p.dataset.labels(), schema, cfg.split.n_folds, cfg.seed);
    p.plan = data::split_by_folds(folds, cfg.split.val_fold, cfg.split.test_fold, cfg.split.n_folds);
  } else {
    if (!p.manifest.has_folds) throw DataError("split '" + cfg.split.kind + "' needs a 'fold' column in the manifest");
    p.plan = cfg.split.kind == "ptbxl"
                 ? data::ptbxl_split(p.manifest)
                 : [&] {
                     std::vector<int> folds;
                     for (const auto& e : p.manifest.entries) folds.push_back(e.fold);
                     return data::split_by_folds(folds, cfg.split.val_fold, cfg.split.test_fold, cfg.split.n_folds);
                   }();
    p.dataset = data::load_dataset(p.manifest);
  }
  if (p.plan.train.empty()) throw DataError("split leaves no training records");

  auto pipeline = cfg.pipeline;
  pipeline.filter_spec.fs = schema.fs;
  const bool skip_filter = p.manifest.prefiltered;
  p.records.resize(p.dataset.records.size());
  std::vector<std::string> errors(p.records.size());
#pragma omp parallel for schedule(dynamic, 8)
  for (std::size_t i = 0; i < p.records.size(); ++i) {
    try {
      p.records[i] = data::preprocess_static(p.dataset.records[i], pipeline, skip_filter);
    } catch (const std::exception& e) {
      errors[i] = p.dataset.records[i].id + ": " + e.what();
    }
  }
  std::string failed;
  for (const auto& e : errors)
    if (!e.empty()) failed += "\n  " + e;
  if (!failed.empty()) throw DataError("preprocessing failed:" + failed);
  return p;
}

data::PipelineConfig effective_pipeline(const config::RunConfig& cfg, const data::Schema& schema) {
  auto pipeline = cfg.pipeline;
  pipeline.filter_spec.fs = schema.fs;
  return pipeline;
}

std::vector<LabelVector> subset_labels(const data::Dataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<LabelVector> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(ds.records[i].labels);
  return out;
}

// The checkpoint must share the config's architecture and hyperparameters;
// only the number of outputs may differ.
void check_compatible(const models::ModelSpec& from, const models::ModelSpec& to) {
  if (from.architecture != to.architecture)
    throw ConfigError("checkpoint architecture " + std::string(models::to_string(from.architecture)) +
                      " does not match config architecture " + std::string(models::to_string(to.architecture)));
  auto a = from.to_json();
  auto b = to.to_json();
  a.erase("outputs");
  b.erase("outputs");
  if (a != b) throw ConfigError("checkpoint hyperparameters differ from the config model section");
}

std::string number(double v) { return json(v).dump(); }

}  // namespace

// ----------------------------------------------------------------- prepare

PrepareSummary cmd_prepare(const PrepareOptions& options, std::ostream& out) {
  if (options.out_dir.empty()) throw ConfigError("prepare: an output directory is required");
  if (options.filter) options.filter_spec.validate();
  fs::create_directories(options.out_dir);
  const fs::path manifest_path = options.out_dir / "manifest.csv";

  data::Dataset ds;
  data::Manifest source;
  const bool generated = options.synthetic.has_value();
  if (generated) {
    options.synthetic->validate();
    ds = data::generate_synthetic_dataset(*options.synthetic);
  } else {
    if (options.manifest.empty()) throw ConfigError("prepare: give --synthetic or --manifest");
    source = data::read_manifest(options.manifest);
    if (fs::weakly_canonical(source.directory) == fs::weakly_canonical(options.out_dir))
      throw ConfigError("prepare: output directory must differ from the input dataset directory");
    ds = data::load_dataset(source);
  }

  if (options.folds > 0) ds.folds = data::stratified_kfold(ds.labels(), ds.schema, options.folds, options.fold_seed);

  data::Manifest m;
  if (options.filter) {
    if (!generated && source.prefiltered) throw ConfigError("prepare: the input manifest is already filtered");
    auto spec = options.filter_spec;
    spec.fs = ds.schema.fs;
#pragma omp parallel for schedule(dynamic, 8)
    for (std::size_t i = 0; i < ds.records.size(); ++i) ds.records[i] = signal::butterworth_bandpass(ds.records[i], spec);
    m = data::write_dataset(ds, options.out_dir);
    m.prefiltered = true;
    m.prefilter = spec;
    data::write_manifest(m, manifest_path);
  } else if (generated) {
    m = data::write_dataset(ds, options.out_dir);
  } else {
    // Reference the original record files; nothing is copied or modified.
    m = source;
    m.directory = options.out_dir;
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
      m.entries[i].path = fs::absolute(source.resolve(source.entries[i]));
      m.entries[i].fold = ds.folds[i];
    }
    m.has_folds = std::any_of(ds.folds.begin(), ds.folds.end(), [](int f) { return f > 0; });
    data::write_manifest(m, manifest_path);
  }

  PrepareSummary s;
  s.manifest = manifest_path;
  s.records = ds.records.size();
  s.class_counts = class_counts(ds.labels(), ds.schema.num_outputs());
  out << "manifest " << manifest_path.string() << " (" << s.records << " records)\n";
  for (std::size_t c = 0; c < s.class_counts.size(); ++c)
    out << "  " << ds.schema.classes[c] << ": " << s.class_counts[c] << '\n';
  if (m.has_folds) {
    int max_fold = 0;
    for (int f : ds.folds) max_fold = std::max(max_fold, f);
    s.fold_counts.assign(static_cast<std::size_t>(max_fold), 0);
    for (int f : ds.folds)
      if (f > 0) ++s.fold_counts[static_cast<std::size_t>(f - 1)];
    out << "folds:";
    for (std::size_t f = 0; f < s.fold_counts.size(); ++f) out << ' ' << (f + 1) << '=' << s.fold_counts[f];
    out << '\n';
    if (max_fold == 10) {
      std::int64_t train = 0;
      for (std::size_t f = 0; f < 8; ++f) train += s.fold_counts[f];
      out << "split: train folds 1-8 (" << train << "), val fold 9 (" << s.fold_counts[8] << "), test fold 10 ("
          << s.fold_counts[9] << ")\n";
    }
  }
  return s;
}

// ------------------------------------------------------------------- train

fs::path run_directory(const config::RunConfig& cfg) {
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  return config::default_output_root() / cfg.name;
}

RunResult cmd_train(const config::RunConfig& cfg, std::ostream* log) {
  cfg.validate();

  std::optional<transfer::Checkpoint> source;
  if (cfg.finetune) {
    source = transfer::load_checkpoint(cfg.finetune->checkpoint);
    check_compatible(source->spec, cfg.model);
  }

  Prepared p = prepare(cfg);
  const auto& schema = p.manifest.schema;
  const auto pipeline = effective_pipeline(cfg, schema);

  auto loss = cfg.loss;
  if (loss.kind == learn::LossKind::WeightedBCE && loss.class_weights.empty())
    loss.class_weights = learn::class_weights_from_labels(subset_labels(p.dataset, p.plan.train));

  std::unique_ptr<learn::Model> model = source ? transfer::adapt_head(*source, cfg.model.outputs, cfg.seed)
                                               : models::build<float>(cfg.model, cfg.seed);
  if (model->min_length() > pipeline.segment_length)
    throw ConfigError("segment_length " + std::to_string(pipeline.segment_length) + " is below the model minimum " +
                      std::to_string(model->min_length()));

  const int k = schema.num_outputs();
  const auto batch = cfg.optimizer.batch_size;
  data::BatchIterator train_it(p.records, p.plan.train, batch, pipeline, data::Mode::Train, cfg.seed, k);
  std::optional<data::BatchIterator> val_it, test_it;
  if (!p.plan.val.empty()) val_it.emplace(p.records, p.plan.val, batch, pipeline, data::Mode::Eval, cfg.seed, k);
  if (!p.plan.test.empty()) test_it.emplace(p.records, p.plan.test, batch, pipeline, data::Mode::Eval, cfg.seed, k);

  const fs::path dir = run_directory(cfg);
  fs::create_directories(dir);
  config::save_run_config(cfg, dir / kConfigFile);

  learn::TrainOptions opts;
  opts.optim = cfg.optimizer;
  opts.loss = loss;
  opts.seed = cfg.seed;
  opts.log = log;
  const auto* val_ptr = val_it ? &*val_it : nullptr;

  RunResult r;
  r.dir = dir;
  if (cfg.finetune) {
    r.history = transfer::finetune(*model, cfg.finetune->mode, train_it, val_ptr, cfg.task, opts);
  } else {
    r.history = learn::train(*model, train_it, val_ptr, cfg.task, opts);
  }

  if (val_it) {
    r.val = learn::evaluate(*model, *val_it, cfg.task).report;
    r.has_val = true;
  }
  if (test_it) {
    r.test = learn::evaluate(*model, *test_it, cfg.task).report;
    r.has_test = true;
  }

  write_text(dir / kHistoryCsv, r.history.to_csv());
  write_text(dir / kHistoryJson, r.history.to_json().dump(2) + "\n");

  transfer::Provenance prov;
  prov.source = cfg.source;
  prov.epochs = static_cast<int>(r.history.epochs.size());
  if (r.has_val) prov.final_val_metrics = r.val.to_json(schema.classes);
  transfer::save_checkpoint(*model, prov, cfg.seed, dir / kCheckpointFile);

  json report;
  report["name"] = cfg.name;
  report["architecture"] = models::to_string(cfg.model.architecture);
  report["source"] = cfg.finetune ? source->provenance.source : std::string("none");
  if (cfg.finetune) report["finetune_mode"] = transfer::to_string(cfg.finetune->mode);
  report["task"] = data::to_string(cfg.task);
  report["classes"] = schema.classes;
  report["best_epoch"] = r.history.best_epoch;
  report["epochs"] = r.history.epochs.size();
  report["val"] = r.has_val ? r.val.to_json(schema.classes) : json(nullptr);
  report["test"] = r.has_test ? r.test.to_json(schema.classes) : json(nullptr);
  write_text(dir / kReportFile, report.dump(2) + "\n");
  return r;
}

// ------------------------------------------------------------------- sweep

SweepGrid SweepGrid::from_json(const json& j) {
  if (!j.is_object() || j.empty()) throw ConfigError("sweep grid must be a non-empty object of key: [values]");
  SweepGrid g;
  for (const auto& [key, values] : j.items()) {
    if (!values.is_array() || values.empty()) throw ConfigError("sweep grid '" + key + "' must be a non-empty list");
    std::vector<std::string> texts;
    for (const auto& v : values) texts.push_back(v.is_string() ? v.get<std::string>() : v.dump());
    g.axes.emplace_back(key, std::move(texts));
  }
  return g;
}

std::vector<std::vector<std::string>> SweepGrid::combinations() const {
  std::vector<std::vector<std::string>> out{{}};
  for (const auto& [key, values] : axes) {
    std::vector<std::vector<std::string>> next;
    for (const auto& prefix : out)
      for (const auto& v : values) {
        auto c = prefix;
        c.push_back(key + "=" + v);
        next.push_back(std::move(c));
      }
    out = std::move(next);
  }
  return out;
}

std::vector<SweepRow> cmd_sweep(const config::RunConfig& base, const SweepGrid& grid, const fs::path& sweep_dir,
                                std::ostream* log) {
  fs::create_directories(sweep_dir);
  std::vector<SweepRow> rows;
  const auto combos = grid.combinations();
  for (std::size_t i = 0; i < combos.size(); ++i) {
    SweepRow row;
    std::ostringstream name;
    name << base.name << '-' << std::setw(3) << std::setfill('0') << i;
    row.name = name.str();
    row.overrides = combos[i];
    row.dir = sweep_dir / row.name;
    try {
      auto cfg = config::with_overrides(base, combos[i]);
      cfg.name = row.name;
      cfg.output_dir = row.dir;
      if (log) *log << "[" << (i + 1) << "/" << combos.size() << "] " << row.name << '\n';
      const auto r = cmd_train(cfg, log);
      row.ok = true;
      row.val_f1 = r.has_val ? r.val.f1 : 0.0;
      row.test_f1 = r.has_test ? r.test.f1 : 0.0;
    } catch (const std::exception& e) {
      row.error = e.what();
      if (log) *log << "  failed: " << e.what() << '\n';
    }
    rows.push_back(std::move(row));
  }
  std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    if (a.ok != b.ok) return a.ok;
    return a.val_f1 > b.val_f1;
  });

  std::ostringstream csv;
  csv << "rank,name,status,val_f1,test_f1,overrides,dir,error\n";
  auto quote = [](std::string s) {
    std::string q = "\"";
    for (char c : s) q += (c == '"') ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  };
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    std::string ov;
    for (const auto& o : r.overrides) ov += (ov.empty() ? "" : ";") + o;
    csv << (i + 1) << ',' << r.name << ',' << (r.ok ? "ok" : "failed") << ',' << number(r.val_f1) << ','
        << number(r.test_f1) << ',' << quote(ov) << ',' << quote(r.dir.string()) << ',' << quote(r.error) << '\n';
  }
  write_text(sweep_dir / "leaderboard.csv", csv.str());
  return rows;
}

// ---------------------------------------------------------------- evaluate

learn::Evaluation cmd_evaluate(const config::RunConfig& cfg, const fs::path& checkpoint, const std::string& split) {
  cfg.validate();
  const auto ckpt = transfer::load_checkpoint(checkpoint);
  check_compatible(ckpt.spec, cfg.model);
  if (ckpt.spec.outputs != cfg.model.outputs)
    throw ConfigError("checkpoint has " + std::to_string(ckpt.spec.outputs) + " outputs, config expects " +
                      std::to_string(cfg.model.outputs));
  Prepared p = prepare(cfg);
  std::vector<std::size_t> idx;
  if (split == "train") {
    idx = p.plan.train;
  } else if (split == "val") {
    idx = p.plan.val;
  } else if (split == "test") {
    idx = p.plan.test;
  } else if (split == "all") {
    for (std::size_t i = 0; i < p.records.size(); ++i) idx.push_back(i);
  } else {
    throw ConfigError("split must be train, val, test or all");
  }
  if (idx.empty()) throw DataError("split '" + split + "' is empty");
  auto model = transfer::model_from_checkpoint(ckpt);
  data::BatchIterator it(p.records, idx, cfg.optimizer.batch_size, effective_pipeline(cfg, p.manifest.schema),
                         data::Mode::Eval, cfg.seed, p.manifest.schema.num_outputs());
  return learn::evaluate(*model, it, cfg.task);
}

// ------------------------------------------------------------------ report

json radial_json(const learn::MetricsReport& m) {
  return {{"auc", m.auc}, {"sensitivity", m.sensitivity}, {"specificity", m.specificity}, {"ppv", m.ppv}};
}

std::string format_table_markdown(const std::vector<ReportRow>& rows) {
  std::ostringstream s;
  s << "| Run | Model | Pretrain | Acc | F1 | MAP | GM |\n";
  s << "|---|---|---|---|---|---|---|\n";
  s << std::fixed << std::setprecision(4);
  for (const auto& r : rows)
    s << "| " << r.run << " | " << r.model << " | " << r.source << " | " << r.metrics.accuracy << " | " << r.metrics.f1
      << " | " << r.metrics.map << " | " << r.metrics.gmean << " |\n";
  return s.str();
}

std::string format_table_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream s;
  s << "run,model,pretrain,acc,f1,map,gm\n";
  for (const auto& r : rows)
    s << r.run << ',' << r.model << ',' << r.source << ',' << number(r.metrics.accuracy) << ',' << number(r.metrics.f1)
      << ',' << number(r.metrics.map) << ',' << number(r.metrics.gmean) << '\n';
  return s.str();
}

std::vector<ReportRow> cmd_report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir, std::ostream& warn) {
  if (run_dirs.empty()) throw ConfigError("report: give at least one run directory");
  std::vector<ReportRow> rows;
  json radial = json::object();
  for (const auto& dir : run_dirs) {
    const auto path = dir / kReportFile;
    if (!fs::exists(path)) {
      warn << "warning: skipping " << dir.string() << ": no " << kReportFile << '\n';
      continue;
    }
    try {
      const json j = read_json(path);
      const json& m = !j.at("test").is_null() ? j.at("test") : j.at("val");
      if (m.is_null()) throw Error("no metrics");
      ReportRow row;
      row.run = fs::path(dir).lexically_normal().filename().string();
      if (row.run.empty() || row.run == ".") row.run = j.at("name").get<std::string>();
      if (radial.contains(row.run)) row.run += "#" + std::to_string(rows.size() + 1);
      row.model = j.at("architecture").get<std::string>();
      row.source = j.at("source").get<std::string>();
      row.metrics = learn::MetricsReport::from_json(m);
      radial[row.run] = radial_json(row.metrics);
      rows.push_back(std::move(row));
    } catch (const std::exception& e) {
      warn << "warning: skipping " << dir.string() << ": " << e.what() << '\n';
    }
  }
  if (rows.empty()) throw DataError("report: no complete run directories");
  fs::create_directories(out_dir);
  write_text(out_dir / "table.md", format_table_markdown(rows));
  write_text(out_dir / "table.csv", format_table_csv(rows));
  write_text(out_dir / "radial.json", radial.dump(2) + "\n");
  return rows;
}

// ------------------------------------------------------- verify-checkpoint

VerifyResult cmd_verify_checkpoint(const fs::path& checkpoint, const std::optional<fs::path>& against,
                                   std::ostream& out) {
  const auto a = transfer::load_checkpoint(checkpoint);
  VerifyResult v;
  v.fingerprint = a.fingerprint;
  v.backbone_hash = transfer::group_hash(a, false);
  v.head_hash = transfer::group_hash(a, true);
  v.tensors = a.tensors.size();
  auto hex = [](std::uint64_t h) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << h;
    return s.str();
  };
  out << checkpoint.string() << '\n';
  out << "  architecture " << models::to_string(a.spec.architecture) << ", outputs " << a.spec.outputs << ", source "
      << a.provenance.source << '\n';
  out << "  fingerprint " << v.fingerprint << ", tensors " << v.tensors << '\n';
  out << "  backbone " << hex(v.backbone_hash) << '\n';
  out << "  head     " << hex(v.head_hash) << '\n';
  if (!against) return v;

  const auto b = transfer::load_checkpoint(*against);
  auto is_head = [](const std::string& n) { return n.rfind(models::kHeadPrefix, 0) == 0; };
  bool backbone_same = true, head_same = true;
  auto mark = [&](const std::string& name) {
    v.changed.push_back(name);
    (is_head(name) ? head_same : backbone_same) = false;
  };
  for (const auto& t : a.tensors) {
    const auto* u = b.find(t.name);
    if (!u || u->shape != t.shape ||
        std::memcmp(u->values.data(), t.values.data(), t.values.size() * sizeof(float)) != 0)
      mark(t.name);
  }
  for (const auto& u : b.tensors)
    if (!a.find(u.name)) mark(u.name);
  v.backbone_identical = backbone_same;
  v.head_identical = head_same;
  out << "against " << against->string() << '\n';
  out << "  backbone " << (backbone_same ? "identical" : "differs") << '\n';
  out << "  head     " << (head_same ? "identical" : "differs") << '\n';
  for (const auto& n : v.changed) out << "  changed " << n << '\n';
  return v;
}

}  // namespace ecg::cli
