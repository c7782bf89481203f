// ecgnet: command-line front end for the ECG classification library.

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "ecg/commands.hpp"
#include "ecg/error.hpp"

namespace fs = std::filesystem;
using namespace ecg;

namespace {

std::vector<std::int64_t> parse_counts(const std::string& text) {
  std::vector<std::int64_t> out;
  std::stringstream s(text);
  std::string item;
  while (std::getline(s, item, ',')) {
    try {
      out.push_back(std::stoll(item));
    } catch (const std::exception&) {
      throw ConfigError("--counts: '" + item + "' is not an integer");
    }
  }
  return out;
}

nlohmann::json parse_grid_arg(const std::string& arg) {
  try {
    if (fs::exists(arg)) {
      std::ifstream in(arg);
      return nlohmann::json::parse(in);
    }
    return nlohmann::json::parse(arg);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("--grid: ") + e.what());
  }
}

struct RunArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string lr;
  int epochs = -1;
  std::string seed;
  std::string out;
};

void add_run_args(CLI::App* cmd, RunArgs& a) {
  cmd->add_option("-c,--config", a.config, "Run config (JSON)")->required();
  cmd->add_option("--set", a.overrides, "Override a config key: dotted.key=value (repeatable)");
  cmd->add_option("--lr", a.lr, "Shortcut for --set optimizer.lr=<value>");
  cmd->add_option("--epochs", a.epochs, "Shortcut for --set optimizer.epochs=<value>");
  cmd->add_option("--seed", a.seed, "Shortcut for --set seed=<value>");
  cmd->add_option("-o,--out", a.out, "Run directory (overrides output_dir)");
}

config::RunConfig resolve(const RunArgs& a, std::vector<std::string> extra = {}) {
  auto overrides = a.overrides;
  if (!a.lr.empty()) overrides.push_back("optimizer.lr=" + a.lr);
  if (a.epochs >= 0) overrides.push_back("optimizer.epochs=" + std::to_string(a.epochs));
  if (!a.seed.empty()) overrides.push_back("seed=" + a.seed);
  if (!a.out.empty()) overrides.push_back("output_dir=" + nlohmann::json(a.out).dump());
  for (auto& e : extra) overrides.push_back(std::move(e));
  return config::with_overrides(config::load_run_config(a.config), overrides);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ecgnet: 12-lead ECG classification"};
  app.require_subcommand(1);

  // prepare
  auto* prep = app.add_subcommand("prepare", "Write a manifest (synthetic or from an existing dataset)");
  cli::PrepareOptions popt;
  std::string out_dir, manifest, task = "multiclass", counts = "64,64", tag = "synthetic";
  bool synthetic = false;
  data::SyntheticSpec syn;
  prep->add_option("-o,--out", out_dir, "Output directory")->required();
  prep->add_flag("--synthetic", synthetic, "Generate a synthetic dataset");
  prep->add_option("--manifest", manifest, "Existing manifest.csv to validate and re-export");
  prep->add_option("--task", task, "Synthetic task: multilabel, multiclass or binary");
  prep->add_option("--counts", counts, "Synthetic records per class (binary: negatives,positives)");
  prep->add_option("--length", syn.length, "Synthetic record length in samples");
  prep->add_option("--amplitude", syn.signature_amplitude, "Synthetic signature amplitude (mV)");
  prep->add_option("--noise", syn.noise, "Synthetic noise std (mV)");
  prep->add_option("--signatures", syn.signatures, "Synthetic signature id per class");
  prep->add_option("--data-seed", syn.seed, "Synthetic generator seed");
  prep->add_option("--tag", tag, "Synthetic dataset tag");
  prep->add_option("--folds", popt.folds, "Assign this many stratified folds");
  prep->add_option("--fold-seed", popt.fold_seed, "Seed for fold assignment");
  prep->add_flag("--filter", popt.filter, "Store band-pass filtered records");
  prep->add_option("--filter-order", popt.filter_spec.order, "Filter order");
  prep->add_option("--low-cut", popt.filter_spec.low_cut, "Filter low edge (Hz)");
  prep->add_option("--high-cut", popt.filter_spec.high_cut, "Filter high edge (Hz)");

  // init-config
  auto* init = app.add_subcommand("init-config", "Write a default run config for a manifest");
  std::string init_manifest, init_arch = "CRNN_GRU", init_out, init_name = "run";
  bool init_reduced = false;
  init->add_option("--manifest", init_manifest, "Dataset manifest.csv")->required();
  init->add_option("--arch", init_arch, "Architecture name");
  init->add_flag("--reduced", init_reduced, "Use the narrow desk-scale model variant");
  init->add_option("--name", init_name, "Run name");
  init->add_option("-o,--out", init_out, "Config path")->required();

  // train / finetune
  auto* train = app.add_subcommand("train", "Train a model from a run config");
  RunArgs train_args;
  add_run_args(train, train_args);

  auto* ft = app.add_subcommand("finetune", "Fine-tune from a checkpoint");
  RunArgs ft_args;
  std::string ft_ckpt, ft_mode;
  add_run_args(ft, ft_args);
  ft->add_option("--from-checkpoint", ft_ckpt, "Source checkpoint")->required();
  ft->add_option("--mode", ft_mode, "all or head")->required()->check(CLI::IsMember({"all", "head"}));

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Run a grid of config overrides sequentially");
  RunArgs sweep_args;
  std::string grid_arg;
  add_run_args(sweep, sweep_args);
  sweep->add_option("--grid", grid_arg, "Grid JSON (file or inline): {\"key\": [values]}")->required();

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Evaluate a checkpoint on a split");
  std::string eval_config, eval_ckpt, eval_split = "test", eval_out;
  eval->add_option("-c,--config", eval_config, "Run config")->required();
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint")->required();
  eval->add_option("--split", eval_split, "train, val, test or all");
  eval->add_option("-o,--out", eval_out, "Write the metrics JSON here");

  // report
  auto* report = app.add_subcommand("report", "Tabulate completed runs");
  std::vector<std::string> report_dirs;
  std::string report_out = ".";
  report->add_option("runs", report_dirs, "Run directories")->required();
  report->add_option("-o,--out", report_out, "Output directory");

  // verify-checkpoint
  auto* verify = app.add_subcommand("verify-checkpoint", "Validate a checkpoint and print its hashes");
  std::string verify_path, verify_against;
  bool expect_backbone = false, expect_head = false;
  verify->add_option("checkpoint", verify_path, "Checkpoint")->required();
  verify->add_option("--against", verify_against, "Second checkpoint to compare with");
  verify->add_flag("--expect-backbone-identical", expect_backbone, "Fail unless backbones match");
  verify->add_flag("--expect-head-identical", expect_head, "Fail unless heads match");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::kOk : cli::kConfigError;
  }

  try {
    if (*prep) {
      popt.out_dir = out_dir;
      popt.manifest = manifest;
      if (synthetic) {
        syn.task = data::parse_task(task);
        syn.counts = parse_counts(counts);
        syn.tag = tag;
        popt.synthetic = syn;
      }
      cli::cmd_prepare(popt, std::cout);
    } else if (*init) {
      const auto m = data::read_manifest(init_manifest);
      config::RunConfig cfg;
      cfg.name = init_name;
      cfg.manifest = fs::absolute(init_manifest);
      cfg.task = m.schema.task;
      const auto arch = models::parse_architecture(init_arch);
      cfg.model = init_reduced ? models::reduced_spec(arch, m.schema.num_outputs())
                               : models::default_spec(arch, m.schema.num_outputs());
      if (!m.has_folds) cfg.split.kind = "stratified";
      cfg.validate();
      config::save_run_config(cfg, init_out);
      std::cout << "wrote " << init_out << '\n';
    } else if (*train) {
      const auto cfg = resolve(train_args);
      if (cfg.finetune) throw ConfigError("config has a finetune section; use the finetune command");
      const auto r = cli::cmd_train(cfg, &std::cout);
      std::cout << "run directory " << r.dir.string() << '\n';
    } else if (*ft) {
      const auto cfg = resolve(ft_args, {"finetune.checkpoint=" + nlohmann::json(ft_ckpt).dump(), "finetune.mode=" + ft_mode});
      const auto r = cli::cmd_train(cfg, &std::cout);
      std::cout << "run directory " << r.dir.string() << '\n';
    } else if (*sweep) {
      const auto base = resolve(sweep_args);
      const auto grid = cli::SweepGrid::from_json(parse_grid_arg(grid_arg));
      const auto rows = cli::cmd_sweep(base, grid, cli::run_directory(base), &std::cout);
      for (const auto& r : rows)
        std::cout << r.name << ' ' << (r.ok ? "ok" : "failed") << " val_f1=" << r.val_f1 << '\n';
    } else if (*eval) {
      const auto cfg = config::load_run_config(eval_config);
      const auto e = cli::cmd_evaluate(cfg, eval_ckpt, eval_split);
      const auto m = data::read_manifest(cfg.manifest);
      const auto j = e.report.to_json(m.schema.classes);
      if (!eval_out.empty()) {
        std::ofstream out(eval_out);
        out << j.dump(2) << '\n';
      }
      std::cout << j.dump(2) << '\n';
    } else if (*report) {
      std::vector<fs::path> dirs(report_dirs.begin(), report_dirs.end());
      const auto rows = cli::cmd_report(dirs, report_out, std::cerr);
      std::cout << cli::format_table_markdown(rows);
    } else if (*verify) {
      std::optional<fs::path> against;
      if (!verify_against.empty()) against = verify_against;
      const auto v = cli::cmd_verify_checkpoint(verify_path, against, std::cout);
      if ((expect_backbone || expect_head) && !against) throw ConfigError("--expect-* needs --against");
      if (expect_backbone && !*v.backbone_identical) return cli::kRuntimeFailure;
      if (expect_head && !*v.head_identical) return cli::kRuntimeFailure;
    }
  } catch (...) {
    return cli::report_exception(std::cerr);
  }
  return cli::kOk;
}
