#include "ecg/config.hpp"

#include <cstdlib>
#include <fstream>

#include "ecg/error.hpp"

namespace ecg::config {

using nlohmann::json;

namespace {

json range_json(const augment::Range& r) { return json::array({r.lo, r.hi}); }

augment::Range range_from(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 2) throw ConfigError(where + ": expected [min, max]");
  return {j[0].get<double>(), j[1].get<double>()};
}

json wave_json(const augment::WaveParams& w) {
  return {{"enabled", w.enabled},
          {"p", w.p},
          {"amplitude", range_json(w.amplitude)},
          {"frequency", range_json(w.frequency)},
          {"amplitude_mode", w.mode == augment::AmplitudeMode::Relative ? "relative" : "absolute"}};
}

augment::WaveParams wave_from(const json& j, const std::string& where) {
  augment::WaveParams w;
  w.enabled = j.at("enabled").get<bool>();
  w.p = j.at("p").get<double>();
  w.amplitude = range_from(j.at("amplitude"), where + ".amplitude");
  w.frequency = range_from(j.at("frequency"), where + ".frequency");
  const auto mode = j.at("amplitude_mode").get<std::string>();
  if (mode == "relative") {
    w.mode = augment::AmplitudeMode::Relative;
  } else if (mode == "absolute") {
    w.mode = augment::AmplitudeMode::Absolute;
  } else {
    throw ConfigError(where + ".amplitude_mode must be 'relative' or 'absolute'");
  }
  return w;
}

// Overlays `input` on `defaults`, rejecting keys the defaults do not have.
void merge_strict(json& defaults, const json& input, const std::string& where) {
  if (!input.is_object()) throw ConfigError((where.empty() ? "config" : where) + ": expected an object");
  for (const auto& [key, value] : input.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!defaults.contains(key)) throw ConfigError("config: unknown key '" + path + "'");
    auto& slot = defaults[key];
    if (slot.is_object() && path != "model") {
      merge_strict(slot, value, path);
    } else {
      slot = value;
    }
  }
}

}  // namespace

json RunConfig::to_json() const {
  const auto& p = pipeline;
  const auto& a = p.augment;
  json j;
  j["name"] = name;
  j["manifest"] = manifest.generic_string();
  j["task"] = data::to_string(task);
  j["preprocessing"] = {
      {"filter", {{"enabled", p.filter}, {"order", p.filter_spec.order}, {"low_cut", p.filter_spec.low_cut},
                  {"high_cut", p.filter_spec.high_cut}}},
      {"max_length", p.max_length},
      {"segment_length", p.segment_length},
      {"normalization", signal::to_string(p.normalization)}};
  j["augment"] = {
      {"rng", Rng::kAlgorithm},
      {"flip", {{"enabled", a.flip.enabled}, {"p", a.flip.p}}},
      {"random_drop", {{"enabled", a.random_drop.enabled}, {"p", a.random_drop.p}, {"fraction", range_json(a.random_drop.fraction)}}},
      {"lead_drop", {{"enabled", a.lead_drop.enabled}, {"p", a.lead_drop.p}, {"leads", range_json(a.lead_drop.leads)}}},
      {"square_pulse", wave_json(a.square_pulse)},
      {"sine", wave_json(a.sine)}};
  j["model"] = model.to_json();
  j["optimizer"] = {{"kind", "adam"},
                    {"lr", optimizer.adam.lr},
                    {"beta1", optimizer.adam.beta1},
                    {"beta2", optimizer.adam.beta2},
                    {"eps", optimizer.adam.eps},
                    {"weight_decay", optimizer.adam.weight_decay},
                    {"batch_size", optimizer.batch_size},
                    {"epochs", optimizer.epochs},
                    {"patience", optimizer.patience}};
  j["loss"] = {{"kind", loss.kind == learn::LossKind::Focal ? "focal" : "weighted_bce"},
               {"gamma", loss.focal.gamma},
               {"alpha", loss.focal.alpha},
               {"class_weights", loss.class_weights.empty() ? json("auto") : json(loss.class_weights)}};
  j["split"] = {{"kind", split.kind}, {"val_fold", split.val_fold}, {"test_fold", split.test_fold}, {"n_folds", split.n_folds}};
  j["seed"] = seed;
  j["output_dir"] = output_dir.generic_string();
  j["source"] = source;
  if (finetune) {
    j["finetune"] = {{"checkpoint", finetune->checkpoint.generic_string()}, {"mode", transfer::to_string(finetune->mode)}};
  } else {
    j["finetune"] = nullptr;
  }
  return j;
}

RunConfig RunConfig::from_json(const json& input) {
  json tree = RunConfig{}.to_json();
  tree["finetune"] = {{"checkpoint", ""}, {"mode", "all"}};
  const bool has_finetune = input.is_object() && input.contains("finetune") && !input.at("finetune").is_null();
  json in = input;
  if (in.is_object() && in.contains("finetune") && in.at("finetune").is_null()) in.erase("finetune");
  merge_strict(tree, in, "");

  RunConfig c;
  try {
    c.name = tree.at("name").get<std::string>();
    c.manifest = tree.at("manifest").get<std::string>();
    c.task = data::parse_task(tree.at("task").get<std::string>());
    const auto& pre = tree.at("preprocessing");
    c.pipeline.filter = pre.at("filter").at("enabled").get<bool>();
    c.pipeline.filter_spec.order = pre.at("filter").at("order").get<int>();
    c.pipeline.filter_spec.low_cut = pre.at("filter").at("low_cut").get<double>();
    c.pipeline.filter_spec.high_cut = pre.at("filter").at("high_cut").get<double>();
    c.pipeline.max_length = pre.at("max_length").get<std::int64_t>();
    c.pipeline.segment_length = pre.at("segment_length").get<std::int64_t>();
    c.pipeline.normalization = signal::parse_normalization(pre.at("normalization").get<std::string>());

    const auto& aug = tree.at("augment");
    if (aug.at("rng").get<std::string>() != Rng::kAlgorithm)
      throw ConfigError("augment.rng: only " + std::string(Rng::kAlgorithm) + " is available");
    auto& a = c.pipeline.augment;
    a.flip.enabled = aug.at("flip").at("enabled").get<bool>();
    a.flip.p = aug.at("flip").at("p").get<double>();
    a.random_drop.enabled = aug.at("random_drop").at("enabled").get<bool>();
    a.random_drop.p = aug.at("random_drop").at("p").get<double>();
    a.random_drop.fraction = range_from(aug.at("random_drop").at("fraction"), "augment.random_drop.fraction");
    a.lead_drop.enabled = aug.at("lead_drop").at("enabled").get<bool>();
    a.lead_drop.p = aug.at("lead_drop").at("p").get<double>();
    a.lead_drop.leads = range_from(aug.at("lead_drop").at("leads"), "augment.lead_drop.leads");
    a.square_pulse = wave_from(aug.at("square_pulse"), "augment.square_pulse");
    a.sine = wave_from(aug.at("sine"), "augment.sine");

    c.model = models::ModelSpec::from_json(tree.at("model"));

    const auto& opt = tree.at("optimizer");
    if (opt.at("kind").get<std::string>() != "adam") throw ConfigError("optimizer.kind: only 'adam' is available");
    c.optimizer.adam.lr = opt.at("lr").get<double>();
    c.optimizer.adam.beta1 = opt.at("beta1").get<double>();
    c.optimizer.adam.beta2 = opt.at("beta2").get<double>();
    c.optimizer.adam.eps = opt.at("eps").get<double>();
    c.optimizer.adam.weight_decay = opt.at("weight_decay").get<double>();
    c.optimizer.batch_size = opt.at("batch_size").get<std::int64_t>();
    c.optimizer.epochs = opt.at("epochs").get<int>();
    c.optimizer.patience = opt.at("patience").get<int>();

    const auto& loss = tree.at("loss");
    const auto kind = loss.at("kind").get<std::string>();
    if (kind == "focal") {
      c.loss.kind = learn::LossKind::Focal;
    } else if (kind == "weighted_bce") {
      c.loss.kind = learn::LossKind::WeightedBCE;
    } else {
      throw ConfigError("loss.kind must be 'focal' or 'weighted_bce'");
    }
    c.loss.focal.gamma = loss.at("gamma").get<double>();
    c.loss.focal.alpha = loss.at("alpha").get<double>();
    const auto& w = loss.at("class_weights");
    if (w.is_string()) {
      if (w.get<std::string>() != "auto") throw ConfigError("loss.class_weights must be 'auto' or a list");
    } else {
      c.loss.class_weights = w.get<std::vector<double>>();
    }

    const auto& sp = tree.at("split");
    c.split.kind = sp.at("kind").get<std::string>();
    c.split.val_fold = sp.at("val_fold").get<int>();
    c.split.test_fold = sp.at("test_fold").get<int>();
    c.split.n_folds = sp.at("n_folds").get<int>();
    c.seed = tree.at("seed").get<std::uint64_t>();
    c.output_dir = tree.at("output_dir").get<std::string>();
    c.source = tree.at("source").get<std::string>();
    if (has_finetune) {
      FineTuneConfig f;
      f.checkpoint = tree.at("finetune").at("checkpoint").get<std::string>();
      f.mode = transfer::parse_finetune_mode(tree.at("finetune").at("mode").get<std::string>());
      c.finetune = f;
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

void RunConfig::validate() const {
  pipeline.validate();
  model.validate();
  optimizer.validate();
  if (loss.kind == learn::LossKind::Focal) loss.focal.validate();
  if (split.kind != "ptbxl" && split.kind != "folds" && split.kind != "stratified")
    throw ConfigError("split.kind must be 'ptbxl', 'folds' or 'stratified'");
  if (split.n_folds < 2) throw ConfigError("split.n_folds must be >= 2");
  if (split.val_fold == split.test_fold) throw ConfigError("split: val_fold and test_fold must differ");
  for (int f : {split.val_fold, split.test_fold})
    if (f < 1 || f > split.n_folds) throw ConfigError("split: fold ids must lie in [1, n_folds]");
  transfer::Provenance p;
  p.source = source;
  p.validate();
  if (!loss.class_weights.empty() && static_cast<int>(loss.class_weights.size()) != model.outputs)
    throw ConfigError("loss.class_weights: need one weight per model output");
  if (task == data::TaskKind::Binary && model.outputs != 1) throw ConfigError("model.outputs must be 1 for a binary task");
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return RunConfig::from_json(j);
}

void save_run_config(const RunConfig& cfg, const fs::path& path) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << cfg.to_json().dump(2) << '\n';
  if (!out) throw Error("cannot write config " + path.string());
}

void set_dotted(json& tree, const std::string& dotted, const std::string& value) {
  json* node = &tree;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override: malformed key '" + dotted + "'");
    if (!node->is_object()) throw ConfigError("override: '" + dotted + "' descends into a non-object");
    if (dot == std::string::npos) {
      json parsed;
      try {
        parsed = json::parse(value);
      } catch (const json::exception&) {
        parsed = value;
      }
      (*node)[key] = parsed;
      return;
    }
    if (!node->contains(key)) (*node)[key] = json::object();
    node = &(*node)[key];
    start = dot + 1;
  }
}

RunConfig with_overrides(const RunConfig& cfg, const std::vector<std::string>& overrides) {
  json tree = cfg.to_json();
  if (tree["finetune"].is_null()) tree.erase("finetune");
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    set_dotted(tree, o.substr(0, eq), o.substr(eq + 1));
  }
  return RunConfig::from_json(tree);
}

fs::path default_output_root() {
  if (const char* env = std::getenv(kOutputRootEnv); env && *env) return env;
  return "runs";
}

}  // namespace ecg::config
