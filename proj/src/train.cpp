#include "ecg/train.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "ecg/error.hpp"

namespace ecg::learn {

using nlohmann::json;

template <class T>
Tensor<T> compute_loss(const Tensor<T>& logits, const Tensor<T>& targets, const LossConfig& cfg) {
  switch (cfg.kind) {
    case LossKind::Focal: return focal_loss(logits, targets, cfg.focal);
    case LossKind::WeightedBCE: {
      if (cfg.class_weights.empty())
        return weighted_bce(logits, targets, std::vector<double>(static_cast<std::size_t>(logits.dim(-1)), 1.0));
      return weighted_bce(logits, targets, cfg.class_weights);
    }
  }
  throw ConfigError("unknown loss");
}

template Tensor<float> compute_loss(const Tensor<float>&, const Tensor<float>&, const LossConfig&);
template Tensor<double> compute_loss(const Tensor<double>&, const Tensor<double>&, const LossConfig&);

void OptimizerConfig::validate() const {
  adam.validate();
  if (batch_size < 1) throw ConfigError("optimizer: batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("optimizer: epochs must be >= 1");
  if (patience < 0) throw ConfigError("optimizer: patience must be >= 0");
}

json History::to_json() const {
  json rows = json::array();
  for (const auto& e : epochs) {
    json r = {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"improved", e.improved}};
    if (e.has_val) r["val"] = e.val.to_json();
    rows.push_back(r);
  }
  return {{"epochs", rows}, {"best_epoch", best_epoch}, {"best_val_f1", best_val_f1}, {"stopped_early", stopped_early}};
}

std::string History::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "epoch,train_loss,val_accuracy,val_f1,val_map,val_gmean,val_auc,val_sensitivity,val_specificity,val_ppv\n";
  for (const auto& e : epochs) {
    os << e.epoch << ',' << e.train_loss;
    if (e.has_val) {
      const auto& v = e.val;
      os << ',' << v.accuracy << ',' << v.f1 << ',' << v.map << ',' << v.gmean << ',' << v.auc << ',' << v.sensitivity
         << ',' << v.specificity << ',' << v.ppv;
    } else {
      os << ",,,,,,,,";
    }
    os << '\n';
  }
  return os.str();
}

Evaluation evaluate(Model& model, const data::BatchIterator& it, data::TaskKind task, double threshold) {
  ad::NoGradGuard no_grad;
  model.train(false);
  Evaluation ev;
  ev.k = model.spec().outputs;
  for (std::size_t b = 0; b < it.num_batches(); ++b) {
    const auto batch = it.batch(b);
    const auto logits = model.forward(batch.x);
    const auto n = batch.x.dim(0);
    const auto p = probabilities(logits.data(), n, ev.k, task);
    ev.scores.insert(ev.scores.end(), p.begin(), p.end());
    for (float y : batch.y.data()) ev.targets.push_back(y != 0.0f);
    ev.n += n;
  }
  ev.report = compute_metrics(ev.scores, ev.targets, ev.n, ev.k, task, threshold);
  return ev;
}

namespace {

struct Snapshot {
  std::vector<std::vector<float>> params;
  std::vector<std::vector<float>> buffers;
};

Snapshot take(Model& model) {
  Snapshot s;
  for (const auto& p : model.named_parameters()) s.params.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  for (const auto& b : model.named_buffers()) s.buffers.push_back(*b.values);
  return s;
}

void restore(Model& model, const Snapshot& s) {
  auto params = model.named_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) std::copy(s.params[i].begin(), s.params[i].end(), params[i].tensor.mutable_data().begin());
  auto buffers = model.named_buffers();
  for (std::size_t i = 0; i < buffers.size(); ++i) *buffers[i].values = s.buffers[i];
}

}  // namespace

History train(Model& model, data::BatchIterator& train_it, const data::BatchIterator* val_it, data::TaskKind task,
              const TrainOptions& options) {
  options.optim.validate();
  if (options.loss.kind == LossKind::Focal) options.loss.focal.validate();

  auto backbone = model.backbone_parameters();
  if (options.head_only) {
    model.freeze_backbone(true);
    for (auto& p : backbone) p.tensor.set_requires_grad(false);
  }
  Adam<float> opt(options.head_only ? model.head_parameters() : model.named_parameters(), options.optim.adam);

  History hist;
  Snapshot best;
  bool have_best = false;
  int since_best = 0;
  try {
    for (int epoch = 1; epoch <= options.optim.epochs; ++epoch) {
      model.train(true);
      model.seed_dropout(options.seed, mix64(static_cast<std::uint64_t>(epoch)));
      train_it.set_epoch(static_cast<std::uint64_t>(epoch));
      double loss_sum = 0.0;
      std::int64_t seen = 0;
      for (std::size_t b = 0; b < train_it.num_batches(); ++b) {
        const auto batch = train_it.batch(b);
        const auto loss = compute_loss(model.forward(batch.x), batch.y, options.loss);
        const double value = loss.item();
        if (!std::isfinite(value))
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b + 1));
        loss.backward();
        opt.step();
        opt.zero_grad();
        loss_sum += value * static_cast<double>(batch.x.dim(0));
        seen += batch.x.dim(0);
      }

      EpochRecord rec;
      rec.epoch = epoch;
      rec.train_loss = loss_sum / static_cast<double>(seen);
      if (options.validator) {
        rec.val = options.validator(model, epoch);
        rec.has_val = true;
      } else if (val_it) {
        rec.val = evaluate(model, *val_it, task).report;
        rec.has_val = true;
      }
      if (rec.has_val) {
        if (rec.val.f1 > hist.best_val_f1) {
          hist.best_val_f1 = rec.val.f1;
          hist.best_epoch = epoch;
          rec.improved = true;
          since_best = 0;
          if (options.restore_best) {
            best = take(model);
            have_best = true;
          }
        } else {
          ++since_best;
        }
      }
      hist.epochs.push_back(rec);
      if (options.log) {
        *options.log << "epoch " << epoch << " loss " << rec.train_loss;
        if (rec.has_val) *options.log << " val_f1 " << rec.val.f1 << (rec.improved ? " *" : "");
        *options.log << '\n';
      }
      if (options.on_epoch && options.on_epoch(model, rec)) break;
      if (rec.has_val && options.optim.patience > 0 && since_best >= options.optim.patience) {
        hist.stopped_early = true;
        break;
      }
    }
  } catch (...) {
    if (options.head_only) {
      model.freeze_backbone(false);
      for (auto& p : backbone) p.tensor.set_requires_grad(true);
    }
    throw;
  }
  if (have_best) restore(model, best);
  if (options.head_only) {
    model.freeze_backbone(false);
    for (auto& p : backbone) p.tensor.set_requires_grad(true);
  }
  model.train(false);
  return hist;
}

}  // namespace ecg::learn
