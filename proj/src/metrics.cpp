#include "ecg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ecg/error.hpp"
#include "ecg/losses.hpp"

namespace ecg::learn {

using nlohmann::json;

namespace {

double ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

std::vector<std::size_t> ranking(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw ShapeError("average_precision: length mismatch");
  double sum = 0.0;
  std::int64_t hits = 0, seen = 0;
  for (std::size_t i : ranking(scores)) {
    ++seen;
    if (labels[i]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(seen);
    }
  }
  return hits == 0 ? 0.0 : sum / static_cast<double>(hits);
}

double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw ShapeError("roc_auc: length mismatch");
  std::int64_t pos = 0, neg = 0, ordered = 0;
  for (std::size_t i : ranking(scores)) {
    if (labels[i]) {
      ++pos;
    } else {
      ++neg;
      ordered += pos;  // positives ranked ahead of this negative
    }
  }
  if (pos == 0 || neg == 0) return 0.0;
  return static_cast<double>(ordered) / (static_cast<double>(pos) * static_cast<double>(neg));
}

std::vector<std::uint8_t> decide(std::span<const double> scores, std::int64_t n, int k, data::TaskKind task,
                                 double threshold) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(n * k), 0);
  for (std::int64_t r = 0; r < n; ++r) {
    const auto row = scores.subspan(static_cast<std::size_t>(r * k), static_cast<std::size_t>(k));
    if (task == data::TaskKind::MultiClass) {
      const auto best = std::max_element(row.begin(), row.end()) - row.begin();
      out[static_cast<std::size_t>(r * k + best)] = 1;
    } else {
      for (int c = 0; c < k; ++c) out[static_cast<std::size_t>(r * k + c)] = row[static_cast<std::size_t>(c)] >= threshold;
    }
  }
  return out;
}

MetricsReport compute_metrics(std::span<const double> scores, std::span<const std::uint8_t> targets, std::int64_t n,
                              int k, data::TaskKind task, double threshold) {
  if (n < 1 || k < 1) throw ShapeError("metrics: empty score matrix");
  if (scores.size() != static_cast<std::size_t>(n * k) || targets.size() != scores.size())
    throw ShapeError("metrics: scores/targets do not match (" + std::to_string(n) + ", " + std::to_string(k) + ")");
  const auto pred = decide(scores, n, k, task, threshold);
  MetricsReport rep;
  double map_sum = 0.0, auc_sum = 0.0;
  int map_n = 0, auc_n = 0;
  std::vector<double> col(static_cast<std::size_t>(n));
  std::vector<std::uint8_t> lab(static_cast<std::size_t>(n));
  for (int c = 0; c < k; ++c) {
    ClassMetrics m;
    for (std::int64_t r = 0; r < n; ++r) {
      const auto i = static_cast<std::size_t>(r * k + c);
      const bool p = pred[i], t = targets[i];
      m.tp += p && t;
      m.fp += p && !t;
      m.tn += !p && !t;
      m.fn += !p && t;
      col[static_cast<std::size_t>(r)] = scores[i];
      lab[static_cast<std::size_t>(r)] = t;
    }
    const double tp = double(m.tp), fp = double(m.fp), tn = double(m.tn), fn = double(m.fn);
    m.accuracy = (tp + tn) / static_cast<double>(n);
    m.sensitivity = ratio(tp, tp + fn);
    m.specificity = ratio(tn, tn + fp);
    m.ppv = ratio(tp, tp + fp);
    m.f1 = ratio(2 * tp, 2 * tp + fp + fn);
    m.gmean = std::sqrt(m.sensitivity * m.specificity);
    m.ap_defined = m.tp + m.fn > 0;
    m.auc_defined = m.ap_defined && m.tn + m.fp > 0;
    if (m.ap_defined) {
      m.ap = average_precision(col, lab);
      map_sum += m.ap;
      ++map_n;
    } else {
      rep.warnings.push_back("class " + std::to_string(c) + " has no positives; excluded from MAP and AUC");
    }
    if (m.auc_defined) {
      m.auc = roc_auc(col, lab);
      auc_sum += m.auc;
      ++auc_n;
    } else if (m.ap_defined) {
      rep.warnings.push_back("class " + std::to_string(c) + " has no negatives; excluded from AUC");
    }
    rep.accuracy += m.accuracy;
    rep.sensitivity += m.sensitivity;
    rep.specificity += m.specificity;
    rep.ppv += m.ppv;
    rep.f1 += m.f1;
    rep.gmean += m.gmean;
    rep.per_class.push_back(m);
  }
  const double kk = k;
  rep.accuracy /= kk;
  rep.sensitivity /= kk;
  rep.specificity /= kk;
  rep.ppv /= kk;
  rep.f1 /= kk;
  rep.gmean /= kk;
  rep.map = map_n ? map_sum / map_n : 0.0;
  rep.auc = auc_n ? auc_sum / auc_n : 0.0;
  return rep;
}

std::vector<double> probabilities(std::span<const float> logits, std::int64_t n, int k, data::TaskKind task) {
  std::vector<double> p(logits.begin(), logits.end());
  if (task == data::TaskKind::MultiClass) {
    for (std::int64_t r = 0; r < n; ++r) {
      auto row = std::span<double>(p).subspan(static_cast<std::size_t>(r * k), static_cast<std::size_t>(k));
      const double mx = *std::max_element(row.begin(), row.end());
      double s = 0.0;
      for (auto& v : row) s += (v = std::exp(v - mx));
      for (auto& v : row) v /= s;
    }
  } else {
    for (auto& v : p) v = sigmoid(v);
  }
  return p;
}

json MetricsReport::to_json(const std::vector<std::string>& class_names) const {
  json j = {{"accuracy", accuracy}, {"f1", f1},     {"map", map}, {"gmean", gmean}, {"auc", auc},
            {"sensitivity", sensitivity}, {"specificity", specificity}, {"ppv", ppv}};
  json pc = json::array();
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const auto& m = per_class[c];
    json e = {{"tp", m.tp}, {"fp", m.fp}, {"tn", m.tn}, {"fn", m.fn}, {"accuracy", m.accuracy}, {"f1", m.f1},
              {"sensitivity", m.sensitivity}, {"specificity", m.specificity}, {"ppv", m.ppv}, {"gmean", m.gmean}};
    e["ap"] = m.ap_defined ? json(m.ap) : json(nullptr);
    e["auc"] = m.auc_defined ? json(m.auc) : json(nullptr);
    if (c < class_names.size()) e["class"] = class_names[c];
    pc.push_back(e);
  }
  j["per_class"] = pc;
  j["warnings"] = warnings;
  return j;
}

MetricsReport MetricsReport::from_json(const json& j) {
  MetricsReport r;
  r.accuracy = j.at("accuracy").get<double>();
  r.f1 = j.at("f1").get<double>();
  r.map = j.at("map").get<double>();
  r.gmean = j.at("gmean").get<double>();
  r.auc = j.at("auc").get<double>();
  r.sensitivity = j.at("sensitivity").get<double>();
  r.specificity = j.at("specificity").get<double>();
  r.ppv = j.at("ppv").get<double>();
  if (j.contains("warnings")) r.warnings = j.at("warnings").get<std::vector<std::string>>();
  return r;
}

}  // namespace ecg::learn
