// SPDX-License-Identifier: Apache-2.0
#include "kdforge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <limits>
#include <numeric>
#include <set>

#include <json.hpp>

#include "kdforge/error.hpp"

namespace kdforge {

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {
  if (classes == 0) throw Error(ErrorKind::input, "confusion matrix needs at least one class");
}

ConfusionMatrix ConfusionMatrix::from_counts(const std::vector<std::vector<std::uint64_t>>& counts) {
  ConfusionMatrix cm(counts.size());
  for (std::size_t t = 0; t < counts.size(); ++t) {
    if (counts[t].size() != counts.size()) throw Error(ErrorKind::input, "confusion counts must be square");
    for (std::size_t p = 0; p < counts.size(); ++p) cm.at(t, p) = counts[t][p];
  }
  return cm;
}

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

std::uint64_t ConfusionMatrix::row_sum(std::size_t t) const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < classes_; ++p) s += at(t, p);
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t p) const {
  std::uint64_t s = 0;
  for (std::size_t t = 0; t < classes_; ++t) s += at(t, p);
  return s;
}

std::uint64_t ConfusionMatrix::correct() const {
  std::uint64_t s = 0;
  for (std::size_t c = 0; c < classes_; ++c) s += at(c, c);
  return s;
}

ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> predicted, std::size_t classes) {
  if (truth.size() != predicted.size())
    throw Error(ErrorKind::input, "confusion: " + std::to_string(truth.size()) + " labels vs " +
                                      std::to_string(predicted.size()) + " predictions");
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i], p = predicted[i];
    if (t < 0 || static_cast<std::size_t>(t) >= classes || p < 0 || static_cast<std::size_t>(p) >= classes)
      throw Error(ErrorKind::label, "confusion: label pair (" + std::to_string(t) + ", " + std::to_string(p) +
                                        ") at index " + std::to_string(i) + " outside [0, " +
                                        std::to_string(classes) + ")");
    ++cm.at(static_cast<std::size_t>(t), static_cast<std::size_t>(p));
  }
  return cm;
}

namespace {

double ratio(std::uint64_t num, std::uint64_t den) {
  return static_cast<double>(num) / static_cast<double>(den);
}

double f1_of(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; }

}  // namespace

MetricsReport summarize(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw Error(ErrorKind::input, "summarize: confusion matrix is empty");
  MetricsReport r;
  const std::size_t k = cm.classes();
  r.accuracy = ratio(cm.correct(), total);
  r.precision.resize(k);
  r.recall.resize(k);
  r.f1.resize(k);
  r.support.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    const std::uint64_t tp = cm.at(c, c), pred = cm.col_sum(c), sup = cm.row_sum(c);
    r.support[c] = sup;
    if (pred == 0) {
      r.zero_division = true;
      r.zero_division_notes.push_back("precision of class " + std::to_string(c) + " (no predictions)");
    }
    if (sup == 0) {
      r.zero_division = true;
      r.zero_division_notes.push_back("recall of class " + std::to_string(c) + " (no true examples)");
    }
    r.precision[c] = pred ? ratio(tp, pred) : 0.0;
    r.recall[c] = sup ? ratio(tp, sup) : 0.0;
    r.f1[c] = f1_of(r.precision[c], r.recall[c]);
    r.macro.precision += r.precision[c] / static_cast<double>(k);
    r.macro.recall += r.recall[c] / static_cast<double>(k);
    r.macro.f1 += r.f1[c] / static_cast<double>(k);
    const double w = ratio(sup, total);
    r.weighted.precision += w * r.precision[c];
    r.weighted.recall += w * r.recall[c];
    r.weighted.f1 += w * r.f1[c];
  }
  r.confusion = cm;
  return r;
}

double matthews(const ConfusionMatrix& cm) {
  if (cm.classes() != 2)
    throw Error(ErrorKind::input, "matthews: needs a 2x2 matrix, got " + std::to_string(cm.classes()) + " classes");
  const double tn = static_cast<double>(cm.at(0, 0)), fp = static_cast<double>(cm.at(0, 1));
  const double fn = static_cast<double>(cm.at(1, 0)), tp = static_cast<double>(cm.at(1, 1));
  const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  if (den == 0) return 0.0;
  return (tp * tn - fp * fn) / std::sqrt(den);
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error(ErrorKind::input, "pearson: inputs differ in length");
  if (x.size() < 2) throw Error(ErrorKind::degenerate, "pearson: needs at least two points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0 || syy == 0) throw Error(ErrorKind::degenerate, "pearson: an input has zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double mean_rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error(ErrorKind::input, "spearman: inputs differ in length");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  return pearson(rx, ry);
}

RocCurve roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw Error(ErrorKind::input, "roc_auc: scores and labels differ in length");
  std::uint64_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1)
      throw Error(ErrorKind::label, "roc_auc: label " + std::to_string(labels[i]) + " at index " +
                                        std::to_string(i) + " is not 0/1");
    if (!std::isfinite(scores[i])) throw Error(ErrorKind::numeric, "roc_auc: non-finite score at index " + std::to_string(i));
    labels[i] ? ++pos : ++neg;
  }
  if (pos == 0 || neg == 0) throw Error(ErrorKind::input, "roc_auc: labels contain a single class");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve curve;
  curve.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  std::uint64_t tp = 0, fp = 0;
  double area = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double thr = scores[order[i]];
    const std::uint64_t tp0 = tp, fp0 = fp;
    while (i < order.size() && scores[order[i]] == thr) labels[order[i++]] ? ++tp : ++fp;
    area += static_cast<double>(fp - fp0) * static_cast<double>(tp + tp0) / 2.0;
    curve.points.push_back({ratio(fp, neg), ratio(tp, pos), thr});
  }
  curve.auroc = area / (static_cast<double>(pos) * static_cast<double>(neg));
  return curve;
}

MetricsReport classification_report(std::span<const int> truth, std::span<const int> predicted,
                                    std::size_t classes, std::span<const double> positive_scores) {
  MetricsReport r = summarize(confusion(truth, predicted, classes));
  if (classes == 2) {
    r.mcc = matthews(*r.confusion);
    if (!positive_scores.empty()) {
      const bool both = std::find(truth.begin(), truth.end(), 0) != truth.end() &&
                        std::find(truth.begin(), truth.end(), 1) != truth.end();
      if (both) {
        auto roc = roc_auc(positive_scores, truth);
        r.auroc = roc.auroc;
        r.roc_points = std::move(roc.points);
      }
    }
  }
  return r;
}

MetricsReport regression_report(std::span<const double> truth, std::span<const double> predicted) {
  MetricsReport r;
  r.pearson = pearson(predicted, truth);
  r.spearman = spearman(predicted, truth);
  return r;
}

Averages sparse_macro_scores(std::span<const int> truth, std::span<const int> predicted) {
  if (truth.size() != predicted.size()) throw Error(ErrorKind::input, "macro scores: length mismatch");
  if (truth.empty()) throw Error(ErrorKind::empty_batch, "macro scores: no predictions");
  struct Counts {
    std::uint64_t tp = 0, pred = 0, sup = 0;
  };
  std::map<int, Counts> per;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++per[truth[i]].sup;
    ++per[predicted[i]].pred;
    if (truth[i] == predicted[i]) ++per[truth[i]].tp;
  }
  Averages a;
  const double k = static_cast<double>(per.size());
  for (const auto& [c, n] : per) {
    const double p = n.pred ? ratio(n.tp, n.pred) : 0.0;
    const double rc = n.sup ? ratio(n.tp, n.sup) : 0.0;
    a.precision += p / k;
    a.recall += rc / k;
    a.f1 += f1_of(p, rc) / k;
  }
  return a;
}

std::string report_to_json(const MetricsReport& r) {
  using nlohmann::json;
  json j = json::object();
  const auto avg = [](const Averages& a) { return json{{"precision", a.precision}, {"recall", a.recall}, {"f1", a.f1}}; };
  if (r.accuracy) j["accuracy"] = *r.accuracy;
  if (!r.precision.empty()) {
    j["precision"] = r.precision;
    j["recall"] = r.recall;
    j["f1"] = r.f1;
    j["support"] = r.support;
    j["macro"] = avg(r.macro);
    j["weighted"] = avg(r.weighted);
    j["zero_division"] = r.zero_division;
    if (!r.zero_division_notes.empty()) j["zero_division_notes"] = r.zero_division_notes;
  }
  if (r.mcc) j["mcc"] = *r.mcc;
  if (r.pearson) j["pearson"] = *r.pearson;
  if (r.spearman) j["spearman"] = *r.spearman;
  if (r.auroc) j["auroc"] = *r.auroc;
  if (r.confusion) {
    json rows = json::array();
    for (std::size_t t = 0; t < r.confusion->classes(); ++t) {
      json row = json::array();
      for (std::size_t p = 0; p < r.confusion->classes(); ++p) row.push_back(r.confusion->at(t, p));
      rows.push_back(row);
    }
    j["confusion"] = rows;
  }
  if (!r.roc_points.empty()) {
    json pts = json::array();
    for (const auto& p : r.roc_points)
      pts.push_back(json{{"fpr", p.fpr}, {"tpr", p.tpr},
                         {"threshold", std::isinf(p.threshold) ? json(nullptr) : json(p.threshold)}});
    j["roc_points"] = pts;
  }
  return j.dump(2);
}

void write_report(const std::filesystem::path& path, const MetricsReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  out << report_to_json(report) << '\n';
}

double round_to(double value, int decimals) {
  const double scale = std::pow(10.0, decimals);
  return std::round(value * scale) / scale;
}

void EpochLog::add(const EpochRow& row) {
  if (!rows_.empty() && row.epoch <= rows_.back().epoch)
    throw Error(ErrorKind::state, "epoch log rows must increase: " + std::to_string(row.epoch) + " after " +
                                      std::to_string(rows_.back().epoch));
  rows_.push_back(row);
}

std::string EpochLog::to_csv() const {
  std::string out = std::string(kHeader) + "\n";
  char buf[64];
  for (const auto& r : rows_) {
    out += std::to_string(r.epoch);
    for (double v : {r.train_loss, r.val_loss, r.train_acc, r.val_acc, r.precision, r.recall, r.f1, r.lr}) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

void EpochLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  out << to_csv();
}

}  // namespace kdforge
