// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kdforge {

/// counts[t][p]: examples of true class t predicted as p.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes);
  static ConfusionMatrix from_counts(const std::vector<std::vector<std::uint64_t>>& counts);

  std::size_t classes() const { return classes_; }
  std::uint64_t& at(std::size_t t, std::size_t p) { return counts_[t * classes_ + p]; }
  std::uint64_t at(std::size_t t, std::size_t p) const { return counts_[t * classes_ + p]; }
  std::uint64_t total() const;
  std::uint64_t row_sum(std::size_t t) const;
  std::uint64_t col_sum(std::size_t p) const;
  std::uint64_t correct() const;

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> predicted, std::size_t classes);

struct Averages {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

struct RocPoint {
  double fpr = 0;
  double tpr = 0;
  double threshold = 0;
};

struct RocCurve {
  std::vector<RocPoint> points;
  double auroc = 0;
};

struct MetricsReport {
  std::optional<double> accuracy;
  std::vector<double> precision;
  std::vector<double> recall;
  std::vector<double> f1;
  std::vector<std::uint64_t> support;
  Averages macro;
  Averages weighted;
  std::optional<double> mcc;
  std::optional<double> pearson;
  std::optional<double> spearman;
  std::optional<double> auroc;
  std::optional<ConfusionMatrix> confusion;
  std::vector<RocPoint> roc_points;
  /// Set when a precision or recall had an empty denominator and was reported as 0.
  bool zero_division = false;
  std::vector<std::string> zero_division_notes;
};

/// Accuracy, per-class precision/recall/F1, macro and support-weighted averages.
MetricsReport summarize(const ConfusionMatrix& cm);

/// Binary only; a zero denominator yields 0.
double matthews(const ConfusionMatrix& cm);

double pearson(std::span<const double> x, std::span<const double> y);
/// Pearson on average ranks.
double spearman(std::span<const double> x, std::span<const double> y);
/// 1-based ranks; tied values share their mean rank.
std::vector<double> average_ranks(std::span<const double> x);

/// Threshold sweep over distinct scores, highest first; trapezoidal area.
RocCurve roc_auc(std::span<const double> scores, std::span<const int> labels);

/// summarize + MCC for two classes + ROC when positive-class scores are given.
MetricsReport classification_report(std::span<const int> truth, std::span<const int> predicted,
                                     std::size_t classes, std::span<const double> positive_scores = {});
MetricsReport regression_report(std::span<const double> truth, std::span<const double> predicted);

/// Macro precision/recall/F1 over the classes present in truth or predictions.
/// Suited to vocabulary-sized label spaces.
Averages sparse_macro_scores(std::span<const int> truth, std::span<const int> predicted);

std::string report_to_json(const MetricsReport& report);
void write_report(const std::filesystem::path& path, const MetricsReport& report);

/// Presentation rounding, e.g. round_to(0.84943, 2) == 0.85.
double round_to(double value, int decimals);

struct EpochRow {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double train_acc = 0;
  double val_acc = 0;
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  double lr = 0;
  double wall_seconds = 0;
};

/// Per-epoch training log. Epochs must be strictly increasing. Wall time is
/// kept in memory only so the CSV is reproducible byte for byte.
class EpochLog {
 public:
  static constexpr const char* kHeader = "epoch,train_loss,val_loss,train_acc,val_acc,precision,recall,f1,lr";

  void add(const EpochRow& row);
  const std::vector<EpochRow>& rows() const { return rows_; }
  std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;

 private:
  std::vector<EpochRow> rows_;
};

}  // namespace kdforge
