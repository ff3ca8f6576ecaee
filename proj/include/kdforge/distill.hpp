// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kdforge/data.hpp"
#include "kdforge/metrics.hpp"
#include "kdforge/model.hpp"
#include "kdforge/optim.hpp"
#include "kdforge/tensor.hpp"
#include "kdforge/tokenizer.hpp"

namespace kdforge {

inline constexpr double kKlFloor = 1e-12;

/// softmax(logits / temperature) over the last axis.
template <typename T>
BasicTensor<T> soften(const BasicTensor<T>& logits, double temperature);

/// sum p log(p / q) with 0 log 0 = 0 and q floored at 1e-12. Both inputs must
/// be non-negative and sum to 1 within 1e-5.
template <typename T>
double kl_divergence(std::span<const T> p, std::span<const T> q);

/// Mean over selected rows of KL(soften(teacher) || soften(student)).
template <typename T>
class DistillationLoss {
 public:
  /// Logits are [P, C] (or any rank, rows over the last axis). `select` has
  /// one 0/1 entry per row; empty selects every row.
  T forward(const BasicTensor<T>& teacher_logits, const BasicTensor<T>& student_logits,
            double temperature, std::span<const std::int32_t> select = {});
  /// d(loss)/d(student_logits) = (p_s - p_t) / (T * count) on selected rows.
  BasicTensor<T> backward(T upstream = T(1)) const;
  std::size_t counted() const { return counted_; }

 private:
  std::optional<BasicTensor<T>> pt_, ps_;
  std::vector<std::int32_t> select_;
  double temperature_ = 1.0;
  std::size_t counted_ = 0;
};

/// alpha * T^2 * distill + (1 - alpha) * ce.
double combined_loss(double distill, double ce, double alpha, double temperature);

struct DistillConfig {
  double temperature = 2.0;
  double alpha = 0.5;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  double learning_rate = 5e-5;
  double weight_decay = 1e-2;
  double warmup_fraction = 0.1;
  std::size_t max_len = 128;
  double mask_rate = 0.15;
  /// Share of the corpus held out for validation when no validation lines are given.
  double validation_fraction = 0.05;
  std::uint64_t seed = 42;

  void validate() const;
};

struct StepRecord {
  std::uint64_t step = 0;
  double combined = 0;
  double distill = 0;
  double ce = 0;
  double lr = 0;
};

struct DistillReport {
  EpochLog log;
  std::vector<StepRecord> steps;
  double final_val_loss = 0;
  AdamWState<float> optimizer;
};

struct Teacher {
  const ModelConfig& config;
  const EncoderParams<float>& params;
};

struct MlmEvaluation {
  double loss = 0;
  double accuracy = 0;
  Averages macro;
  std::size_t masked = 0;
};

/// Tokenizes and masks lines once with the given rng; lines without a
/// maskable token are skipped.
std::vector<MlmRow> prepare_mlm_rows(std::span<const std::string> lines, const Vocabulary& vocab,
                                     std::size_t max_len, double mask_rate, Rng& rng);

/// Eval-mode masked-token loss, top-1 accuracy and macro scores.
MlmEvaluation evaluate_mlm(const ModelConfig& config, const EncoderParams<float>& params,
                           std::span<const MlmRow> rows, std::size_t batch_size);

struct DistillHooks {
  std::function<void(const EpochRow&)> on_epoch;
};

/// Trains `student` on masked-token batches. With a teacher the loss is
/// combined_loss(KL, CE); without one (or alpha = 0) it is the plain CE.
/// The teacher runs in eval mode and is never modified. Validation masks are
/// drawn once so every epoch and run sees the same targets.
DistillReport run_distillation(const std::optional<Teacher>& teacher, const ModelConfig& student_config,
                               EncoderParams<float>& student, const Vocabulary& vocab,
                               std::span<const std::string> train_lines,
                               std::span<const std::string> validation_lines, const DistillConfig& config,
                               const DistillHooks& hooks = {});

}  // namespace kdforge
