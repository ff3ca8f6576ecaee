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
#include "kdforge/tokenizer.hpp"

namespace kdforge {

/// Defaults are the ADHD severity fine-tuning setup.
struct FinetuneConfig {
  double learning_rate = 2e-5;
  std::size_t batch_size = 8;
  std::size_t epochs = 10;
  double weight_decay = 1e-2;
  std::size_t patience = 3;
  std::size_t max_len = 512;
  /// Absolute warmup steps; takes precedence over warmup_fraction when > 0.
  std::uint64_t warmup_steps = 0;
  double warmup_fraction = 0.0;
  /// Synonym replacement probability per lexicon word (0 disables).
  double augment_rate = 0.0;
  std::uint64_t seed = 42;

  void validate() const;
};

struct FinetuneHooks {
  std::function<void(const EpochRow&)> on_epoch;
};

struct FinetuneResult {
  EpochLog log;
  std::vector<double> val_losses;
  std::size_t best_epoch = 0;
  double best_val_loss = 0;
  bool stopped_early = false;
  AdamWState<float> optimizer;
};

/// Checks every label against the head: integral and in range for
/// classification, finite for regression.
void check_labels(std::span<const LabeledExample> examples, const TaskHeadSpec& head);

/// Trains the task head and encoder with AdamW, evaluating validation loss
/// after every epoch. Stops after `patience` epochs without strict
/// improvement and leaves `params` at the best epoch's values.
FinetuneResult run_finetune(const ModelConfig& config, EncoderParams<float>& params, const TaskHeadSpec& head,
                            const Vocabulary& vocab, std::span<const LabeledExample> train,
                            std::span<const LabeledExample> validation, const FinetuneConfig& cfg,
                            const Lexicon* lexicon = nullptr, const FinetuneHooks& hooks = {});

struct TaskPredictions {
  /// [N, num_labels] logits, row per example.
  std::vector<std::vector<float>> logits;
  double loss = 0;
};

/// Eval-mode inference in batches.
TaskPredictions predict(const ModelConfig& config, const EncoderParams<float>& params, const TaskHeadSpec& head,
                        const Vocabulary& vocab, std::span<const LabeledExample> examples, std::size_t max_len,
                        std::size_t batch_size);

/// Classification: argmax predictions, positive-class softmax scores for two
/// classes. Regression: Pearson and Spearman of the head outputs.
MetricsReport report_from_predictions(const TaskPredictions& preds, std::span<const LabeledExample> examples,
                                      const TaskHeadSpec& head);

MetricsReport evaluate_task(const ModelConfig& config, const EncoderParams<float>& params, const TaskHeadSpec& head,
                            const Vocabulary& vocab, std::span<const LabeledExample> examples, std::size_t max_len,
                            std::size_t batch_size);

struct GlueTask {
  std::string name;
  TaskHeadSpec head;
  FinetuneConfig finetune;
  bool pair = false;
  bool report_mcc = false;
};

/// mrpc, sst2, cola, qqp, mnli, stsb; anything else is a config error.
GlueTask glue_task(const std::string& name);
const std::vector<std::string>& glue_task_names();

}  // namespace kdforge
