// SPDX-License-Identifier: Apache-2.0
#include "kdforge/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "kdforge/error.hpp"
#include "kdforge/ops.hpp"

namespace kdforge {

void FinetuneConfig::validate() const {
  const auto fail = [](const std::string& m) { throw Error(ErrorKind::config, "finetune: " + m); };
  if (!(learning_rate > 0)) fail("learning rate must be > 0");
  if (batch_size == 0) fail("batch size must be >= 1");
  if (epochs == 0) fail("epochs must be >= 1");
  if (!(weight_decay >= 0)) fail("weight decay must be >= 0");
  if (patience == 0) fail("patience must be >= 1");
  if (max_len < 3) fail("max_len must be >= 3");
  if (!(warmup_fraction >= 0 && warmup_fraction < 1)) fail("warmup fraction must be in [0, 1)");
  if (!(augment_rate >= 0 && augment_rate <= 1)) fail("augment rate must be in [0, 1]");
}

void check_labels(std::span<const LabeledExample> examples, const TaskHeadSpec& head) {
  head.validate();
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const double y = examples[i].label;
    if (!std::isfinite(y)) throw Error(ErrorKind::label, "label at record " + std::to_string(i) + " is not finite");
    if (head.kind == HeadKind::classification &&
        (y != std::floor(y) || y < 0 || y >= static_cast<double>(head.num_labels)))
      throw Error(ErrorKind::label, "label " + std::to_string(y) + " at record " + std::to_string(i) +
                                        " is outside the head's range [0, " + std::to_string(head.num_labels) + ")");
  }
}

namespace {

enum Stream : std::uint64_t { kShuffle = 21, kDropout = 22, kAugment = 23 };

TokenizedSequence encode_example(const LabeledExample& e, const Vocabulary& vocab, std::size_t max_len) {
  if (e.text_b) return encode(e.text, std::string_view(*e.text_b), vocab, max_len);
  return encode(e.text, std::nullopt, vocab, max_len);
}

/// Mean loss over the batch and d(loss)/d(logits).
double task_loss(const Tensor& logits, std::span<const LabeledExample* const> ex, const TaskHeadSpec& head,
                 Tensor* dlogits) {
  if (head.kind == HeadKind::classification) {
    std::vector<std::int32_t> targets;
    for (const auto* e : ex) targets.push_back(e->class_label());
    CrossEntropy<float> ce;
    const double loss = ce.forward(logits, targets);
    if (dlogits) *dlogits = ce.backward();
    return loss;
  }
  const double n = static_cast<double>(ex.size());
  double loss = 0;
  if (dlogits) *dlogits = Tensor(logits.shape());
  for (std::size_t i = 0; i < ex.size(); ++i) {
    const double d = static_cast<double>(logits.ptr()[i]) - ex[i]->label;
    loss += d * d / n;
    if (dlogits) dlogits->ptr()[i] = static_cast<float>(2 * d / n);
  }
  return loss;
}

std::vector<TokenizedSequence> encode_all(std::span<const LabeledExample> examples, const Vocabulary& vocab,
                                          std::size_t max_len) {
  std::vector<TokenizedSequence> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(encode_example(e, vocab, max_len));
  return out;
}

}  // namespace

TaskPredictions predict(const ModelConfig& config, const EncoderParams<float>& params, const TaskHeadSpec& head,
                        const Vocabulary& vocab, std::span<const LabeledExample> examples, std::size_t max_len,
                        std::size_t batch_size) {
  if (examples.empty()) throw Error(ErrorKind::empty_batch, "no examples to evaluate");
  if (batch_size == 0) throw Error(ErrorKind::config, "batch size must be >= 1");
  check_param_shapes(params, config, HeadSet{params.has("cls.predictions.bias"), head});
  Encoder<float> enc(config);
  const auto seqs = encode_all(examples, vocab, max_len);
  TaskPredictions out;
  double loss_sum = 0;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, examples.size() - start);
    const auto batch = trimmed_batch(std::span(seqs).subspan(start, n));
    const auto logits = enc.forward_task(batch, params, head, nullptr, false);
    std::vector<const LabeledExample*> ex;
    for (std::size_t i = 0; i < n; ++i) ex.push_back(&examples[start + i]);
    loss_sum += task_loss(logits, ex, head, nullptr) * static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) {
      const auto row = logits.row(r);
      out.logits.emplace_back(row.begin(), row.end());
    }
  }
  out.loss = loss_sum / static_cast<double>(examples.size());
  return out;
}

MetricsReport report_from_predictions(const TaskPredictions& preds, std::span<const LabeledExample> examples,
                                      const TaskHeadSpec& head) {
  if (preds.logits.size() != examples.size())
    throw Error(ErrorKind::input, "prediction count does not match the examples");
  if (head.kind == HeadKind::regression) {
    std::vector<double> truth, out;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      truth.push_back(examples[i].label);
      out.push_back(preds.logits[i].at(0));
    }
    return regression_report(truth, out);
  }
  std::vector<int> truth, pred;
  std::vector<double> pos;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    auto p = preds.logits[i];
    softmax_row_inplace(p.data(), p.size());
    truth.push_back(examples[i].class_label());
    pred.push_back(static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()));
    if (head.num_labels == 2) pos.push_back(p[1]);
  }
  return classification_report(truth, pred, head.num_labels, pos);
}

MetricsReport evaluate_task(const ModelConfig& config, const EncoderParams<float>& params, const TaskHeadSpec& head,
                            const Vocabulary& vocab, std::span<const LabeledExample> examples, std::size_t max_len,
                            std::size_t batch_size) {
  check_labels(examples, head);
  return report_from_predictions(predict(config, params, head, vocab, examples, max_len, batch_size), examples, head);
}

FinetuneResult run_finetune(const ModelConfig& config, EncoderParams<float>& params, const TaskHeadSpec& head,
                            const Vocabulary& vocab, std::span<const LabeledExample> train,
                            std::span<const LabeledExample> validation, const FinetuneConfig& cfg,
                            const Lexicon* lexicon, const FinetuneHooks& hooks) {
  cfg.validate();
  config.validate();
  head.validate();
  if (train.empty()) throw Error(ErrorKind::empty_batch, "training set is empty");
  if (validation.empty()) throw Error(ErrorKind::empty_batch, "validation set is empty");
  check_labels(train, head);
  check_labels(validation, head);
  check_param_shapes(params, config, HeadSet{params.has("cls.predictions.bias"), head});
  if (vocab.size() != config.vocab_size)
    throw Error(ErrorKind::compatibility, "vocabulary has " + std::to_string(vocab.size()) +
                                              " pieces but the model expects " + std::to_string(config.vocab_size));
  if (cfg.max_len > config.max_position_embeddings)
    throw Error(ErrorKind::config, "max_len " + std::to_string(cfg.max_len) + " exceeds max_position_embeddings " +
                                       std::to_string(config.max_position_embeddings));

  const Rng root(cfg.seed);
  Rng shuffle_rng = root.split(kShuffle), drop_rng = root.split(kDropout), aug_rng = root.split(kAugment);
  const bool augment = lexicon && !lexicon->empty() && cfg.augment_rate > 0;

  const std::size_t steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::uint64_t total = steps_per_epoch * cfg.epochs;
  ScheduleConfig schedule = ScheduleConfig::from_fraction(total, cfg.warmup_fraction);
  if (cfg.warmup_steps > 0) schedule.warmup_steps = std::min<std::uint64_t>(cfg.warmup_steps, schedule.total_steps - 1);
  AdamWConfig opt;
  opt.lr = cfg.learning_rate;
  opt.weight_decay = cfg.weight_decay;
  opt.validate();

  FinetuneResult result;
  result.optimizer = AdamWState<float>::for_params(params);
  auto grads = params.zeros_like();
  EncoderParams<float> best = params;
  EarlyStopper stopper(cfg.patience);
  Encoder<float> enc(config);

  std::vector<TokenizedSequence> seqs = encode_all(train, vocab, cfg.max_len);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  double lr = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<LabeledExample> augmented;
    if (augment) {
      for (const auto& e : train) augmented.push_back(synonym_augment(e, *lexicon, cfg.augment_rate, aug_rng));
      seqs = encode_all(augmented, vocab, cfg.max_len);
    }
    shuffle_in_place(order, shuffle_rng);
    double loss_sum = 0;
    std::size_t hits = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      std::vector<TokenizedSequence> bseq;
      std::vector<const LabeledExample*> bex;
      for (std::size_t i = 0; i < n; ++i) {
        bseq.push_back(seqs[order[start + i]]);
        bex.push_back(&train[order[start + i]]);
      }
      const std::uint64_t step = result.optimizer.step;
      lr = lr_at_step(step, cfg.learning_rate, schedule);
      const auto batch = trimmed_batch(bseq);
      Tensor logits({1});
      double loss = 0;
      try {
        logits = enc.forward_task(batch, params, head, &drop_rng, true);
        Tensor dlogits({1});
        loss = task_loss(logits, bex, head, &dlogits);
        if (!std::isfinite(loss)) throw Error(ErrorKind::divergence, "non-finite loss at step " + std::to_string(step));
        grads.set_zero();
        enc.backward(dlogits, grads);
        adamw_step(params, grads, result.optimizer, opt, lr);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::numeric) throw;
        throw Error(ErrorKind::divergence, "step " + std::to_string(step) + ": " + e.what());
      }
      loss_sum += loss * static_cast<double>(n);
      if (head.kind == HeadKind::classification)
        for (std::size_t r = 0; r < n; ++r) {
          const auto row = logits.row(r);
          hits += static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) == bex[r]->class_label();
        }
    }

    TaskPredictions preds;
    try {
      preds = predict(config, params, head, vocab, validation, cfg.max_len, cfg.batch_size);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::numeric) throw;
      throw Error(ErrorKind::divergence, "validation after epoch " + std::to_string(epoch) + ": " + e.what());
    }
    const auto rep = report_from_predictions(preds, validation, head);
    EpochRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(train.size());
    row.val_loss = preds.loss;
    if (head.kind == HeadKind::classification) {
      row.train_acc = static_cast<double>(hits) / static_cast<double>(train.size());
      row.val_acc = *rep.accuracy;
      row.precision = rep.weighted.precision;
      row.recall = rep.weighted.recall;
      row.f1 = rep.weighted.f1;
    }
    row.lr = lr;
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.add(row);
    result.val_losses.push_back(preds.loss);
    if (hooks.on_epoch) hooks.on_epoch(row);

    const auto decision = stopper.update(preds.loss);
    if (decision.improved) {
      best = params;
      result.best_epoch = epoch;
      result.best_val_loss = preds.loss;
    }
    if (decision.stop) {
      result.stopped_early = epoch < cfg.epochs;
      break;
    }
  }
  params = std::move(best);
  return result;
}

GlueTask glue_task(const std::string& name) {
  GlueTask t;
  t.name = name;
  t.finetune.max_len = 128;
  t.finetune.weight_decay = 1e-2;
  auto& f = t.finetune;
  if (name == "mrpc") {
    t.head = TaskHeadSpec::classification(2);
    t.pair = true;
    f.learning_rate = 5e-5, f.epochs = 2, f.batch_size = 8;
  } else if (name == "sst2") {
    t.head = TaskHeadSpec::classification(2);
    f.learning_rate = 2e-5, f.epochs = 10, f.batch_size = 8, f.augment_rate = 0.1;
  } else if (name == "cola") {
    t.head = TaskHeadSpec::classification(2);
    t.report_mcc = true;
    f.learning_rate = 2e-5, f.epochs = 10, f.batch_size = 8, f.augment_rate = 0.1;
  } else if (name == "qqp") {
    t.head = TaskHeadSpec::classification(2);
    t.pair = true;
    f.learning_rate = 2e-5, f.epochs = 3, f.batch_size = 16, f.warmup_steps = 500;
  } else if (name == "mnli") {
    t.head = TaskHeadSpec::classification(3);
    t.pair = true;
    f.learning_rate = 5e-5, f.epochs = 3, f.batch_size = 8;
  } else if (name == "stsb") {
    t.head = TaskHeadSpec::regression();
    t.pair = true;
    f.learning_rate = 5e-5, f.epochs = 6, f.batch_size = 8;
  } else {
    throw Error(ErrorKind::config, "unknown GLUE task '" + name + "' (expected mrpc, sst2, cola, qqp, mnli or stsb)");
  }
  return t;
}

const std::vector<std::string>& glue_task_names() {
  static const std::vector<std::string> names = {"mrpc", "sst2", "cola", "qqp", "mnli", "stsb"};
  return names;
}

}  // namespace kdforge
