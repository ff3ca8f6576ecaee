// SPDX-License-Identifier: Apache-2.0
#include "kdforge/distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "kdforge/error.hpp"
#include "kdforge/ops.hpp"

namespace kdforge {

namespace {

void require_temperature(double t) {
  if (!(t > 0) || !std::isfinite(t))
    throw Error(ErrorKind::config, "temperature must be a finite value > 0, got " + std::to_string(t));
}

template <typename T>
void require_distribution(std::span<const T> p, const char* which) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= 0) || !std::isfinite(static_cast<double>(p[i])))
      throw Error(ErrorKind::distribution, std::string("kl_divergence: ") + which + "[" + std::to_string(i) +
                                               "] is negative or non-finite");
    s += static_cast<double>(p[i]);
  }
  if (std::abs(s - 1.0) > 1e-5)
    throw Error(ErrorKind::distribution, std::string("kl_divergence: ") + which + " sums to " + std::to_string(s));
}

template <typename T>
double kl_row(const T* p, const T* q, std::size_t n) {
  double s = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const double pj = static_cast<double>(p[j]);
    if (pj > 0) s += pj * std::log(pj / std::max(static_cast<double>(q[j]), kKlFloor));
  }
  return s;
}

}  // namespace

template <typename T>
BasicTensor<T> soften(const BasicTensor<T>& logits, double temperature) {
  require_temperature(temperature);
  require_finite(logits, "soften input");
  BasicTensor<T> y = logits;
  const T inv = static_cast<T>(1.0 / temperature);
  for (auto& v : y.data()) v *= inv;
  for (std::size_t r = 0; r < y.rows(); ++r) softmax_row_inplace(y.ptr() + r * y.cols(), y.cols());
  return y;
}

template <typename T>
double kl_divergence(std::span<const T> p, std::span<const T> q) {
  if (p.size() != q.size() || p.empty())
    throw Error(ErrorKind::dimension, "kl_divergence: sizes " + std::to_string(p.size()) + " and " +
                                          std::to_string(q.size()));
  require_distribution(p, "p");
  require_distribution(q, "q");
  return kl_row(p.data(), q.data(), p.size());
}

template <typename T>
T DistillationLoss<T>::forward(const BasicTensor<T>& teacher_logits, const BasicTensor<T>& student_logits,
                               double temperature, std::span<const std::int32_t> select) {
  require_same_shape(teacher_logits.shape(), student_logits.shape(), "distillation_loss");
  const std::size_t rows = student_logits.rows(), c = student_logits.cols();
  if (!select.empty() && select.size() != rows)
    throw Error(ErrorKind::dimension, "distillation_loss: " + std::to_string(select.size()) +
                                          " selection flags for " + std::to_string(rows) + " rows");
  pt_ = soften(teacher_logits, temperature);
  ps_ = soften(student_logits, temperature);
  temperature_ = temperature;
  select_.assign(select.begin(), select.end());
  if (select_.empty()) select_.assign(rows, 1);
  counted_ = 0;
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!select_[r]) continue;
    ++counted_;
    total += kl_row(pt_->ptr() + r * c, ps_->ptr() + r * c, c);
  }
  if (counted_ == 0) throw Error(ErrorKind::empty_batch, "distillation_loss: no selected positions");
  return static_cast<T>(total / static_cast<double>(counted_));
}

template <typename T>
BasicTensor<T> DistillationLoss<T>::backward(T upstream) const {
  if (!ps_) throw Error(ErrorKind::state, "distillation_loss: backward called before forward");
  BasicTensor<T> dz(ps_->shape());
  const std::size_t c = dz.cols();
  const T w = upstream / static_cast<T>(temperature_ * static_cast<double>(counted_));
  for (std::size_t r = 0; r < dz.rows(); ++r) {
    if (!select_[r]) continue;
    const T* ps = ps_->ptr() + r * c;
    const T* pt = pt_->ptr() + r * c;
    T* out = dz.ptr() + r * c;
    for (std::size_t j = 0; j < c; ++j) out[j] = w * (ps[j] - pt[j]);
  }
  return dz;
}

double combined_loss(double distill, double ce, double alpha, double temperature) {
  if (!(alpha >= 0 && alpha <= 1)) throw Error(ErrorKind::config, "alpha must be in [0, 1], got " + std::to_string(alpha));
  require_temperature(temperature);
  return alpha * temperature * temperature * distill + (1 - alpha) * ce;
}

void DistillConfig::validate() const {
  const auto fail = [](const std::string& m) { throw Error(ErrorKind::config, "distill: " + m); };
  require_temperature(temperature);
  if (!(alpha >= 0 && alpha <= 1)) fail("alpha must be in [0, 1]");
  if (batch_size == 0) fail("batch size must be >= 1");
  if (!(learning_rate > 0)) fail("learning rate must be > 0");
  if (!(weight_decay >= 0)) fail("weight decay must be >= 0");
  if (!(warmup_fraction >= 0 && warmup_fraction < 1)) fail("warmup fraction must be in [0, 1)");
  if (max_len < 3) fail("max_len must be >= 3");
  if (!(mask_rate > 0 && mask_rate <= 1)) fail("mask rate must be in (0, 1]");
  if (!(validation_fraction > 0 && validation_fraction < 1)) fail("validation fraction must be in (0, 1)");
}

std::vector<MlmRow> prepare_mlm_rows(std::span<const std::string> lines, const Vocabulary& vocab,
                                     std::size_t max_len, double mask_rate, Rng& rng) {
  std::vector<MlmRow> rows;
  for (const auto& line : lines) {
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    auto row = mask_for_mlm(encode(line, std::nullopt, vocab, max_len), rng, vocab.size(), mask_rate);
    if (row) rows.push_back(std::move(*row));
  }
  return rows;
}

namespace {

std::vector<std::int32_t> argmax_rows(const Tensor& logits) {
  std::vector<std::int32_t> out(logits.rows());
  const std::size_t c = logits.cols();
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const float* z = logits.ptr() + r * c;
    out[r] = static_cast<std::int32_t>(std::max_element(z, z + c) - z);
  }
  return out;
}

}  // namespace

MlmEvaluation evaluate_mlm(const ModelConfig& config, const EncoderParams<float>& params,
                           std::span<const MlmRow> rows, std::size_t batch_size) {
  if (rows.empty()) throw Error(ErrorKind::empty_batch, "MLM evaluation set is empty");
  Encoder<float> enc(config);
  double loss_sum = 0;
  std::vector<std::int32_t> truth, pred;
  for (std::size_t start = 0; start < rows.size(); start += batch_size) {
    const auto batch = MlmBatch::from_rows(rows.subspan(start, std::min(batch_size, rows.size() - start)));
    const auto logits = enc.forward_mlm_at(batch.tokens, batch.positions, params, nullptr, false);
    CrossEntropy<float> ce;
    loss_sum += static_cast<double>(ce.forward(logits, batch.targets)) * static_cast<double>(batch.targets.size());
    const auto p = argmax_rows(logits);
    truth.insert(truth.end(), batch.targets.begin(), batch.targets.end());
    pred.insert(pred.end(), p.begin(), p.end());
  }
  MlmEvaluation ev;
  ev.masked = truth.size();
  ev.loss = loss_sum / static_cast<double>(truth.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += truth[i] == pred[i];
  ev.accuracy = static_cast<double>(hits) / static_cast<double>(truth.size());
  ev.macro = sparse_macro_scores(truth, pred);
  return ev;
}

namespace {

enum Stream : std::uint64_t { kShuffle = 11, kMask = 12, kDropout = 13, kValMask = 14 };

}  // namespace

DistillReport run_distillation(const std::optional<Teacher>& teacher, const ModelConfig& student_config,
                               EncoderParams<float>& student, const Vocabulary& vocab,
                               std::span<const std::string> train_lines,
                               std::span<const std::string> validation_lines, const DistillConfig& cfg,
                               const DistillHooks& hooks) {
  cfg.validate();
  student_config.validate();
  check_param_shapes(student, student_config, HeadSet{true, std::nullopt});
  if (vocab.size() != student_config.vocab_size)
    throw Error(ErrorKind::compatibility, "vocabulary has " + std::to_string(vocab.size()) +
                                              " pieces but the student expects " +
                                              std::to_string(student_config.vocab_size));
  if (teacher) {
    teacher->config.validate();
    if (teacher->config.vocab_size != student_config.vocab_size)
      throw Error(ErrorKind::compatibility, "teacher vocab_size " + std::to_string(teacher->config.vocab_size) +
                                                " differs from student vocab_size " +
                                                std::to_string(student_config.vocab_size));
    check_param_shapes(teacher->params, teacher->config, HeadSet{true, std::nullopt});
  }
  for (const auto* c : {&student_config, teacher ? &teacher->config : nullptr})
    if (c && cfg.max_len > c->max_position_embeddings)
      throw Error(ErrorKind::config, "max_len " + std::to_string(cfg.max_len) + " exceeds max_position_embeddings " +
                                         std::to_string(c->max_position_embeddings));

  std::vector<std::string> train(train_lines.begin(), train_lines.end());
  std::vector<std::string> val(validation_lines.begin(), validation_lines.end());
  if (val.empty()) {
    const auto held = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(cfg.validation_fraction * static_cast<double>(train.size()))));
    if (held >= train.size())
      throw Error(ErrorKind::input, "corpus of " + std::to_string(train.size()) + " lines is too small to hold out validation");
    val.assign(train.end() - static_cast<std::ptrdiff_t>(held), train.end());
    train.resize(train.size() - held);
  }

  const Rng root(cfg.seed);
  Rng shuffle_rng = root.split(kShuffle), mask_rng = root.split(kMask), drop_rng = root.split(kDropout);
  Rng val_rng = root.split(kValMask);
  const auto val_rows = prepare_mlm_rows(val, vocab, cfg.max_len, cfg.mask_rate, val_rng);
  if (val_rows.empty()) throw Error(ErrorKind::input, "validation lines contain no maskable tokens");
  if (train.empty()) throw Error(ErrorKind::empty_batch, "training corpus is empty");

  const std::size_t steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const auto schedule = ScheduleConfig::from_fraction(steps_per_epoch * cfg.epochs, cfg.warmup_fraction);
  AdamWConfig opt;
  opt.lr = cfg.learning_rate;
  opt.weight_decay = cfg.weight_decay;
  opt.validate();

  const bool use_teacher = teacher.has_value() && cfg.alpha > 0;
  const double alpha = teacher ? cfg.alpha : 0.0;
  Encoder<float> student_enc(student_config);
  std::optional<Encoder<float>> teacher_enc;
  if (use_teacher) teacher_enc.emplace(teacher->config);

  DistillReport report;
  report.optimizer = AdamWState<float>::for_params(student);
  auto grads = student.zeros_like();
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  double lr = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    shuffle_in_place(order, shuffle_rng);
    double loss_sum = 0;
    std::size_t batches = 0, hits = 0, masked = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<MlmRow> rows;
      for (std::size_t i = start; i < std::min(start + cfg.batch_size, order.size()); ++i) {
        const auto& line = train[order[i]];
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        auto row = mask_for_mlm(encode(line, std::nullopt, vocab, cfg.max_len), mask_rng, vocab.size(), cfg.mask_rate);
        if (row) rows.push_back(std::move(*row));
      }
      const std::uint64_t step = report.optimizer.step;
      lr = lr_at_step(step, cfg.learning_rate, schedule);
      if (rows.empty()) continue;
      const auto batch = MlmBatch::from_rows(rows);

      Tensor logits({1});
      double ce = 0, kd = 0, loss = 0;
      try {
        logits = student_enc.forward_mlm_at(batch.tokens, batch.positions, student, &drop_rng, true);
        CrossEntropy<float> ce_op;
        ce = ce_op.forward(logits, batch.targets);
        auto dlogits = ce_op.backward(static_cast<float>(1 - alpha));
        if (use_teacher) {
          const auto tlogits = teacher_enc->forward_mlm_at(batch.tokens, batch.positions, teacher->params, nullptr, false);
          DistillationLoss<float> kd_op;
          kd = kd_op.forward(tlogits, logits, cfg.temperature);
          const auto dkd = kd_op.backward(static_cast<float>(alpha * cfg.temperature * cfg.temperature));
          auto d = dlogits.data();
          const auto k = dkd.data();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += k[i];
        }
        loss = combined_loss(kd, ce, alpha, cfg.temperature);
        if (!std::isfinite(loss))
          throw Error(ErrorKind::divergence, "non-finite loss at step " + std::to_string(step));

        grads.set_zero();
        student_enc.backward(dlogits, grads);
        adamw_step(student, grads, report.optimizer, opt, lr);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::numeric) throw;
        throw Error(ErrorKind::divergence, "step " + std::to_string(step) + ": " + e.what());
      }
      report.steps.push_back({step, loss, kd, ce, lr});

      const auto pred = argmax_rows(logits);
      for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == batch.targets[i];
      masked += pred.size();
      loss_sum += loss;
      ++batches;
    }
    if (batches == 0) throw Error(ErrorKind::empty_batch, "epoch " + std::to_string(epoch) + " had no maskable batch");

    MlmEvaluation ev;
    try {
      ev = evaluate_mlm(student_config, student, val_rows, cfg.batch_size);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::numeric) throw;
      ev.loss = std::numeric_limits<double>::quiet_NaN();
    }
    if (!std::isfinite(ev.loss))
      throw Error(ErrorKind::divergence, "non-finite validation loss after epoch " + std::to_string(epoch) +
                                             " (step " + std::to_string(report.optimizer.step) + ")");
    EpochRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(batches);
    row.val_loss = ev.loss;
    row.train_acc = static_cast<double>(hits) / static_cast<double>(masked);
    row.val_acc = ev.accuracy;
    row.precision = ev.macro.precision;
    row.recall = ev.macro.recall;
    row.f1 = ev.macro.f1;
    row.lr = lr;
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.log.add(row);
    report.final_val_loss = ev.loss;
    if (hooks.on_epoch) hooks.on_epoch(row);
  }
  return report;
}

template BasicTensor<float> soften(const BasicTensor<float>&, double);
template BasicTensor<double> soften(const BasicTensor<double>&, double);
template double kl_divergence<float>(std::span<const float>, std::span<const float>);
template double kl_divergence<double>(std::span<const double>, std::span<const double>);
template class DistillationLoss<float>;
template class DistillationLoss<double>;

}  // namespace kdforge
