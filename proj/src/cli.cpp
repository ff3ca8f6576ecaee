// SPDX-License-Identifier: Apache-2.0
#include "kdforge/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "kdforge/checkpoint.hpp"
#include "kdforge/data.hpp"
#include "kdforge/distill.hpp"
#include "kdforge/error.hpp"
#include "kdforge/metrics.hpp"
#include "kdforge/model.hpp"
#include "kdforge/tokenizer.hpp"
#include "kdforge/trainer.hpp"

namespace kdforge::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.15g", v);
  std::string s = buf;
  const auto e = s.find('e');
  if (e != std::string::npos) {
    std::string mant = s.substr(0, e), exp = s.substr(e + 1);
    const bool neg = exp[0] == '-';
    if (exp[0] == '+' || exp[0] == '-') exp.erase(0, 1);
    exp.erase(0, std::min(exp.find_first_not_of('0'), exp.size() - 1));
    return mant + "e" + (neg ? "-" : "") + exp;
  }
  if (s.find('.') == std::string::npos && s.find("inf") == std::string::npos && s.find("nan") == std::string::npos)
    s += ".0";
  return s;
}

namespace {

/// Reads a flat JSON object; keys are long flag names for the active command.
class JsonConfig : public CLI::Config {
 public:
  explicit JsonConfig(std::string command) : command_(std::move(command)) {}

  std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}"; }

  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw CLI::ConversionError("config file is not valid JSON: " + std::string(e.what()));
    }
    if (!j.is_object()) throw CLI::ConversionError("config file must hold a JSON object");
    std::vector<CLI::ConfigItem> items;
    for (const auto& [key, value] : j.items()) {
      CLI::ConfigItem item;
      if (!command_.empty()) item.parents = {command_};
      item.name = key;
      std::replace(item.name.begin(), item.name.end(), '_', '-');
      const auto render = [](const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
      if (value.is_array())
        for (const auto& v : value) item.inputs.push_back(render(v));
      else
        item.inputs.push_back(render(value));
      items.push_back(std::move(item));
    }
    return items;
  }

 private:
  std::string command_;
};

struct Arch {
  std::size_t hidden = 64;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t intermediate = 256;
  std::size_t max_positions = 128;
  double dropout = 0.1;

  ModelConfig config(std::size_t vocab) const {
    ModelConfig c;
    c.hidden_size = hidden;
    c.num_hidden_layers = layers;
    c.num_attention_heads = heads;
    c.intermediate_size = intermediate;
    c.max_position_embeddings = max_positions;
    c.vocab_size = vocab;
    c.hidden_dropout = dropout;
    c.attention_dropout = dropout;
    c.validate();
    return c;
  }
};

void add_arch(CLI::App* app, Arch& a) {
  app->add_option("--hidden", a.hidden, "Hidden size")->capture_default_str();
  app->add_option("--layers", a.layers, "Encoder layers")->capture_default_str();
  app->add_option("--heads", a.heads, "Attention heads")->capture_default_str();
  app->add_option("--intermediate", a.intermediate, "Feed-forward size")->capture_default_str();
  app->add_option("--max-positions", a.max_positions, "Position embeddings")->capture_default_str();
  app->add_option("--dropout", a.dropout, "Hidden and attention dropout")->capture_default_str();
}

struct Common {
  std::uint64_t seed = 42;
  std::string out_dir = ".";
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  app->add_option("--out-dir", c.out_dir, "Output directory")->capture_default_str();
}

fs::path out_path(const Common& c, const std::string& explicit_path, const std::string& name) {
  fs::create_directories(c.out_dir);
  return explicit_path.empty() ? fs::path(c.out_dir) / name : fs::path(explicit_path);
}

std::vector<std::string> nonempty_lines(const std::string& path) {
  std::vector<std::string> out;
  for (auto& l : read_lines(path))
    if (l.find_first_not_of(" \t") != std::string::npos) out.push_back(std::move(l));
  return out;
}

void print_epoch_header(std::ostream& out) {
  out << std::left << std::setw(6) << "epoch" << std::setw(12) << "train_loss" << std::setw(12) << "val_loss"
      << std::setw(10) << "train_acc" << std::setw(10) << "val_acc" << std::setw(10) << "f1" << std::setw(12)
      << "lr" << "time_s\n";
}

void print_epoch(std::ostream& out, const EpochRow& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-6zu%-12.5f%-12.5f%-10.4f%-10.4f%-10.4f%-12.3e%.2f\n", r.epoch, r.train_loss,
                r.val_loss, r.train_acc, r.val_acc, r.f1, r.lr, r.wall_seconds);
  out << buf << std::flush;
}

void write_steps(const fs::path& path, const std::vector<StepRecord>& steps) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  out << "step,combined,distill,ce,lr\n";
  char buf[160];
  for (const auto& s : steps) {
    std::snprintf(buf, sizeof buf, "%llu,%.17g,%.17g,%.17g,%.17g\n", static_cast<unsigned long long>(s.step),
                  s.combined, s.distill, s.ce, s.lr);
    out << buf;
  }
}

std::string counts_str(const std::map<int, std::size_t>& counts) {
  std::string s;
  for (const auto& [c, n] : counts) {
    if (!s.empty()) s += ", ";
    s += (c == 0 ? "mild " : c == 1 ? "severe " : "class " + std::to_string(c) + " ") + std::to_string(n);
  }
  return s;
}

json counts_json(const std::map<int, std::size_t>& counts) {
  json j = json::object();
  for (const auto& [c, n] : counts) j[std::to_string(c)] = n;
  return j;
}

Vocabulary vocab_of(const Checkpoint& c) {
  if (c.vocab.empty()) throw Error(ErrorKind::input, "checkpoint carries no vocabulary");
  return Vocabulary(c.vocab);
}

// ---------------------------------------------------------------- preprocess

struct PreprocessArgs {
  Common common;
  std::string input;
  double test_fraction = 0.2;
  bool no_balance = false;
  std::int64_t cap_max = 5;
  std::int64_t mild_threshold = 2;
  std::string subreddit = "ADHD";
};

int cmd_preprocess(const PreprocessArgs& a, std::ostream& out) {
  if (!(a.test_fraction > 0 && a.test_fraction < 1)) throw Error(ErrorKind::config, "--test-fraction must be in (0, 1)");
  AdhdOptions opt{a.cap_max, a.mild_threshold, a.subreddit};
  const auto lines = read_lines(a.input);
  auto pre = preprocess_adhd(std::span<const std::string>(lines), opt);
  if (pre.examples.empty()) throw Error(ErrorKind::input, "no records survived filtering");
  const Rng root(a.common.seed);
  Rng balance_rng = root.split(1), split_rng = root.split(2);
  const auto kept_counts = class_counts(pre.examples);
  std::vector<LabeledExample> balanced =
      a.no_balance ? pre.examples : balance_upsample(pre.examples, balance_rng);
  const auto balanced_counts = class_counts(balanced);
  const auto split = stratified_split(balanced, a.test_fraction, split_rng);

  fs::create_directories(a.common.out_dir);
  const fs::path dir(a.common.out_dir);
  write_examples(dir / "train.jsonl", split.train);
  write_examples(dir / "test.jsonl", split.test);
  const auto& s = pre.stats;
  json summary{{"raw_records", s.records},
               {"malformed", s.malformed},
               {"other_subreddit", s.other_subreddit},
               {"removed", s.removed},
               {"kept", s.kept},
               {"kept_by_class", counts_json(kept_counts)},
               {"balanced", balanced.size()},
               {"balanced_by_class", counts_json(balanced_counts)},
               {"train", split.train.size()},
               {"train_by_class", counts_json(split.train_counts)},
               {"test", split.test.size()},
               {"test_by_class", counts_json(split.test_counts)},
               {"seed", a.common.seed},
               {"balanced_applied", !a.no_balance}};
  std::ofstream(dir / "summary.json", std::ios::binary) << summary.dump(2) << '\n';

  out << "raw records: " << s.records << " (malformed " << s.malformed << ", other subreddit " << s.other_subreddit
      << ", removed " << s.removed << ")\n";
  out << "kept:        " << s.kept << " (" << counts_str(kept_counts) << ")\n";
  out << "balanced:    " << balanced.size() << " (" << counts_str(balanced_counts) << ")"
      << (a.no_balance ? " [balancing skipped]" : "") << "\n";
  out << "train:       " << split.train.size() << " (" << counts_str(split.train_counts) << ")\n";
  out << "test:        " << split.test.size() << " (" << counts_str(split.test_counts) << ")\n";
  return 0;
}

// ---------------------------------------------------------------- MLM training

struct MlmArgs {
  Common common;
  Arch arch;
  std::string corpus;
  std::string validation;
  std::string vocab;
  std::size_t vocab_size = 2000;
  std::string teacher;
  std::string out;
  std::string log;
  DistillConfig dc;
};

int cmd_mlm(const MlmArgs& a, bool distill, std::ostream& out) {
  DistillConfig dc = a.dc;
  dc.seed = a.common.seed;
  dc.validate();
  const auto corpus = nonempty_lines(a.corpus);
  const auto val = a.validation.empty() ? std::vector<std::string>{} : nonempty_lines(a.validation);

  std::optional<Checkpoint> teacher_ckpt;
  Vocabulary vocab;
  if (distill) {
    teacher_ckpt = load_checkpoint(a.teacher);
    vocab = vocab_of(*teacher_ckpt);
    if (!a.vocab.empty() && !(Vocabulary::load(a.vocab) == vocab))
      throw Error(ErrorKind::compatibility, "--vocab differs from the teacher's vocabulary");
    if (!teacher_ckpt->heads.mlm) throw Error(ErrorKind::compatibility, "teacher checkpoint has no MLM head");
    teacher_ckpt->params.erase_prefix("classifier.");
  } else {
    vocab = a.vocab.empty() ? build_vocab(corpus, a.vocab_size) : Vocabulary::load(a.vocab);
  }
  const ModelConfig cfg = a.arch.config(vocab.size());
  Rng init_rng = Rng(a.common.seed).split(3);
  auto params = init_params<float>(cfg, init_rng);

  const char* name = distill ? "distill" : "pretrain-teacher";
  out << name << ": T=" << format_number(dc.temperature) << " alpha=" << format_number(distill ? dc.alpha : 0.0)
      << " lr=" << format_number(dc.learning_rate) << " epochs=" << dc.epochs << " batch=" << dc.batch_size
      << " max_len=" << dc.max_len << " seed=" << dc.seed << "\n";
  out << "model: hidden=" << cfg.hidden_size << " layers=" << cfg.num_hidden_layers
      << " heads=" << cfg.num_attention_heads << " vocab=" << cfg.vocab_size
      << " params=" << count_parameters(params) << "\n";
  if (teacher_ckpt)
    out << "teacher: hidden=" << teacher_ckpt->config.hidden_size << " layers=" << teacher_ckpt->config.num_hidden_layers
        << " params=" << count_parameters(teacher_ckpt->params) << "\n";
  print_epoch_header(out);

  std::optional<Teacher> teacher;
  if (teacher_ckpt) teacher.emplace(Teacher{teacher_ckpt->config, teacher_ckpt->params});
  DistillHooks hooks{[&](const EpochRow& r) { print_epoch(out, r); }};
  auto report = run_distillation(teacher, cfg, params, vocab, corpus, val, dc, hooks);

  Checkpoint ck;
  ck.config = cfg;
  ck.heads = HeadSet{true, std::nullopt};
  ck.vocab = vocab.pieces();
  ck.params = std::move(params);
  ck.optimizer = std::move(report.optimizer);
  ck.rng_states["root"] = Rng(a.common.seed).state();
  ck.epoch = dc.epochs;
  if (!report.log.rows().empty()) ck.best_metric = report.final_val_loss;
  ck.meta = json{{"command", name},  {"max_len", dc.max_len},     {"temperature", dc.temperature},
                 {"alpha", distill ? dc.alpha : 0.0}, {"learning_rate", dc.learning_rate}, {"seed", dc.seed}};
  const auto ckpt_path = out_path(a.common, a.out, distill ? "student.ckpt" : "teacher.ckpt");
  save_checkpoint(ckpt_path, ck);
  const auto log_path = out_path(a.common, a.log, "epochs.csv");
  report.log.write_csv(log_path);
  write_steps(fs::path(a.common.out_dir) / "steps.csv", report.steps);
  out << "saved " << ckpt_path.string() << " and " << log_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- finetune

struct FinetuneArgs {
  Common common;
  std::string model;
  std::string train;
  std::string validation;
  std::size_t num_labels = 0;
  bool regression = false;
  std::string lexicon;
  std::string out;
  std::string log;
  double validation_fraction = 0.1;
  FinetuneConfig fc;
};

TaskHeadSpec resolve_head(const FinetuneArgs& a, const Checkpoint& ck, std::span<const LabeledExample> train,
                          std::span<const LabeledExample> val) {
  if (a.regression) return TaskHeadSpec::regression();
  if (a.num_labels) return TaskHeadSpec::classification(a.num_labels);
  if (ck.heads.task && ck.heads.task->kind == HeadKind::classification) return *ck.heads.task;
  double top = 1;
  for (auto span : {train, val})
    for (const auto& e : span) top = std::max(top, e.label);
  return TaskHeadSpec::classification(static_cast<std::size_t>(top) + 1);
}

struct FinetuneOutcome {
  Checkpoint ckpt;
  FinetuneResult result;
  std::vector<LabeledExample> validation;
};

FinetuneOutcome finetune_core(const FinetuneArgs& a, const std::string& command, std::ostream& out) {
  FinetuneConfig fc = a.fc;
  fc.seed = a.common.seed;
  fc.validate();
  Checkpoint ck = load_checkpoint(a.model);
  const Vocabulary vocab = vocab_of(ck);
  auto train = read_examples(a.train);
  if (train.empty()) throw Error(ErrorKind::empty_batch, "training file " + a.train + " has no records");
  std::vector<LabeledExample> val;
  if (!a.validation.empty()) {
    val = read_examples(a.validation);
  } else {
    Rng split_rng = Rng(a.common.seed).split(4);
    if (a.regression) {
      const auto held = std::max<std::size_t>(1, static_cast<std::size_t>(a.validation_fraction * train.size()));
      if (held >= train.size()) throw Error(ErrorKind::input, "training file too small to hold out validation");
      val.assign(train.end() - static_cast<std::ptrdiff_t>(held), train.end());
      train.resize(train.size() - held);
    } else {
      auto split = stratified_split(train, a.validation_fraction, split_rng);
      train = std::move(split.train);
      val = std::move(split.test);
    }
  }
  const TaskHeadSpec head = resolve_head(a, ck, train, val);
  check_labels(train, head);
  check_labels(val, head);
  if (fc.max_len > ck.config.max_position_embeddings) fc.max_len = ck.config.max_position_embeddings;

  ck.params.erase_prefix("cls.");
  if (!(ck.heads.task && *ck.heads.task == head)) {
    Rng head_rng = Rng(a.common.seed).split(5);
    attach_task_head(ck.params, ck.config, head, head_rng);
  }
  ck.heads = HeadSet{false, head};

  Lexicon lex;
  if (!a.lexicon.empty()) lex = load_lexicon(a.lexicon);

  out << command << ": lr=" << format_number(fc.learning_rate) << " batch=" << fc.batch_size
      << " epochs=" << fc.epochs << " weight_decay=" << format_number(fc.weight_decay) << " patience=" << fc.patience
      << " max_len=" << fc.max_len << " seed=" << fc.seed << "\n";
  out << "head: " << (head.kind == HeadKind::regression ? "regression" : "classification") << " labels=" << head.num_labels
      << " train=" << train.size() << " validation=" << val.size() << "\n";
  print_epoch_header(out);
  FinetuneHooks hooks{[&](const EpochRow& r) { print_epoch(out, r); }};
  auto result = run_finetune(ck.config, ck.params, head, vocab, train, val, fc, lex.empty() ? nullptr : &lex, hooks);
  if (result.stopped_early)
    out << "early stop after " << result.log.rows().size() << " epochs; restored epoch " << result.best_epoch << "\n";

  ck.optimizer.reset();
  ck.epoch = result.best_epoch;
  ck.best_metric = result.best_val_loss;
  ck.rng_states["root"] = Rng(a.common.seed).state();
  ck.meta = json{{"command", command},        {"max_len", fc.max_len},     {"learning_rate", fc.learning_rate},
                 {"batch_size", fc.batch_size}, {"epochs_run", result.log.rows().size()}, {"seed", fc.seed}};
  return {std::move(ck), std::move(result), std::move(val)};
}

int cmd_finetune(const FinetuneArgs& a, std::ostream& out) {
  auto o = finetune_core(a, "finetune", out);
  const auto ckpt_path = out_path(a.common, a.out, "model.ckpt");
  save_checkpoint(ckpt_path, o.ckpt);
  const auto log_path = out_path(a.common, a.log, "epochs.csv");
  o.result.log.write_csv(log_path);
  out << "saved " << ckpt_path.string() << " and " << log_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- evaluate

struct EvaluateArgs {
  Common common;
  std::string model;
  std::string test;
  std::string predictions;
  bool regression = false;
  std::size_t num_labels = 0;
  std::size_t batch_size = 8;
  std::size_t max_len = 0;
  std::string out;
};

void print_report(std::ostream& out, const MetricsReport& r) {
  const auto two = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.2f", round_to(v, 2));
    return std::string(b);
  };
  const auto four = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.4f", v);
    return std::string(b);
  };
  if (r.accuracy) out << "accuracy:  " << four(*r.accuracy) << " (" << two(*r.accuracy) << ")\n";
  if (!r.precision.empty()) {
    out << "weighted:  precision " << two(r.weighted.precision) << "  recall " << two(r.weighted.recall) << "  f1 "
        << two(r.weighted.f1) << "\n";
    out << "macro:     precision " << two(r.macro.precision) << "  recall " << two(r.macro.recall) << "  f1 "
        << two(r.macro.f1) << "\n";
  }
  if (r.mcc) out << "mcc:       " << four(*r.mcc) << "\n";
  if (r.auroc) out << "auroc:     " << four(*r.auroc) << " (" << two(*r.auroc) << ")\n";
  if (r.pearson) out << "pearson:   " << four(*r.pearson) << "\n";
  if (r.spearman) out << "spearman:  " << four(*r.spearman) << "\n";
  if (r.zero_division) out << "note: zero-division in " << r.zero_division_notes.size() << " score(s), reported as 0\n";
}

/// Each line is a JSON array of per-class scores, a single number (class id or
/// regression output), or an object with "logits" or "prediction".
TaskPredictions read_predictions(const std::string& path, bool regression, std::size_t num_labels) {
  TaskPredictions p;
  std::size_t line_no = 0;
  for (const auto& line : read_lines(path)) {
    ++line_no;
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_object()) j = j.contains("logits") ? j["logits"] : j.value("prediction", json());
    std::vector<float> row;
    if (j.is_array() && !j.empty() && std::all_of(j.begin(), j.end(), [](const json& v) { return v.is_number(); })) {
      for (const auto& v : j) row.push_back(v.get<float>());
    } else if (j.is_number()) {
      if (regression) {
        row.push_back(j.get<float>());
      } else {
        const auto k = j.get<double>();
        if (k < 0 || k != std::floor(k) || (num_labels && k >= static_cast<double>(num_labels)))
          throw Error(ErrorKind::label, path + ":" + std::to_string(line_no) + ": bad predicted class");
        row.assign(std::max<std::size_t>(num_labels ? num_labels : 2, static_cast<std::size_t>(k) + 1), 0.0f);
        row[static_cast<std::size_t>(k)] = 1.0f;
      }
    } else {
      throw Error(ErrorKind::input, path + ":" + std::to_string(line_no) + ": unreadable prediction");
    }
    p.logits.push_back(std::move(row));
  }
  return p;
}

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  const auto test = read_examples(a.test);
  if (test.empty()) throw Error(ErrorKind::empty_batch, "test file " + a.test + " has no records");
  MetricsReport report;
  if (!a.predictions.empty()) {
    auto preds = read_predictions(a.predictions, a.regression, a.num_labels);
    std::size_t width = 1;
    for (const auto& r : preds.logits) width = std::max(width, r.size());
    for (auto& r : preds.logits) r.resize(width, 0.0f);
    const TaskHeadSpec head =
        a.regression ? TaskHeadSpec::regression() : TaskHeadSpec::classification(a.num_labels ? a.num_labels : std::max<std::size_t>(width, 2));
    for (auto& r : preds.logits) r.resize(head.num_labels, 0.0f);
    check_labels(test, head);
    report = report_from_predictions(preds, test, head);
  } else {
    const Checkpoint ck = load_checkpoint(a.model);
    if (!ck.heads.task) throw Error(ErrorKind::compatibility, "checkpoint " + a.model + " has no task head");
    std::size_t max_len = a.max_len;
    if (max_len == 0) max_len = ck.meta.value("max_len", std::size_t{512});
    max_len = std::min(max_len, ck.config.max_position_embeddings);
    report = evaluate_task(ck.config, ck.params, *ck.heads.task, vocab_of(ck), test, max_len, a.batch_size);
  }
  const auto path = out_path(a.common, a.out, "report.json");
  write_report(path, report);
  print_report(out, report);
  out << "wrote " << path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- glue

struct GlueArgs {
  FinetuneArgs ft;
  std::string task;
  std::string test;
  std::optional<double> lr;
  std::optional<std::size_t> epochs, batch_size, max_len, patience;
  std::optional<std::uint64_t> warmup_steps;
  std::optional<double> augment_rate, weight_decay;
};

int cmd_glue(const GlueArgs& a, std::ostream& out) {
  const GlueTask task = glue_task(a.task);
  FinetuneArgs ft = a.ft;
  ft.fc = task.finetune;
  if (a.lr) ft.fc.learning_rate = *a.lr;
  if (a.epochs) ft.fc.epochs = *a.epochs;
  if (a.batch_size) ft.fc.batch_size = *a.batch_size;
  if (a.max_len) ft.fc.max_len = *a.max_len;
  if (a.patience) ft.fc.patience = *a.patience;
  if (a.warmup_steps) ft.fc.warmup_steps = *a.warmup_steps;
  if (a.augment_rate) ft.fc.augment_rate = *a.augment_rate;
  if (a.weight_decay) ft.fc.weight_decay = *a.weight_decay;
  ft.regression = task.head.kind == HeadKind::regression;
  ft.num_labels = ft.regression ? 0 : task.head.num_labels;

  auto o = finetune_core(ft, "glue " + task.name, out);
  const auto eval_set = a.test.empty() ? o.validation : read_examples(a.test);
  for (const auto& e : eval_set)
    if (task.pair != e.text_b.has_value())
      throw Error(ErrorKind::input, "task " + task.name + (task.pair ? " expects text_a/text_b pairs" : " expects single texts"));
  auto report = evaluate_task(o.ckpt.config, o.ckpt.params, task.head, Vocabulary(o.ckpt.vocab), eval_set,
                              ft.fc.max_len, ft.fc.batch_size);
  if (!task.report_mcc) report.mcc.reset();
  o.ckpt.meta["task"] = task.name;

  fs::create_directories(ft.common.out_dir);
  const fs::path dir(ft.common.out_dir);
  save_checkpoint(dir / (task.name + ".ckpt"), o.ckpt);
  o.result.log.write_csv(dir / "epochs.csv");
  write_report(dir / "report.json", report);
  print_report(out, report);
  out << "wrote " << (dir / "report.json").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  Common common;
  std::string kind;
  std::string out;
  std::size_t lines = 500;
  std::size_t mild = 100, severe = 100, noise = 0;
  SyntheticTaskSpec task;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  Rng rng(a.common.seed, 7);
  if (a.kind == "corpus") {
    const auto path = out_path(a.common, a.out, "corpus.txt");
    write_lines(path, generate_synthetic_corpus(a.lines, rng));
    out << "wrote " << a.lines << " lines to " << path.string() << "\n";
  } else if (a.kind == "posts") {
    const auto path = out_path(a.common, a.out, "posts.jsonl");
    const auto lines = generate_synthetic_posts(a.mild, a.severe, a.noise, rng);
    write_lines(path, lines);
    out << "wrote " << lines.size() << " raw records to " << path.string() << "\n";
  } else if (a.kind == "task") {
    const auto t = generate_synthetic_task(a.task, rng);
    fs::create_directories(a.common.out_dir);
    const fs::path dir(a.common.out_dir);
    write_examples(dir / "train.jsonl", t.train);
    write_examples(dir / "validation.jsonl", t.held_out);
    std::vector<std::string> text;
    for (const auto& e : t.train) {
      text.push_back(e.text);
      if (e.text_b) text.push_back(*e.text_b);
    }
    write_lines(dir / "task_corpus.txt", text);
    out << "wrote " << t.train.size() << " train and " << t.held_out.size() << " validation records to " << dir.string()
        << "\n";
  } else {
    throw Error(ErrorKind::config, "--kind must be corpus, posts or task");
  }
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Knowledge-distillation toolkit for compact BERT-style encoders", "kdforge"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string command;
  if (args.size() > 1 && !args[1].starts_with("-")) command = args[1];
  app.set_config("--config", "", "JSON run configuration; command-line flags take precedence");
  app.config_formatter(std::make_shared<JsonConfig>(command));

  PreprocessArgs pa;
  auto* pre = app.add_subcommand("preprocess", "Filter, label, balance and split raw posts");
  add_common(pre, pa.common);
  pre->add_option("--input", pa.input, "Raw JSON-lines posts")->required()->check(CLI::ExistingFile);
  pre->add_option("--test-fraction", pa.test_fraction)->capture_default_str();
  pre->add_flag("--no-balance", pa.no_balance, "Skip minority upsampling");
  pre->add_option("--cap-max", pa.cap_max)->capture_default_str();
  pre->add_option("--mild-threshold", pa.mild_threshold)->capture_default_str();
  pre->add_option("--subreddit", pa.subreddit)->capture_default_str();

  const auto add_mlm = [](CLI::App* s, MlmArgs& m) {
    add_common(s, m.common);
    add_arch(s, m.arch);
    s->add_option("--corpus", m.corpus, "Training text, one sequence per line")->required()->check(CLI::ExistingFile);
    s->add_option("--validation", m.validation, "Validation text (default: 5% tail of corpus)")->check(CLI::ExistingFile);
    s->add_option("--vocab", m.vocab, "Vocabulary file")->check(CLI::ExistingFile);
    s->add_option("--epochs", m.dc.epochs)->capture_default_str();
    s->add_option("--batch-size", m.dc.batch_size)->capture_default_str();
    s->add_option("--lr", m.dc.learning_rate)->capture_default_str();
    s->add_option("--weight-decay", m.dc.weight_decay)->capture_default_str();
    s->add_option("--warmup-fraction", m.dc.warmup_fraction)->capture_default_str();
    s->add_option("--max-len", m.dc.max_len)->capture_default_str();
    s->add_option("--mask-rate", m.dc.mask_rate)->capture_default_str();
    s->add_option("--out", m.out, "Checkpoint path");
    s->add_option("--log", m.log, "Epoch CSV path");
  };
  MlmArgs ta;
  auto* pt = app.add_subcommand("pretrain-teacher", "Train a masked-language-model teacher from scratch");
  add_mlm(pt, ta);
  pt->add_option("--vocab-size", ta.vocab_size, "Vocabulary size when building from the corpus")->capture_default_str();

  MlmArgs da;
  da.arch = Arch{384, 6, 6, 3072, 512, 0.1};
  auto* di = app.add_subcommand("distill", "Distill a teacher checkpoint into a smaller student");
  add_mlm(di, da);
  di->add_option("--teacher", da.teacher, "Teacher checkpoint")->required()->check(CLI::ExistingFile);
  di->add_option("--temperature", da.dc.temperature)->capture_default_str();
  di->add_option("--alpha", da.dc.alpha)->capture_default_str();

  FinetuneArgs fa;
  const auto add_ft = [](CLI::App* s, FinetuneArgs& f, bool hyper) {
    add_common(s, f.common);
    s->add_option("--model", f.model, "Model checkpoint")->required()->check(CLI::ExistingFile);
    s->add_option("--train", f.train, "Training JSON lines")->required()->check(CLI::ExistingFile);
    s->add_option("--validation", f.validation, "Validation JSON lines")->check(CLI::ExistingFile);
    s->add_option("--validation-fraction", f.validation_fraction)->capture_default_str();
    s->add_option("--lexicon", f.lexicon, "Synonym lexicon (word TAB syn,syn)")->check(CLI::ExistingFile);
    s->add_option("--out", f.out, "Checkpoint path");
    s->add_option("--log", f.log, "Epoch CSV path");
    if (!hyper) return;
    s->add_option("--num-labels", f.num_labels, "Classes (default: from data)");
    s->add_flag("--regression", f.regression, "Single-output regression head");
    s->add_option("--lr", f.fc.learning_rate)->capture_default_str();
    s->add_option("--batch-size", f.fc.batch_size)->capture_default_str();
    s->add_option("--epochs", f.fc.epochs)->capture_default_str();
    s->add_option("--weight-decay", f.fc.weight_decay)->capture_default_str();
    s->add_option("--patience", f.fc.patience)->capture_default_str();
    s->add_option("--max-len", f.fc.max_len)->capture_default_str();
    s->add_option("--warmup-steps", f.fc.warmup_steps)->capture_default_str();
    s->add_option("--warmup-fraction", f.fc.warmup_fraction)->capture_default_str();
    s->add_option("--augment-rate", f.fc.augment_rate)->capture_default_str();
  };
  auto* ft = app.add_subcommand("finetune", "Fine-tune a checkpoint on a labelled task");
  add_ft(ft, fa, true);

  EvaluateArgs ea;
  auto* ev = app.add_subcommand("evaluate", "Score a task checkpoint (or stored predictions) on a test set");
  add_common(ev, ea.common);
  ev->add_option("--model", ea.model, "Task checkpoint")->check(CLI::ExistingFile);
  ev->add_option("--predictions", ea.predictions, "Stored predictions instead of a model")->check(CLI::ExistingFile);
  ev->add_option("--test", ea.test, "Test JSON lines")->required()->check(CLI::ExistingFile);
  ev->add_flag("--regression", ea.regression, "Predictions are regression outputs");
  ev->add_option("--num-labels", ea.num_labels, "Classes for stored predictions");
  ev->add_option("--batch-size", ea.batch_size)->capture_default_str();
  ev->add_option("--max-len", ea.max_len, "Sequence length (default: from checkpoint)");
  ev->add_option("--out", ea.out, "Report JSON path");

  GlueArgs ga;
  auto* gl = app.add_subcommand("glue", "Fine-tune and evaluate one GLUE-format task");
  add_ft(gl, ga.ft, false);
  gl->add_option("--task", ga.task, "mrpc, sst2, cola, qqp, mnli or stsb")->required();
  gl->add_option("--test", ga.test, "Evaluation file (default: validation)")->check(CLI::ExistingFile);
  gl->add_option("--lr", ga.lr);
  gl->add_option("--epochs", ga.epochs);
  gl->add_option("--batch-size", ga.batch_size);
  gl->add_option("--max-len", ga.max_len);
  gl->add_option("--patience", ga.patience);
  gl->add_option("--warmup-steps", ga.warmup_steps);
  gl->add_option("--augment-rate", ga.augment_rate);
  gl->add_option("--weight-decay", ga.weight_decay);

  SynthArgs sa;
  auto* sy = app.add_subcommand("synth", "Write synthetic corpora, raw posts or labelled tasks");
  add_common(sy, sa.common);
  sy->add_option("--kind", sa.kind, "corpus, posts or task")->required();
  sy->add_option("--out", sa.out, "Output file (corpus, posts)");
  sy->add_option("--lines", sa.lines)->capture_default_str();
  sy->add_option("--mild", sa.mild)->capture_default_str();
  sy->add_option("--severe", sa.severe)->capture_default_str();
  sy->add_option("--noise", sa.noise)->capture_default_str();
  sy->add_option("--classes", sa.task.classes)->capture_default_str();
  sy->add_option("--words", sa.task.vocab_size, "Distinct task words")->capture_default_str();
  sy->add_option("--per-class", sa.task.examples_per_class)->capture_default_str();
  sy->add_option("--held-out", sa.task.held_out_per_class)->capture_default_str();
  sy->add_option("--signal", sa.task.signal_strength)->capture_default_str();
  sy->add_option("--length", sa.task.words_per_example)->capture_default_str();
  sy->add_flag("--pair", sa.task.pair);

  std::vector<std::string> rev(args.rbegin(), args.rend() - 1);
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (pre->parsed()) return cmd_preprocess(pa, out);
    if (pt->parsed()) return cmd_mlm(ta, false, out);
    if (di->parsed()) return cmd_mlm(da, true, out);
    if (ft->parsed()) return cmd_finetune(fa, out);
    if (ev->parsed()) {
      if (ea.model.empty() == ea.predictions.empty())
        throw Error(ErrorKind::config, "evaluate needs exactly one of --model or --predictions");
      return cmd_evaluate(ea, out);
    }
    if (gl->parsed()) return cmd_glue(ga, out);
    if (sy->parsed()) return cmd_synth(sa, out);
  } catch (const Error& e) {
    err << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "io error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace kdforge::cli
