// SPDX-License-Identifier: Apache-2.0
// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "kdforge/checkpoint.hpp"
#include "kdforge/data.hpp"
#include "kdforge/distill.hpp"
#include "kdforge/metrics.hpp"
#include "kdforge/optim.hpp"
#include "kdforge/trainer.hpp"
#include "oracles.hpp"
#include "reference_adam.hpp"
#include "support.hpp"

using namespace kdforge;
using namespace kdforge::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += "failed: " + what;
    }
  }
  void note(const std::string& s) {
    if (pass) detail += (detail.empty() ? "" : "; ") + s;
  }
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::vector<double> csv_column(const fs::path& path, const std::string& column) {
  std::istringstream in(slurp(path));
  std::string line, cell;
  std::getline(in, line);
  std::istringstream h(line);
  std::size_t idx = 0;
  while (std::getline(h, cell, ',') && cell != column) ++idx;
  if (cell != column) return {};
  std::vector<double> out;
  while (std::getline(in, line)) {
    std::istringstream r(line);
    for (std::size_t k = 0; k <= idx; ++k) std::getline(r, cell, ',');
    out.push_back(std::stod(cell));
  }
  return out;
}

// ---------------------------------------------------------------- 1

Outcome parameter_count() {
  Outcome o;
  const ModelConfig c;
  Rng rng(1);
  const auto p = init_params<float>(c, rng, HeadSet{true, std::nullopt});
  const auto n = count_parameters(p);
  o.require(n == 29'831'610, "count " + std::to_string(n));
  // Closed form: embeddings with layer norm, six blocks, MLM transform and decoder bias.
  const std::size_t h = c.hidden_size, i = c.intermediate_size;
  const std::size_t emb = (c.vocab_size + c.max_position_embeddings + c.type_vocab_size) * h + 2 * h;
  const std::size_t block = 4 * (h * h + h) + 2 * h + (h * i + i) + (i * h + h) + 2 * h;
  const std::size_t head = h * h + h + 2 * h + c.vocab_size;
  o.require(emb + c.num_hidden_layers * block + head == n, "closed form");
  o.note(std::to_string(n) + " parameters");
  return o;
}

// ---------------------------------------------------------------- 2

Outcome metric_reproduction() {
  Outcome o;
  const std::int64_t m[2][2] = {{2590, 356}, {531, 2414}};
  const auto exact = exact_binary_scores(m);
  const auto r = summarize(ConfusionMatrix::from_counts({{2590, 356}, {531, 2414}}));
  const auto close = [](double got, const Rational& want) {
    return std::abs(got - boost::rational_cast<double>(want)) < 1e-15;
  };
  o.require(exact.accuracy == Rational(5004, 5891), "exact accuracy");
  o.require(close(*r.accuracy, exact.accuracy), "accuracy");
  o.require(close(r.weighted.precision, exact.weighted_precision), "weighted precision");
  o.require(close(r.weighted.recall, exact.weighted_recall), "weighted recall");
  o.require(close(r.weighted.f1, exact.weighted_f1), "weighted f1");
  for (const auto* q : {&exact.accuracy, &exact.weighted_precision, &exact.weighted_recall, &exact.weighted_f1})
    o.require(rounds_to(*q, 85), "rounds to 0.85");
  o.require(round_to(*r.accuracy, 2) == 0.85, "reported rounding");
  o.note("accuracy " + fmt(*r.accuracy, 6) + ", weighted P/R/F1 " + fmt(r.weighted.precision, 4) + "/" +
         fmt(r.weighted.recall, 4) + "/" + fmt(r.weighted.f1, 4));
  return o;
}

// ---------------------------------------------------------------- 3

Outcome pipeline_counts() {
  Outcome o;
  Rng gen(2);
  const auto lines = generate_synthetic_posts(5672, 14726, 3, gen);
  const auto pre = preprocess_adhd(lines);
  Rng rng(42);
  const auto balanced = balance_upsample(pre.examples, rng);
  const auto split = stratified_split(balanced, 0.2, rng);
  o.require(pre.examples.size() == 20398, "kept " + std::to_string(pre.examples.size()));
  o.require(balanced.size() == 29452, "balanced " + std::to_string(balanced.size()));
  o.require(split.test.size() == 5891, "test " + std::to_string(split.test.size()));
  o.require(split.test_counts.at(0) == 2946 && split.test_counts.at(1) == 2945, "test classes");
  o.require(split.train.size() == 23561, "train " + std::to_string(split.train.size()));
  o.note(std::to_string(pre.examples.size()) + " -> " + std::to_string(balanced.size()) + " -> test " +
         std::to_string(split.test.size()) + " (" + std::to_string(split.test_counts.at(0)) + "/" +
         std::to_string(split.test_counts.at(1)) + ")");
  return o;
}

// ---------------------------------------------------------------- 4

Outcome gradient_integrity() {
  Outcome o;
  double worst_primitive = 0;
  for (const auto& g : check_primitives(100)) {
    o.require(g.seeds >= 100 && g.worst < 1e-4, g.name + " " + fmt(g.worst));
    worst_primitive = std::max(worst_primitive, g.worst);
  }
  double worst_encoder = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed)
    for (bool mlm : {true, false}) {
      std::string where;
      const double e = check_tiny_encoder(seed, mlm, &where);
      o.require(e < 1e-3, "encoder seed " + std::to_string(seed) + " at " + where + " " + fmt(e));
      worst_encoder = std::max(worst_encoder, e);
    }
  o.note("primitives worst " + fmt(worst_primitive, 3) + " over 100 seeds, encoder worst " + fmt(worst_encoder, 3));
  return o;
}

// ---------------------------------------------------------------- 5

Outcome loss_algebra() {
  Outcome o;
  Rng rng(5);
  double soften_gap = 0, kl_min = 0, kl_self = 0, alpha_gap = 0, identical = 0;
  std::size_t argmax_flips = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t rows = 1 + rng.below(4), cols = 2 + rng.below(9);
    const auto z = random_tensor<double>({rows, cols}, rng, 1 + 4 * rng.uniform());
    const auto s1 = soften(z, 1.0), sm = softmax_rows(z);
    for (std::size_t i = 0; i < z.size(); ++i) soften_gap = std::max(soften_gap, std::abs(s1[i] - sm[i]));

    const double T = std::exp(-3 + 6 * rng.uniform());
    const auto st = soften(z, T);
    for (std::size_t r = 0; r < rows; ++r) {
      std::size_t a = 0, b = 0;
      for (std::size_t c = 1; c < cols; ++c) {
        if (z[r * cols + c] > z[r * cols + a]) a = c;
        if (st[r * cols + c] > st[r * cols + b]) b = c;
      }
      if (a != b) ++argmax_flips;
    }

    const auto y = random_tensor<double>({rows, cols}, rng, 3.0);
    const auto p = soften(z, 1.0), q = soften(y, 1.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::span<const double> pr(p.data().data() + r * cols, cols), qr(q.data().data() + r * cols, cols);
      kl_min = std::min(kl_min, kl_divergence(pr, qr));
      kl_self = std::max(kl_self, std::abs(kl_divergence(pr, pr)));
    }

    const double d = 3 * rng.uniform(), ce = 3 * rng.uniform();
    alpha_gap = std::max({alpha_gap, std::abs(combined_loss(d, ce, 0.0, T) - ce),
                          std::abs(combined_loss(d, ce, 1.0, T) - T * T * d)});

    DistillationLoss<double> loss;
    identical = std::max(identical, std::abs(loss.forward(z, z, T)));
  }
  o.require(soften_gap < 1e-12, "soften(.,1) vs softmax " + fmt(soften_gap));
  o.require(kl_min >= 0, "KL negative " + fmt(kl_min));
  o.require(kl_self < 1e-9, "KL(P,P) " + fmt(kl_self));
  o.require(alpha_gap < 1e-12, "alpha limits " + fmt(alpha_gap));
  o.require(argmax_flips == 0, "argmax changed " + std::to_string(argmax_flips) + " times");
  o.require(identical < 1e-7, "identical logits " + fmt(identical));
  o.note("1000 random cases, KL(P,P) max " + fmt(kl_self, 2) + ", identical-logit loss max " + fmt(identical, 2));
  return o;
}

// ---------------------------------------------------------------- 6

EncoderParams<double> toy_params(Rng& rng) {
  EncoderParams<double> p;
  p.add("layer.dense.weight", random_tensor<double>({3, 4}, rng));
  p.add("layer.dense.bias", random_tensor<double>({4}, rng));
  p.add("layer.LayerNorm.weight", random_tensor<double>({4}, rng));
  return p;
}

Outcome optimizer() {
  Outcome o;
  Rng rng(6);
  auto params = toy_params(rng);
  AdamWConfig c;
  c.lr = 3e-3;
  c.weight_decay = 0;
  auto state = AdamWState<double>::for_params(params);
  const auto n = params.entries().size();
  std::vector<ReferenceAdam> ref(n, ReferenceAdam{c.lr, c.beta1, c.beta2, c.eps, {}, {}, 0});
  std::vector<std::vector<double>> w;
  for (const auto& [name, t] : params.entries()) w.emplace_back(t.data().begin(), t.data().end());
  for (int step = 0; step < 100; ++step) {
    auto grads = params.zeros_like();
    for (auto& [name, t] : grads.entries())
      for (auto& x : t.data()) x = rng.normal();
    adamw_step(params, grads, state, c, c.lr);
    for (std::size_t k = 0; k < n; ++k) {
      const auto& g = grads.entries()[k].second.data();
      ref[k].step(w[k], std::vector<double>(g.begin(), g.end()));
    }
  }
  double adam_gap = 0;
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < w[k].size(); ++i)
      adam_gap = std::max(adam_gap, std::abs(params.entries()[k].second[i] - w[k][i]));
  o.require(adam_gap < 1e-12, "reference gap " + fmt(adam_gap));

  auto decayed = toy_params(rng);
  const auto start = decayed;
  c.lr = 1e-2;
  c.weight_decay = 0.1;
  auto st = AdamWState<double>::for_params(decayed);
  const auto zero = decayed.zeros_like();
  for (int t = 0; t < 100; ++t) adamw_step(decayed, zero, st, c, c.lr);
  const double factor = std::pow(1 - c.lr * c.weight_decay, 100);
  double decay_gap = 0;
  const auto& w0 = start.get("layer.dense.weight");
  const auto& w1 = decayed.get("layer.dense.weight");
  for (std::size_t i = 0; i < w1.size(); ++i) decay_gap = std::max(decay_gap, std::abs(w1[i] - w0[i] * factor));
  o.require(decay_gap < 1e-10, "decay gap " + fmt(decay_gap));
  o.note("100-step reference gap " + fmt(adam_gap, 2) + ", decay closed-form gap " + fmt(decay_gap, 2));
  return o;
}

// ---------------------------------------------------------------- 7

Outcome distillation_efficacy() {
  Outcome o;
  Rng corpus_rng(101), validation_rng(202);
  const auto train = generate_synthetic_corpus(500, corpus_rng);
  const auto validation = generate_synthetic_corpus(200, validation_rng);
  const auto vocab = build_vocab(train, 1000);

  ModelConfig tc;
  tc.hidden_size = 64;
  tc.num_hidden_layers = 4;
  tc.num_attention_heads = 4;
  tc.intermediate_size = 256;
  tc.vocab_size = vocab.size();
  tc.max_position_embeddings = 64;
  Rng teacher_init(7);
  auto teacher = init_params<float>(tc, teacher_init);
  DistillConfig pretrain;
  pretrain.alpha = 0;
  pretrain.epochs = 60;
  pretrain.batch_size = 16;
  pretrain.learning_rate = 1e-3;
  pretrain.max_len = 64;
  pretrain.seed = 1;
  const auto t = run_distillation(std::nullopt, tc, teacher, vocab, train, validation, pretrain);

  ModelConfig sc = tc;
  sc.hidden_size = 32;
  sc.num_hidden_layers = 2;
  sc.num_attention_heads = 2;
  sc.intermediate_size = 128;
  // Students see a 100-line transfer subset of the teacher's corpus, the
  // regime where soft targets carry information the hard labels lack.
  const std::vector<std::string> transfer(train.begin(), train.begin() + 100);
  const auto student_run = [&](double alpha) {
    Rng init(1000);
    auto params = init_params<float>(sc, init);
    DistillConfig d;
    d.alpha = alpha;
    d.temperature = 2.0;
    d.epochs = 150;
    d.batch_size = 16;
    d.learning_rate = 3e-3;
    d.max_len = 64;
    d.seed = 50;
    return run_distillation(Teacher{tc, teacher}, sc, params, vocab, transfer, validation, d).final_val_loss;
  };
  const double kd = student_run(0.5), plain = student_run(0.0);
  o.require(kd < plain, "alpha 0.5 " + fmt(kd, 6) + " vs alpha 0 " + fmt(plain, 6));
  o.note("teacher " + fmt(t.final_val_loss) + ", student alpha 0.5 T 2 " + fmt(kd, 6) + " < alpha 0 " + fmt(plain, 6));
  return o;
}

// ---------------------------------------------------------------- 8

struct TaskFiles {
  fs::path dir, model;
  std::vector<LabeledExample> validation;
};

TaskFiles high_signal_task(const std::string& name) {
  TaskFiles f;
  f.dir = scratch_dir(name);
  Rng rng(8);
  const auto task = generate_synthetic_task(SyntheticTaskSpec{}, rng);
  write_examples(f.dir / "train.jsonl", task.train);
  write_examples(f.dir / "validation.jsonl", task.held_out);
  f.validation = task.held_out;
  auto texts = texts_of(task.train);
  const auto more = texts_of(task.held_out);
  texts.insert(texts.end(), more.begin(), more.end());
  f.model = f.dir / "base.ckpt";
  write_small_model(f.model, texts, 3);
  return f;
}

std::vector<std::string> finetune_args(const TaskFiles& f, const fs::path& validation, const fs::path& out) {
  return {"finetune", "--model", f.model.string(), "--train", (f.dir / "train.jsonl").string(), "--validation",
          validation.string(), "--out-dir", out.string(), "--lr", "1e-3", "--epochs", "10", "--max-len", "32",
          "--batch-size", "16", "--seed", "3"};
}

Outcome finetune_efficacy() {
  Outcome o;
  const auto f = high_signal_task("accept_finetune");
  const auto run = run_cli(finetune_args(f, f.dir / "validation.jsonl", f.dir / "good"));
  o.require(run.code == 0, "finetune exit " + std::to_string(run.code) + " " + run.err);
  if (!o.pass) return o;
  const auto acc = csv_column(f.dir / "good" / "epochs.csv", "val_acc");
  std::size_t reached = 0;
  for (std::size_t i = 0; i < acc.size() && !reached; ++i)
    if (acc[i] >= 0.95) reached = i + 1;
  o.require(acc.size() <= 10, "ran " + std::to_string(acc.size()) + " epochs");
  o.require(reached > 0, "best validation accuracy " + fmt(*std::max_element(acc.begin(), acc.end())));

  auto flipped = f.validation;
  for (auto& e : flipped) e.label = 1 - e.label;
  write_examples(f.dir / "flipped.jsonl", flipped);
  const auto stop = run_cli(finetune_args(f, f.dir / "flipped.jsonl", f.dir / "flipped"));
  o.require(stop.code == 0, "contrived run exit " + std::to_string(stop.code));
  const auto evaluations = csv_column(f.dir / "flipped" / "epochs.csv", "val_loss").size();
  o.require(evaluations == 4, "contrived run made " + std::to_string(evaluations) + " evaluations");
  o.require(stop.out.find("early stop after 4 epochs") != std::string::npos, "early stop message");
  o.note("validation accuracy " + fmt(acc[reached ? reached - 1 : 0]) + " at epoch " + std::to_string(reached) +
         "; contrived run stopped after " + std::to_string(evaluations) + " evaluations (patience 3)");
  return o;
}

// ---------------------------------------------------------------- 9

Outcome reproducibility() {
  Outcome o;
  const auto dir = scratch_dir("accept_repro");
  Rng posts_rng(9), corpus_rng(10);
  write_lines(dir / "posts.jsonl", generate_synthetic_posts(40, 90, 2, posts_rng));
  write_lines(dir / "corpus.txt", generate_synthetic_corpus(60, corpus_rng));
  const std::vector<std::string> arch = {"--hidden", "16", "--layers", "1", "--heads", "2", "--intermediate", "32",
                                         "--max-positions", "32", "--max-len", "32", "--batch-size", "8",
                                         "--epochs", "2", "--seed", "4"};
  const auto twice = [&](const std::string& label, std::vector<std::string> args,
                         const std::vector<std::string>& files) {
    std::string first;
    for (const char* run : {"a", "b"}) {
      auto a = args;
      a.insert(a.end(), {"--out-dir", (dir / (label + run)).string()});
      const auto r = run_cli(a);
      o.require(r.code == 0, label + " exit " + std::to_string(r.code) + " " + r.err);
    }
    for (const auto& file : files) {
      const auto x = slurp(dir / (label + "a") / file), y = slurp(dir / (label + "b") / file);
      o.require(!x.empty() && x == y, label + " " + file + " differs");
    }
  };
  twice("preprocess", {"preprocess", "--input", (dir / "posts.jsonl").string(), "--seed", "4"},
        {"train.jsonl", "test.jsonl"});
  auto pretrain = std::vector<std::string>{"pretrain-teacher", "--corpus", (dir / "corpus.txt").string(),
                                           "--vocab-size", "200", "--lr", "1e-3"};
  pretrain.insert(pretrain.end(), arch.begin(), arch.end());
  twice("teacher", pretrain, {"epochs.csv", "steps.csv", "teacher.ckpt"});
  auto distill = std::vector<std::string>{"distill", "--corpus", (dir / "corpus.txt").string(), "--teacher",
                                          (dir / "teachera" / "teacher.ckpt").string(), "--lr", "1e-3"};
  distill.insert(distill.end(), arch.begin(), arch.end());
  twice("student", distill, {"epochs.csv", "steps.csv", "student.ckpt"});

  const auto f = high_signal_task("accept_repro_task");
  twice("finetune",
        {"finetune", "--model", f.model.string(), "--train", (f.dir / "train.jsonl").string(), "--validation",
         (f.dir / "validation.jsonl").string(), "--lr", "1e-3", "--epochs", "2", "--max-len", "32", "--seed", "3"},
        {"epochs.csv", "model.ckpt"});

  // Bitwise checkpoint round trip and classified corruption.
  const auto ck = load_checkpoint(dir / "finetunea" / "model.ckpt");
  const auto bytes = slurp(dir / "finetunea" / "model.ckpt");
  o.require(serialize_checkpoint(ck) == bytes, "round trip");
  const auto kind = [](const std::string& b) {
    try {
      deserialize_checkpoint(b);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::state;  // accepted: never expected here
  };
  auto magic = bytes, version = bytes;
  magic[1] = 'Z';
  version[4] = 9;
  o.require(kind(bytes.substr(0, bytes.size() - 1)) == ErrorKind::checkpoint_truncated, "truncated");
  o.require(kind(magic) == ErrorKind::checkpoint_magic, "bad magic");
  o.require(kind(version) == ErrorKind::checkpoint_version, "bad version");
  o.note("preprocess, pretrain-teacher, distill and finetune reruns byte-identical; checkpoint round trip bitwise; "
         "truncation, magic and version corruption rejected");
  return o;
}

// ---------------------------------------------------------------- 10

Outcome metric_equivalence() {
  Outcome o;
  const auto auroc = auroc_sweep(12, 10);
  const auto rho = spearman_sweep(1000, 11);
  o.require(auroc.worst < 1e-12, "auroc gap " + fmt(auroc.worst));
  o.require(rho.worst < 1e-9, "spearman gap " + fmt(rho.worst));
  o.note("AUROC over " + std::to_string(auroc.cases) + " labelings (all lengths 2..12), gap " + fmt(auroc.worst, 2) +
         "; Spearman over " + std::to_string(rho.cases) + " vectors, gap " + fmt(rho.worst, 2));
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  // Optional arguments select criteria by number; default runs all.
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  struct Criterion {
    int id;
    const char* name;
    double budget_seconds;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "parameter count", 1, parameter_count},
      {2, "metric reproduction", 1, metric_reproduction},
      {3, "pipeline counts", 10, pipeline_counts},
      {4, "gradient integrity", 120, gradient_integrity},
      {5, "loss algebra", 10, loss_algebra},
      {6, "optimizer", 10, optimizer},
      {7, "distillation efficacy", 300, distillation_efficacy},
      {8, "fine-tune efficacy", 180, finetune_efficacy},
      {9, "reproducibility", 60, reproducibility},
      {10, "metric equivalence", 60, metric_equivalence},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (seconds > c.budget_seconds) {
      o.pass = false;
      o.detail += "; over time budget";
    }
    if (!o.pass) ++failures;
    std::printf("criterion %2d %-22s %s  (%.1fs of %.0fs)  %s\n", c.id, c.name, o.pass ? "PASS" : "FAIL", seconds,
                c.budget_seconds, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
