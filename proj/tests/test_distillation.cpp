// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <limits>

#include "expect.hpp"
#include "gradcheck.hpp"
#include "kdforge/distill.hpp"
#include "kdforge/ops.hpp"

using namespace kdforge;
using kdforge::testing::kind_of;
using kdforge::testing::random_tensor;

namespace {

double between(Rng& rng, double lo, double hi) { return lo + (hi - lo) * rng.uniform(); }

std::vector<double> random_distribution(Rng& rng, std::size_t n) {
  std::vector<double> p(n);
  double s = 0;
  for (auto& v : p) s += v = -std::log(1 - rng.uniform());  // exponential draws
  for (auto& v : p) v /= s;
  return p;
}

struct TinySetup {
  std::vector<std::string> lines;
  Vocabulary vocab;
  ModelConfig config;

  explicit TinySetup(double dropout = 0.1) {
    Rng rng(17);
    lines = generate_synthetic_corpus(40, rng);
    vocab = build_vocab(lines, 120);
    config.hidden_size = 16;
    config.num_hidden_layers = 1;
    config.num_attention_heads = 2;
    config.intermediate_size = 32;
    config.vocab_size = vocab.size();
    config.max_position_embeddings = 48;
    config.hidden_dropout = dropout;
    config.attention_dropout = dropout;
  }

  DistillConfig run_config(double alpha) const {
    DistillConfig c;
    c.alpha = alpha;
    c.epochs = 2;
    c.batch_size = 4;
    c.learning_rate = 1e-3;
    c.max_len = 48;
    c.seed = 5;
    return c;
  }

  EncoderParams<float> init(std::uint64_t seed) const {
    Rng rng(seed);
    return init_params<float>(config, rng);
  }
};

}  // namespace

TEST_CASE("soften examples") {
  Rng rng(1);
  const auto z = random_tensor<double>({4, 6}, rng, 3.0);
  const auto a = soften(z, 1.0), b = softmax_rows(z);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-15));

  const auto flat = soften(Tensor64({1, 2}, {5.0, 1.0}), 1000.0);
  CHECK(std::abs(flat[0] - 0.501) < 1e-3);
  CHECK(std::abs(flat[1] - 0.499) < 1e-3);

  const auto two = soften(Tensor64({1, 2}, {2.0, 0.0}), 2.0);
  const double e = std::exp(1.0);
  CHECK(std::abs(two[0] - e / (e + 1)) < 1e-12);
  CHECK(std::abs(two[0] - 0.73106) < 1e-5);
  CHECK(std::abs(two[1] - 0.26894) < 1e-5);

  CHECK(kind_of([&] { soften(z, 0.0); }) == ErrorKind::config);
  CHECK(kind_of([&] { soften(z, -1.0); }) == ErrorKind::config);
}

TEST_CASE("soften keeps the argmax for every temperature") {
  Rng rng(2);
  for (int trial = 0; trial < 500; ++trial) {
    const auto z = random_tensor<double>({1, 7}, rng, 4.0);
    const double T = std::exp(between(rng, -4.0, 4.0));
    const auto p = soften(z, T);
    std::size_t az = 0, ap = 0;
    for (std::size_t i = 1; i < 7; ++i) {
      if (z[i] > z[az]) az = i;
      if (p[i] > p[ap]) ap = i;
    }
    CHECK(az == ap);
  }
}

TEST_CASE("KL divergence examples and properties") {
  const std::vector<double> one_hot = {1, 0}, half = {0.5, 0.5};
  CHECK(kl_divergence<double>(one_hot, half) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.below(9);
    const auto p = random_distribution(rng, n), q = random_distribution(rng, n);
    CHECK(kl_divergence<double>(p, q) >= 0);
    CHECK(std::abs(kl_divergence<double>(p, p)) < 1e-9);
  }
  // q floored: a zero in q under mass in p stays finite.
  const std::vector<double> zero_q = {0, 1};
  CHECK(kl_divergence<double>(one_hot, zero_q) == doctest::Approx(-std::log(1e-12)));
  const std::vector<double> bad = {0.7, 0.7}, neg = {1.5, -0.5};
  CHECK(kind_of([&] { kl_divergence<double>(bad, half); }) == ErrorKind::distribution);
  CHECK(kind_of([&] { kl_divergence<double>(half, neg); }) == ErrorKind::distribution);
}

TEST_CASE("distillation loss examples") {
  DistillationLoss<double> loss;
  const Tensor64 t({1, 2}, {2.0, 0.0}), s({1, 2}, {0.0, 2.0});
  const double p = std::exp(1.0) / (std::exp(1.0) + 1);
  const double hand = p * std::log(p / (1 - p)) + (1 - p) * std::log((1 - p) / p);
  const double got = loss.forward(t, s, 2.0);
  CHECK(got == doctest::Approx(hand).epsilon(1e-12));
  // p / q = e on the first class, so the divergence is (p - q) * 1.
  CHECK(std::abs(got - (2 * p - 1)) < 1e-12);
  CHECK(std::abs(got - 0.46212) < 1e-5);

  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const auto z = random_tensor<double>({5, 9}, rng, 3.0);
    CHECK(std::abs(DistillationLoss<double>{}.forward(z, z, 0.5 + 3 * rng.uniform())) < 1e-7);

    const auto zs = random_tensor<double>({5, 9}, rng, 3.0);
    auto t_shift = z, s_shift = zs;
    for (std::size_t r = 0; r < 5; ++r) {
      const double ct = rng.normal() * 10, cs = rng.normal() * 10;
      for (std::size_t c = 0; c < 9; ++c) {
        t_shift.at(r, c) += ct;
        s_shift.at(r, c) += cs;
      }
    }
    const double T = 0.5 + 3 * rng.uniform();
    CHECK(DistillationLoss<double>{}.forward(t_shift, s_shift, T) ==
          doctest::Approx(DistillationLoss<double>{}.forward(z, zs, T)).epsilon(1e-9));
  }
}

TEST_CASE("distillation loss averages only selected rows") {
  Rng rng(5);
  const auto t = random_tensor<double>({3, 4}, rng, 2.0), s = random_tensor<double>({3, 4}, rng, 2.0);
  const std::vector<std::int32_t> sel = {1, 0, 1};
  const double mean = DistillationLoss<double>{}.forward(t, s, 2.0, sel);
  const auto pt = soften(t, 2.0), ps = soften(s, 2.0);
  double want = 0;
  for (std::size_t r : {0, 2})
    want += kl_divergence<double>(std::span(pt.data()).subspan(r * 4, 4), std::span(ps.data()).subspan(r * 4, 4));
  CHECK(mean == doctest::Approx(want / 2).epsilon(1e-13));

  const std::vector<std::int32_t> none = {0, 0, 0};
  CHECK(kind_of([&] { DistillationLoss<double>{}.forward(t, s, 2.0, none); }) == ErrorKind::empty_batch);
  CHECK(kind_of([] { DistillationLoss<double>{}.backward(); }) == ErrorKind::state);
}

TEST_CASE("distillation loss gradient") {
  for (const auto& g : testing::check_primitives(20))
    if (g.name == "distillation_loss") CHECK(g.worst < 1e-6);
}

TEST_CASE("combined loss") {
  CHECK(combined_loss(0.3, 0.7, 0.0, 2.0) == 0.7);
  CHECK(combined_loss(0.3, 0.7, 1.0, 1.0) == 0.3);
  CHECK(combined_loss(0.4, 0.6, 0.5, 2.0) == doctest::Approx(1.1).epsilon(1e-15));
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const double d = between(rng, 0, 2), ce = between(rng, 0, 5), T = between(rng, 0.5, 4);
    const double a = between(rng, 0.01, 0.99), h = 1e-6;
    const double fd = (combined_loss(d, ce, a + h, T) - combined_loss(d, ce, a - h, T)) / (2 * h);
    CHECK(fd == doctest::Approx(T * T * d - ce).epsilon(1e-7));
  }
  CHECK(kind_of([] { combined_loss(1, 1, 1.5, 2); }) == ErrorKind::config);
}

TEST_CASE("config validation") {
  DistillConfig c;
  CHECK(c.temperature == 2.0);
  CHECK(c.alpha == 0.5);
  CHECK(c.learning_rate == 5e-5);
  CHECK(c.epochs == 10);
  CHECK(c.max_len == 128);
  CHECK_NOTHROW(c.validate());
  c.temperature = 0;
  CHECK(kind_of([&] { c.validate(); }) == ErrorKind::config);
  c = DistillConfig{};
  c.alpha = -0.1;
  CHECK(kind_of([&] { c.validate(); }) == ErrorKind::config);
}

TEST_CASE("distillation run: frozen teacher and reproducible trace") {
  const TinySetup s;
  const auto teacher_params = s.init(1);
  const auto before = teacher_params;
  const Teacher teacher{s.config, teacher_params};

  auto a = s.init(2), b = s.init(2);
  const auto ra = run_distillation(teacher, s.config, a, s.vocab, s.lines, {}, s.run_config(0.5));
  const auto rb = run_distillation(teacher, s.config, b, s.vocab, s.lines, {}, s.run_config(0.5));
  CHECK(teacher_params == before);
  CHECK(a == b);
  REQUIRE(ra.steps.size() == rb.steps.size());
  CHECK(!ra.steps.empty());
  for (std::size_t i = 0; i < ra.steps.size(); ++i) {
    CHECK(ra.steps[i].combined == rb.steps[i].combined);
    CHECK(ra.steps[i].distill > 0);
  }
  CHECK(ra.log.to_csv() == rb.log.to_csv());
  CHECK(ra.log.rows().size() == 2);
  CHECK(std::isfinite(ra.final_val_loss));
}

TEST_CASE("alpha zero reduces to plain masked-token training") {
  const TinySetup s;
  const auto teacher_params = s.init(1);
  auto with_teacher = s.init(2), plain = s.init(2);
  const auto r1 = run_distillation(Teacher{s.config, teacher_params}, s.config, with_teacher, s.vocab, s.lines, {},
                                   s.run_config(0.0));
  const auto r2 = run_distillation(std::nullopt, s.config, plain, s.vocab, s.lines, {}, s.run_config(0.0));
  REQUIRE(r1.steps.size() == r2.steps.size());
  for (std::size_t i = 0; i < r1.steps.size(); ++i) {
    CHECK(std::abs(r1.steps[i].combined - r2.steps[i].combined) < 1e-6);
    CHECK(r1.steps[i].combined == doctest::Approx(r1.steps[i].ce));
  }
  CHECK(std::abs(r1.final_val_loss - r2.final_val_loss) < 1e-6);
}

TEST_CASE("student identical to teacher starts with zero distillation term") {
  const TinySetup s(0.0);
  const auto teacher_params = s.init(3);
  auto student = teacher_params;
  auto cfg = s.run_config(0.5);
  cfg.epochs = 1;
  const auto r = run_distillation(Teacher{s.config, teacher_params}, s.config, student, s.vocab, s.lines, {}, cfg);
  REQUIRE(!r.steps.empty());
  CHECK(r.steps.front().distill < 1e-6);
}

TEST_CASE("distillation errors") {
  const TinySetup s;
  auto student = s.init(2);
  auto other = s.config;
  other.vocab_size += 1;
  Rng rng(1);
  const auto wide = init_params<float>(other, rng);
  CHECK(kind_of([&] {
          run_distillation(Teacher{other, wide}, s.config, student, s.vocab, s.lines, {}, s.run_config(0.5));
        }) == ErrorKind::compatibility);
  auto long_cfg = s.run_config(0.5);
  long_cfg.max_len = 64;
  CHECK(kind_of([&] { run_distillation(std::nullopt, s.config, student, s.vocab, s.lines, {}, long_cfg); }) ==
        ErrorKind::config);

  auto wild = s.run_config(0.0);
  wild.learning_rate = 1e30;
  wild.warmup_fraction = 0;
  const auto err = [&] {
    try {
      run_distillation(std::nullopt, s.config, student, s.vocab, s.lines, {}, wild);
    } catch (const Error& e) {
      return std::make_pair(e.kind(), std::string(e.what()));
    }
    return std::make_pair(ErrorKind::state, std::string());
  }();
  CHECK(err.first == ErrorKind::divergence);
  CHECK(err.second.find("step") != std::string::npos);
}
