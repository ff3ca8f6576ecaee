// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <set>

#include "expect.hpp"
#include "gradcheck.hpp"
#include "kdforge/ops.hpp"
#include "kdforge/rng.hpp"
#include "kdforge/simd/kernels.hpp"
#include "kdforge/tensor.hpp"
#include "support.hpp"

using namespace kdforge;
using kdforge::testing::random_tensor;

using kdforge::testing::kind_of;

TEST_CASE("tensor shape invariants") {
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(kind_of([] { Tensor bad(Shape{}); }) == ErrorKind::dimension);
  CHECK(kind_of([] { Tensor bad({2, 0}); }) == ErrorKind::dimension);
  CHECK(kind_of([] { Tensor bad({1, 2, 3, 4}); }) == ErrorKind::dimension);
  CHECK(kind_of([] { Tensor bad({2, 2}, std::vector<float>{1, 2, 3}); }) == ErrorKind::dimension);
  const auto r = Tensor({2, 3}, {1, 2, 3, 4, 5, 6}).reshaped({3, 2});
  CHECK(r.at(2, 1) == 6);
}

TEST_CASE("rng streams are deterministic and distinct") {
  Rng a(7, 1), b(7, 1), c(7, 2);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs |= x != c.next_u64();
  }
  CHECK(differs);
  Rng d(123);
  std::vector<int> hist(10, 0);
  for (int i = 0; i < 100000; ++i) ++hist[d.below(10)];
  for (int h : hist) CHECK(std::abs(h - 10000) < 500);
  double sum = 0, sq = 0;
  for (int i = 0; i < 100000; ++i) {
    const double z = d.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / 1e5) < 0.02);
  CHECK(std::abs(sq / 1e5 - 1) < 0.02);
  for (int i = 0; i < 10000; ++i) CHECK(std::abs(d.truncated_normal(0.02)) <= 0.04);
}

TEST_CASE("matmul examples") {
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  const Tensor m({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(eye, m) == m);
  CHECK(matmul(eye, Tensor({2, 2})) == Tensor({2, 2}));
  CHECK(matmul(m, Tensor({2, 1}, {5, 6})) == Tensor({2, 1}, {17, 39}));
  try {
    matmul(m, Tensor({3, 2}));
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::dimension);
    CHECK(std::string(e.what()).find("[2x2]") != std::string::npos);
    CHECK(std::string(e.what()).find("[3x2]") != std::string::npos);
  }
}

TEST_CASE("batched matmul applies per leading index") {
  Rng rng(3);
  const auto a = random_tensor<double>({3, 2, 4}, rng), b = random_tensor<double>({3, 4, 5}, rng);
  const auto c = matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t col = 0; col < 5; ++col) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += a.at(i, r, k) * b.at(i, k, col);
        CHECK(c.at(i, r, col) == doctest::Approx(s).epsilon(1e-12));
      }
}

TEST_CASE("softmax examples and stability") {
  const auto half = softmax_rows(Tensor({1, 2}, {0, 0}));
  CHECK(half[0] == doctest::Approx(0.5));
  const auto big = softmax_rows(Tensor({1, 2}, {1000, 0}));
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] == doctest::Approx(0.0));
  const auto one = softmax_rows(Tensor64({1, 2}, {1, 0}));
  CHECK(std::abs(one[0] - std::exp(1.0) / (std::exp(1.0) + 1)) < 1e-12);
  CHECK(std::abs(one[0] - 0.73106) < 1e-5);
  CHECK(kind_of([] { softmax_rows(Tensor({1, 2}, {NAN, 0})); }) == ErrorKind::numeric);
}

TEST_CASE("softmax rows sum to one (property)") {
  for (std::uint64_t s = 0; s < 200; ++s) {
    Rng rng(s);
    const auto x = random_tensor<float>({4, 1 + s % 37}, rng, 10.0);
    const auto y = softmax_rows(x);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double sum = 0;
      for (float v : y.row(r)) {
        CHECK(v >= 0);
        sum += v;
      }
      CHECK(std::abs(sum - 1) < 1e-6);
    }
  }
}

TEST_CASE("layer norm examples") {
  const Tensor one({4}, 1.0f), zero({4});
  const auto c = layer_norm(Tensor({1, 4}, {5, 5, 5, 5}), one, zero, 1e-12);
  for (float v : c.data()) CHECK(v == 0.0f);
  Rng rng(1);
  const auto x = random_tensor<float>({3, 4}, rng);
  const auto s = layer_norm(x, zero, Tensor({4}, 2.5f), 1e-12);
  for (float v : s.data()) CHECK(v == 2.5f);
  const auto h = layer_norm(Tensor64({1, 2}, {1, 3}), Tensor64({2}, 1.0), Tensor64({2}), 0.0);
  CHECK(h[0] == doctest::Approx(-1.0));
  CHECK(h[1] == doctest::Approx(1.0));
  CHECK(kind_of([&] { layer_norm(x, Tensor({3}), Tensor({3}), 1e-12); }) == ErrorKind::dimension);
}

TEST_CASE("gelu examples") {
  const auto y = gelu(Tensor64({4}, {0, 1, 20, -20}));
  CHECK(y[0] == 0.0);
  CHECK(std::abs(y[1] - 0.841345) < 1e-4);
  CHECK(y[2] == doctest::Approx(20.0));
  CHECK(std::abs(y[3]) < 1e-12);
  Gelu<double> g;
  g.forward(Tensor64({1}, {0.0}));
  CHECK(g.backward(Tensor64({1}, {1.0}))[0] == doctest::Approx(0.5));
}

TEST_CASE("dropout semantics") {
  Rng rng(5);
  const auto x = random_tensor<float>({100, 1000}, rng);
  Rng r(9);
  CHECK(dropout(x, 0.5, r, false) == x);
  CHECK(dropout(x, 0.0, r, true) == x);
  Rng r1(11), r2(11);
  const auto a = dropout(x, 0.5, r1, true);
  CHECK(a == dropout(x, 0.5, r2, true));
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == 0.0f)
      ++zeros;
    else
      CHECK(a[i] == doctest::Approx(2.0f * x[i]));
  }
  CHECK(std::abs(static_cast<double>(zeros) / 1e5 - 0.5) < 0.01);
  CHECK(kind_of([&] { dropout(x, 1.0, r, true); }) == ErrorKind::config);
  CHECK(kind_of([&] { dropout(x, -0.1, r, true); }) == ErrorKind::config);
}

TEST_CASE("cross entropy examples") {
  const std::vector<std::int32_t> t0 = {0}, t1 = {1};
  CHECK(cross_entropy_from_logits(Tensor64({1, 2}, {0, 0}), t0) == doctest::Approx(std::log(2.0)));
  CHECK(cross_entropy_from_logits(Tensor64({1, 2}, {30, -30}), t0) < 1e-20);
  CHECK(std::abs(cross_entropy_from_logits(Tensor64({1, 2}, {1, 0}), t1) - 1.3133) < 1e-4);
  try {
    const std::vector<std::int32_t> bad = {0, 2};
    cross_entropy_from_logits(Tensor({2, 2}), bad);
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::label);
    CHECK(std::string(e.what()).find("index 1") != std::string::npos);
  }
}

TEST_CASE("cross entropy is shift invariant (property)") {
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng(s);
    auto z = random_tensor<float>({4, 6}, rng, 3.0);
    std::vector<std::int32_t> t(4);
    for (auto& v : t) v = static_cast<std::int32_t>(rng.below(6));
    const float base = cross_entropy_from_logits(z, t);
    for (std::size_t r = 0; r < 4; ++r) {
      const float c = static_cast<float>(rng.normal() * 5);
      for (auto& v : z.row(r)) v += c;
    }
    CHECK(std::abs(cross_entropy_from_logits(z, t) - base) < 1e-5);
  }
}

TEST_CASE("backward before forward is a state error") {
  CHECK(kind_of([] { MatMul<float>{}.backward(Tensor({1, 1})); }) == ErrorKind::state);
  CHECK(kind_of([] { Linear<float>{}.backward(Tensor({1, 1})); }) == ErrorKind::state);
  CHECK(kind_of([] { Softmax<float>{}.backward(Tensor({1, 1})); }) == ErrorKind::state);
  CHECK(kind_of([] { LayerNorm<float>{}.backward(Tensor({1, 1})); }) == ErrorKind::state);
  CHECK(kind_of([] { Gelu<float>{}.backward(Tensor({1, 1})); }) == ErrorKind::state);
  CHECK(kind_of([] { Dropout<float>{}.backward(Tensor({1, 1})); }) == ErrorKind::state);
  CHECK(kind_of([] { CrossEntropy<float>{}.backward(); }) == ErrorKind::state);
}

TEST_CASE("identity matmul chain passes the upstream gradient") {
  Rng rng(2);
  const Tensor64 eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const auto x = random_tensor<double>({2, 3}, rng), up = random_tensor<double>({2, 3}, rng);
  MatMul<double> a, b;
  b.forward(a.forward(x, eye), eye);
  CHECK(a.backward(b.backward(up).a).a == up);
}

TEST_CASE("finite-difference gradients of every primitive, 100 seeds") {
  for (const auto& g : kdforge::testing::check_primitives(100)) {
    INFO(g.name << " worst relative error " << g.worst);
    CHECK(g.worst < 1e-4);
  }
}

TEST_CASE("simd kernels match the scalar reference") {
  const auto* avx = simd::avx2_kernels();
  if (!avx || !simd::cpu_supports(simd::Isa::avx2)) {
    MESSAGE("AVX2 not available; only the scalar table is exercised");
    return;
  }
  const auto& sc = simd::scalar_kernels();
  for (std::uint64_t s = 0; s < 200; ++s) {
    Rng rng(s);
    const std::size_t n = 1 + rng.below(300);
    std::vector<float> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = static_cast<float>(rng.normal());
      b[i] = static_cast<float>(rng.normal());
    }
    const double tol = 1e-5 * static_cast<double>(n);
    CHECK(std::abs(avx->dot(a.data(), b.data(), n) - sc.dot(a.data(), b.data(), n)) < tol);
    CHECK(std::abs(avx->sum(a.data(), n) - sc.sum(a.data(), n)) < tol);
    CHECK(avx->max(a.data(), n) == sc.max(a.data(), n));
    CHECK(std::abs(avx->sq_dev_sum(a.data(), 0.3f, n) - sc.sq_dev_sum(a.data(), 0.3f, n)) < tol);
    auto y1 = b, y2 = b;
    avx->axpy(0.7f, a.data(), y1.data(), n);
    sc.axpy(0.7f, a.data(), y2.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(y1[i] - y2[i]) <= 1e-6f * (1 + std::abs(y2[i])));
    y1 = y2;
    avx->scale(1.3f, y1.data(), n);
    sc.scale(1.3f, y2.data(), n);
    CHECK(y1 == y2);
  }
}

TEST_CASE("ops agree across kernel tables") {
  if (!simd::avx2_kernels() || !simd::cpu_supports(simd::Isa::avx2)) return;
  const auto before = simd::active_isa();
  Rng rng(4);
  const auto a = random_tensor<float>({17, 33}, rng), b = random_tensor<float>({33, 9}, rng);
  simd::set_isa(simd::Isa::scalar);
  const auto c_ref = matmul(a, b);
  const auto s_ref = softmax_rows(a);
  simd::set_isa(simd::Isa::avx2);
  const auto c = matmul(a, b);
  const auto s = softmax_rows(a);
  simd::set_isa(before);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(std::abs(c[i] - c_ref[i]) < 1e-4);
  for (std::size_t i = 0; i < s.size(); ++i) CHECK(std::abs(s[i] - s_ref[i]) < 1e-6);
}
