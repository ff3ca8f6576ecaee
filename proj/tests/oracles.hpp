// SPDX-License-Identifier: Apache-2.0
// Independent reference computations for the metric tests.
#pragma once

#include <boost/rational.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "kdforge/metrics.hpp"
#include "kdforge/rng.hpp"

namespace kdforge::testing {

using Rational = boost::rational<std::int64_t>;

struct ExactBinaryScores {
  Rational accuracy;
  Rational precision[2], recall[2], f1[2];
  Rational weighted_precision, weighted_recall, weighted_f1;
};

/// Exact rational metrics of a 2x2 matrix m[true][pred].
inline ExactBinaryScores exact_binary_scores(const std::int64_t m[2][2]) {
  ExactBinaryScores s;
  const std::int64_t n = m[0][0] + m[0][1] + m[1][0] + m[1][1];
  s.accuracy = Rational(m[0][0] + m[1][1], n);
  for (int c = 0; c < 2; ++c) {
    const std::int64_t support = m[c][0] + m[c][1];
    const std::int64_t predicted = m[0][c] + m[1][c];
    s.precision[c] = Rational(m[c][c], predicted);
    s.recall[c] = Rational(m[c][c], support);
    s.f1[c] = Rational(2) * s.precision[c] * s.recall[c] / (s.precision[c] + s.recall[c]);
    const Rational w(support, n);
    s.weighted_precision += w * s.precision[c];
    s.weighted_recall += w * s.recall[c];
    s.weighted_f1 += w * s.f1[c];
  }
  return s;
}

/// True when r rounds to `target` at two decimals (half-up), decided exactly.
inline bool rounds_to(const Rational& r, std::int64_t hundredths) {
  return r >= Rational(2 * hundredths - 1, 200) && r < Rational(2 * hundredths + 1, 200);
}

/// P(score_pos > score_neg) + 0.5 P(equal) over every positive/negative pair.
inline double pair_count_auc(std::span<const double> scores, std::span<const int> labels) {
  double wins = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / double(pairs);
}

/// 1 - 6 sum d^2 / (n (n^2 - 1)) for inputs without ties.
inline double spearman_rank_formula(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  const auto rank = [n](std::span<const double> v, std::size_t i) {
    std::size_t r = 1;
    for (std::size_t j = 0; j < n; ++j) r += v[j] < v[i];
    return double(r);
  };
  double d2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = rank(x, i) - rank(y, i);
    d2 += d * d;
  }
  const double nn = double(n);
  return 1 - 6 * d2 / (nn * (nn * nn - 1));
}

struct SweepResult {
  double worst = 0;
  std::size_t cases = 0;
};

/// roc_auc against pair counting for every two-class labeling of length
/// 2..max_len, each scored once with heavy ties and once with distinct scores.
inline SweepResult auroc_sweep(std::size_t max_len, std::uint64_t seed) {
  SweepResult r;
  Rng rng(seed);
  for (std::size_t n = 2; n <= max_len; ++n) {
    for (std::uint32_t bits = 1; bits + 1 < (1u << n); ++bits) {
      std::vector<int> labels(n);
      for (std::size_t i = 0; i < n; ++i) labels[i] = (bits >> i) & 1;
      std::vector<double> tied(n), distinct(n);
      for (std::size_t i = 0; i < n; ++i) {
        tied[i] = double(rng.below(n / 2 + 1)) / 4;
        distinct[i] = rng.uniform();
      }
      for (const auto* scores : {&tied, &distinct}) {
        const double got = roc_auc(*scores, labels).auroc;
        r.worst = std::max(r.worst, std::abs(got - pair_count_auc(*scores, labels)));
        ++r.cases;
      }
    }
  }
  return r;
}

/// spearman against the rank-difference formula on random tie-free vectors.
inline SweepResult spearman_sweep(std::size_t vectors, std::uint64_t seed) {
  SweepResult r;
  Rng rng(seed);
  for (std::size_t k = 0; k < vectors; ++k) {
    const std::size_t n = 2 + rng.below(40);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.normal();
      y[i] = 0.5 * x[i] + rng.normal();
    }
    r.worst = std::max(r.worst, std::abs(spearman(x, y) - spearman_rank_formula(x, y)));
    ++r.cases;
  }
  return r;
}

}  // namespace kdforge::testing
