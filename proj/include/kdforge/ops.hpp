// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Each op object caches what its backward needs
// during forward; calling backward first is a state error. There is no tape:
// callers chain backward calls by hand.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "kdforge/rng.hpp"
#include "kdforge/tensor.hpp"

namespace kdforge {

enum class Transpose { none, b };

/// Target value skipped by CrossEntropy when ignore is enabled.
inline constexpr std::int32_t kIgnoreLabel = -100;

// Raw row-major GEMM helpers. `accumulate` adds into c instead of overwriting.
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate = false);  // c[m,n] = a[m,k] b[k,n]
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate = false);  // c[m,n] = a[m,k] b[n,k]^T
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate = false);  // c[m,n] = a[k,m]^T b[k,n]

/// 2-D product, or batched product over the leading axis of two rank-3 inputs.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b,
                      Transpose tb = Transpose::none);

template <typename T>
class MatMul {
 public:
  struct Grads {
    BasicTensor<T> a, b;
  };
  BasicTensor<T> forward(const BasicTensor<T>& a, const BasicTensor<T>& b,
                         Transpose tb = Transpose::none);
  Grads backward(const BasicTensor<T>& dy) const;

 private:
  std::optional<BasicTensor<T>> a_, b_;
  Transpose tb_ = Transpose::none;
};

/// y = x W + bias, x:[N,in], W:[in,out], bias:[out].
template <typename T>
class Linear {
 public:
  struct Grads {
    BasicTensor<T> x, weight, bias;
  };
  BasicTensor<T> forward(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                         const BasicTensor<T>& bias);
  Grads backward(const BasicTensor<T>& dy) const;

 private:
  std::optional<BasicTensor<T>> x_, w_;
};

/// Row-wise softmax over the last axis with max subtraction.
template <typename T>
class Softmax {
 public:
  BasicTensor<T> forward(const BasicTensor<T>& x);
  BasicTensor<T> backward(const BasicTensor<T>& dy) const;
  const BasicTensor<T>& output() const;

 private:
  std::optional<BasicTensor<T>> y_;
};

template <typename T>
class LayerNorm {
 public:
  struct Grads {
    BasicTensor<T> x, gain, shift;
  };
  BasicTensor<T> forward(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                         const BasicTensor<T>& shift, double eps);
  Grads backward(const BasicTensor<T>& dy) const;

 private:
  std::optional<BasicTensor<T>> xhat_, gain_;
  std::vector<T> rstd_;
};

/// Exact-erf GELU: x * Phi(x).
template <typename T>
class Gelu {
 public:
  BasicTensor<T> forward(const BasicTensor<T>& x);
  BasicTensor<T> backward(const BasicTensor<T>& dy) const;

 private:
  std::optional<BasicTensor<T>> x_;
};

/// Inverted dropout. The sampled keep-mask is cached so backward replays it.
template <typename T>
class Dropout {
 public:
  BasicTensor<T> forward(const BasicTensor<T>& x, double rate, Rng& rng, bool training);
  BasicTensor<T> backward(const BasicTensor<T>& dy) const;
  /// Scale factors per element; empty when forward was an identity.
  const std::vector<T>& mask() const { return mask_; }

 private:
  bool ran_ = false;
  std::vector<T> mask_;
};

/// Mean negative log-likelihood of integer targets under softmax(logits),
/// via log-sum-exp. Logits are read as rows over the last axis.
template <typename T>
class CrossEntropy {
 public:
  explicit CrossEntropy(bool ignore_enabled = false) : ignore_(ignore_enabled) {}
  T forward(const BasicTensor<T>& logits, std::span<const std::int32_t> targets);
  BasicTensor<T> backward(T upstream = T(1)) const;
  std::size_t counted() const { return counted_; }

 private:
  bool ignore_;
  std::optional<BasicTensor<T>> probs_;
  std::vector<std::int32_t> targets_;
  std::size_t counted_ = 0;
};

// Stateless forward conveniences.
template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& shift, double eps);
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double rate, Rng& rng, bool training);
template <typename T>
T cross_entropy_from_logits(const BasicTensor<T>& logits, std::span<const std::int32_t> targets);

/// In-place row softmax on a raw buffer; the shared kernel for all softmax users.
template <typename T>
void softmax_row_inplace(T* row, std::size_t n);

}  // namespace kdforge
