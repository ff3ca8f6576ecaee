// SPDX-License-Identifier: Apache-2.0
#include "kdforge/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "kdforge/simd/kernels.hpp"

namespace kdforge {

namespace {

[[noreturn]] void backward_before_forward(const char* op) {
  throw Error(ErrorKind::state, std::string(op) + ": backward called before forward");
}

}  // namespace

template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, T(0));
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      if (arow[p] != T(0)) simd::axpy(arow[p], b + p * n, crow, n);
    }
  }
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T v = simd::dot(arow, b + j * k, k);
      crow[j] = accumulate ? crow[j] + v : v;
    }
  }
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      if (arow[i] != T(0)) simd::axpy(arow[i], brow, c + i * n, n);
    }
  }
}

// ---------------------------------------------------------------- matmul

namespace {

struct MatDims {
  std::size_t batch, m, k, n;
};

template <typename T>
MatDims matmul_dims(const BasicTensor<T>& a, const BasicTensor<T>& b, Transpose tb) {
  const auto fail = [&] {
    throw Error(ErrorKind::dimension, "matmul: incompatible shapes " + shape_str(a.shape()) +
                                          " and " + shape_str(b.shape()) +
                                          (tb == Transpose::b ? " (rhs transposed)" : ""));
  };
  if (a.rank() != b.rank() || a.rank() < 2) fail();
  MatDims d{1, 0, 0, 0};
  std::size_t off = 0;
  if (a.rank() == 3) {
    if (a.dim(0) != b.dim(0)) fail();
    d.batch = a.dim(0);
    off = 1;
  }
  d.m = a.dim(off);
  d.k = a.dim(off + 1);
  const std::size_t bk = tb == Transpose::b ? b.dim(off + 1) : b.dim(off);
  d.n = tb == Transpose::b ? b.dim(off) : b.dim(off + 1);
  if (bk != d.k) fail();
  return d;
}

}  // namespace

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b, Transpose tb) {
  const MatDims d = matmul_dims(a, b, tb);
  Shape out_shape = a.rank() == 3 ? Shape{d.batch, d.m, d.n} : Shape{d.m, d.n};
  BasicTensor<T> out(out_shape);
  for (std::size_t s = 0; s < d.batch; ++s) {
    const T* ap = a.ptr() + s * d.m * d.k;
    const T* bp = b.ptr() + s * d.k * d.n;
    T* cp = out.ptr() + s * d.m * d.n;
    if (tb == Transpose::b)
      gemm_nt(d.m, d.n, d.k, ap, bp, cp);
    else
      gemm_nn(d.m, d.n, d.k, ap, bp, cp);
  }
  require_finite(out, "matmul");
  return out;
}

template <typename T>
BasicTensor<T> MatMul<T>::forward(const BasicTensor<T>& a, const BasicTensor<T>& b, Transpose tb) {
  auto out = matmul(a, b, tb);
  a_ = a;
  b_ = b;
  tb_ = tb;
  return out;
}

template <typename T>
typename MatMul<T>::Grads MatMul<T>::backward(const BasicTensor<T>& dy) const {
  if (!a_) backward_before_forward("matmul");
  const auto& a = *a_;
  const auto& b = *b_;
  const MatDims d = matmul_dims(a, b, tb_);
  Grads g{BasicTensor<T>(a.shape()), BasicTensor<T>(b.shape())};
  for (std::size_t s = 0; s < d.batch; ++s) {
    const T* ap = a.ptr() + s * d.m * d.k;
    const T* bp = b.ptr() + s * d.k * d.n;
    const T* gp = dy.ptr() + s * d.m * d.n;
    T* dap = g.a.ptr() + s * d.m * d.k;
    T* dbp = g.b.ptr() + s * d.k * d.n;
    if (tb_ == Transpose::b) {
      // y = a b^T, b:[n,k]
      gemm_nn(d.m, d.k, d.n, gp, bp, dap);  // da = dy b
      gemm_tn(d.n, d.k, d.m, gp, ap, dbp);  // db = dy^T a
    } else {
      gemm_nt(d.m, d.k, d.n, gp, bp, dap);  // da = dy b^T
      gemm_tn(d.k, d.n, d.m, ap, gp, dbp);  // db = a^T dy
    }
  }
  return g;
}

// ---------------------------------------------------------------- linear

template <typename T>
BasicTensor<T> Linear<T>::forward(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                                  const BasicTensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || bias.rank() != 1 || x.dim(1) != weight.dim(0) ||
      bias.dim(0) != weight.dim(1))
    throw Error(ErrorKind::dimension, "linear: x " + shape_str(x.shape()) + ", weight " +
                                          shape_str(weight.shape()) + ", bias " +
                                          shape_str(bias.shape()));
  const std::size_t n = x.dim(0), in = x.dim(1), out = weight.dim(1);
  BasicTensor<T> y({n, out});
  for (std::size_t i = 0; i < n; ++i) std::copy(bias.ptr(), bias.ptr() + out, y.ptr() + i * out);
  gemm_nn(n, out, in, x.ptr(), weight.ptr(), y.ptr(), true);
  require_finite(y, "linear");
  x_ = x;
  w_ = weight;
  return y;
}

template <typename T>
typename Linear<T>::Grads Linear<T>::backward(const BasicTensor<T>& dy) const {
  if (!x_) backward_before_forward("linear");
  const std::size_t n = x_->dim(0), in = x_->dim(1), out = w_->dim(1);
  require_same_shape(dy.shape(), Shape{n, out}, "linear backward");
  Grads g{BasicTensor<T>(x_->shape()), BasicTensor<T>(w_->shape()), BasicTensor<T>({out})};
  gemm_nt(n, in, out, dy.ptr(), w_->ptr(), g.x.ptr());
  gemm_tn(in, out, n, x_->ptr(), dy.ptr(), g.weight.ptr());
  for (std::size_t i = 0; i < n; ++i) simd::axpy(T(1), dy.ptr() + i * out, g.bias.ptr(), out);
  return g;
}

// ---------------------------------------------------------------- softmax

template <typename T>
void softmax_row_inplace(T* row, std::size_t n) {
  const T m = simd::max(row, n);
  for (std::size_t j = 0; j < n; ++j) row[j] = std::exp(row[j] - m);
  const T s = simd::sum(row, n);
  simd::scale(T(1) / s, row, n);
}

template <typename T>
BasicTensor<T> Softmax<T>::forward(const BasicTensor<T>& x) {
  require_finite(x, "softmax input");
  BasicTensor<T> y = x;
  for (std::size_t r = 0; r < y.rows(); ++r) softmax_row_inplace(y.ptr() + r * y.cols(), y.cols());
  y_ = y;
  return y;
}

template <typename T>
BasicTensor<T> Softmax<T>::backward(const BasicTensor<T>& dy) const {
  if (!y_) backward_before_forward("softmax");
  const auto& y = *y_;
  require_same_shape(dy.shape(), y.shape(), "softmax backward");
  BasicTensor<T> dx(y.shape());
  const std::size_t n = y.cols();
  for (std::size_t r = 0; r < y.rows(); ++r) {
    const T* yr = y.ptr() + r * n;
    const T* gr = dy.ptr() + r * n;
    T* out = dx.ptr() + r * n;
    const T inner = simd::dot(yr, gr, n);
    for (std::size_t j = 0; j < n; ++j) out[j] = yr[j] * (gr[j] - inner);
  }
  return dx;
}

template <typename T>
const BasicTensor<T>& Softmax<T>::output() const {
  if (!y_) backward_before_forward("softmax output");
  return *y_;
}

// ---------------------------------------------------------------- layer norm

template <typename T>
BasicTensor<T> LayerNorm<T>::forward(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                                     const BasicTensor<T>& shift, double eps) {
  const std::size_t h = x.cols();
  if (gain.rank() != 1 || shift.rank() != 1 || gain.dim(0) != h || shift.dim(0) != h)
    throw Error(ErrorKind::dimension, "layer_norm: input " + shape_str(x.shape()) + ", gain " +
                                          shape_str(gain.shape()) + ", shift " +
                                          shape_str(shift.shape()));
  BasicTensor<T> xhat(x.shape());
  BasicTensor<T> y(x.shape());
  rstd_.assign(x.rows(), T(0));
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const T* xr = x.ptr() + r * h;
    const T mean = simd::sum(xr, h) / static_cast<T>(h);
    const T var = simd::sq_dev_sum(xr, mean, h) / static_cast<T>(h);
    const T rstd = T(1) / std::sqrt(var + static_cast<T>(eps));
    rstd_[r] = rstd;
    T* xh = xhat.ptr() + r * h;
    T* yr = y.ptr() + r * h;
    for (std::size_t j = 0; j < h; ++j) {
      xh[j] = (xr[j] - mean) * rstd;
      yr[j] = xh[j] * gain[j] + shift[j];
    }
  }
  require_finite(y, "layer_norm");
  xhat_ = std::move(xhat);
  gain_ = gain;
  return y;
}

template <typename T>
typename LayerNorm<T>::Grads LayerNorm<T>::backward(const BasicTensor<T>& dy) const {
  if (!xhat_) backward_before_forward("layer_norm");
  const auto& xhat = *xhat_;
  require_same_shape(dy.shape(), xhat.shape(), "layer_norm backward");
  const std::size_t h = xhat.cols();
  Grads g{BasicTensor<T>(xhat.shape()), BasicTensor<T>({h}), BasicTensor<T>({h})};
  std::vector<T> dxhat(h);
  for (std::size_t r = 0; r < xhat.rows(); ++r) {
    const T* gr = dy.ptr() + r * h;
    const T* xh = xhat.ptr() + r * h;
    T mean_d = 0, mean_dx = 0;
    for (std::size_t j = 0; j < h; ++j) {
      g.gain[j] += gr[j] * xh[j];
      g.shift[j] += gr[j];
      dxhat[j] = gr[j] * (*gain_)[j];
      mean_d += dxhat[j];
      mean_dx += dxhat[j] * xh[j];
    }
    mean_d /= static_cast<T>(h);
    mean_dx /= static_cast<T>(h);
    T* out = g.x.ptr() + r * h;
    for (std::size_t j = 0; j < h; ++j)
      out[j] = rstd_[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
  }
  return g;
}

// ---------------------------------------------------------------- gelu

template <typename T>
BasicTensor<T> Gelu<T>::forward(const BasicTensor<T>& x) {
  BasicTensor<T> y(x.shape());
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = x[i] * T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
  require_finite(y, "gelu");
  x_ = x;
  return y;
}

template <typename T>
BasicTensor<T> Gelu<T>::backward(const BasicTensor<T>& dy) const {
  if (!x_) backward_before_forward("gelu");
  const auto& x = *x_;
  require_same_shape(dy.shape(), x.shape(), "gelu backward");
  BasicTensor<T> dx(x.shape());
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  const T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
    const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x[i] * x[i]);
    dx[i] = dy[i] * (cdf + x[i] * pdf);
  }
  return dx;
}

// ---------------------------------------------------------------- dropout

template <typename T>
BasicTensor<T> Dropout<T>::forward(const BasicTensor<T>& x, double rate, Rng& rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw Error(ErrorKind::config, "dropout rate must be in [0, 1), got " + std::to_string(rate));
  ran_ = true;
  mask_.clear();
  if (!training || rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  mask_.resize(x.size());
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask_[i] = rng.uniform() < rate ? T(0) : keep_scale;
    y[i] = x[i] * mask_[i];
  }
  return y;
}

template <typename T>
BasicTensor<T> Dropout<T>::backward(const BasicTensor<T>& dy) const {
  if (!ran_) backward_before_forward("dropout");
  if (mask_.empty()) return dy;
  if (dy.size() != mask_.size())
    throw Error(ErrorKind::dimension, "dropout backward: gradient " + shape_str(dy.shape()) +
                                          " does not match cached mask");
  BasicTensor<T> dx(dy.shape());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * mask_[i];
  return dx;
}

// ---------------------------------------------------------------- cross entropy

template <typename T>
T CrossEntropy<T>::forward(const BasicTensor<T>& logits, std::span<const std::int32_t> targets) {
  require_finite(logits, "cross_entropy logits");
  const std::size_t rows = logits.rows(), c = logits.cols();
  if (targets.size() != rows)
    throw Error(ErrorKind::dimension, "cross_entropy: " + std::to_string(targets.size()) +
                                          " targets for logits " + shape_str(logits.shape()));
  BasicTensor<T> probs(logits.shape());
  double total = 0.0;
  counted_ = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int32_t t = targets[r];
    if (ignore_ && t == kIgnoreLabel) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= c)
      throw Error(ErrorKind::label, "cross_entropy: target " + std::to_string(t) + " at index " +
                                        std::to_string(r) + " outside [0, " + std::to_string(c) +
                                        ")");
    const T* z = logits.ptr() + r * c;
    T* p = probs.ptr() + r * c;
    const T m = simd::max(z, c);
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) {
      p[j] = std::exp(z[j] - m);
      s += p[j];
    }
    simd::scale(T(1) / s, p, c);
    total += static_cast<double>(m + std::log(s) - z[t]);
    ++counted_;
  }
  if (counted_ == 0) throw Error(ErrorKind::empty_batch, "cross_entropy: no target rows");
  probs_ = std::move(probs);
  targets_.assign(targets.begin(), targets.end());
  return static_cast<T>(total / static_cast<double>(counted_));
}

template <typename T>
BasicTensor<T> CrossEntropy<T>::backward(T upstream) const {
  if (!probs_) backward_before_forward("cross_entropy");
  const auto& p = *probs_;
  BasicTensor<T> dz(p.shape());
  const std::size_t c = p.cols();
  const T w = upstream / static_cast<T>(counted_);
  for (std::size_t r = 0; r < p.rows(); ++r) {
    const std::int32_t t = targets_[r];
    if (ignore_ && t == kIgnoreLabel) continue;
    const T* pr = p.ptr() + r * c;
    T* out = dz.ptr() + r * c;
    for (std::size_t j = 0; j < c; ++j) out[j] = w * pr[j];
    out[t] -= w;
  }
  return dz;
}

// ---------------------------------------------------------------- stateless

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x) {
  return Softmax<T>{}.forward(x);
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& shift, double eps) {
  return LayerNorm<T>{}.forward(x, gain, shift, eps);
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  return Gelu<T>{}.forward(x);
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double rate, Rng& rng, bool training) {
  return Dropout<T>{}.forward(x, rate, rng, training);
}

template <typename T>
T cross_entropy_from_logits(const BasicTensor<T>& logits, std::span<const std::int32_t> targets) {
  return CrossEntropy<T>{}.forward(logits, targets);
}

#define KDFORGE_INSTANTIATE(T)                                                                 \
  template void gemm_nn<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool); \
  template void gemm_nt<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool); \
  template void gemm_tn<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool); \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&, Transpose);      \
  template class MatMul<T>;                                                                    \
  template class Linear<T>;                                                                    \
  template class Softmax<T>;                                                                   \
  template class LayerNorm<T>;                                                                 \
  template class Gelu<T>;                                                                      \
  template class Dropout<T>;                                                                   \
  template class CrossEntropy<T>;                                                              \
  template BasicTensor<T> softmax_rows(const BasicTensor<T>&);                                 \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&,             \
                                     const BasicTensor<T>&, double);                           \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                         \
  template BasicTensor<T> dropout(const BasicTensor<T>&, double, Rng&, bool);                  \
  template T cross_entropy_from_logits(const BasicTensor<T>&, std::span<const std::int32_t>);  \
  template void softmax_row_inplace<T>(T*, std::size_t);

KDFORGE_INSTANTIATE(float)
KDFORGE_INSTANTIATE(double)

#undef KDFORGE_INSTANTIATE

}  // namespace kdforge
