// SPDX-License-Identifier: Apache-2.0
//
// Vector kernels behind every dense inner loop. A scalar reference table is
// always built; an AVX2+FMA table is built on x86-64 and selected at runtime
// when the CPU supports it. Set KDFORGE_SIMD=scalar to force the reference
// path. 64-bit callers always take the scalar templates.
#pragma once

#include <cstddef>
#include <string_view>

namespace kdforge::simd {

enum class Isa { scalar, avx2 };

struct KernelsF32 {
  float (*dot)(const float* a, const float* b, std::size_t n);
  /// y += alpha * x
  void (*axpy)(float alpha, const float* x, float* y, std::size_t n);
  /// x *= alpha
  void (*scale)(float alpha, float* x, std::size_t n);
  float (*sum)(const float* x, std::size_t n);
  float (*max)(const float* x, std::size_t n);
  /// sum of (x[i] - mean)^2
  float (*sq_dev_sum)(const float* x, float mean, std::size_t n);
};

const KernelsF32& scalar_kernels();
/// nullptr when the AVX2 translation unit was not compiled in.
const KernelsF32* avx2_kernels();

bool cpu_supports(Isa isa);
std::string_view isa_name(Isa isa);

Isa active_isa();
/// Switches the process-wide table. Throws a config error if unsupported.
void set_isa(Isa isa);
const KernelsF32& kernels();

// Scalar reference templates, also the 64-bit path.
namespace ref {

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void scale(T alpha, T* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

template <typename T>
T sum(const T* x, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

template <typename T>
T max(const T* x, std::size_t n) {
  T m = x[0];
  for (std::size_t i = 1; i < n; ++i)
    if (x[i] > m) m = x[i];
  return m;
}

template <typename T>
T sq_dev_sum(const T* x, T mean, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = x[i] - mean;
    acc += d * d;
  }
  return acc;
}

}  // namespace ref

// Typed entry points used by the ops layer.
inline float dot(const float* a, const float* b, std::size_t n) { return kernels().dot(a, b, n); }
inline double dot(const double* a, const double* b, std::size_t n) { return ref::dot(a, b, n); }
inline void axpy(float alpha, const float* x, float* y, std::size_t n) { kernels().axpy(alpha, x, y, n); }
inline void axpy(double alpha, const double* x, double* y, std::size_t n) { ref::axpy(alpha, x, y, n); }
inline void scale(float alpha, float* x, std::size_t n) { kernels().scale(alpha, x, n); }
inline void scale(double alpha, double* x, std::size_t n) { ref::scale(alpha, x, n); }
inline float sum(const float* x, std::size_t n) { return kernels().sum(x, n); }
inline double sum(const double* x, std::size_t n) { return ref::sum(x, n); }
inline float max(const float* x, std::size_t n) { return kernels().max(x, n); }
inline double max(const double* x, std::size_t n) { return ref::max(x, n); }
inline float sq_dev_sum(const float* x, float mean, std::size_t n) {
  return kernels().sq_dev_sum(x, mean, n);
}
inline double sq_dev_sum(const double* x, double mean, std::size_t n) {
  return ref::sq_dev_sum(x, mean, n);
}

}  // namespace kdforge::simd
