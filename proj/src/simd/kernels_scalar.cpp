// SPDX-License-Identifier: Apache-2.0
#include "kdforge/simd/kernels.hpp"

namespace kdforge::simd {

namespace {

float dot_f32(const float* a, const float* b, std::size_t n) { return ref::dot(a, b, n); }
void axpy_f32(float alpha, const float* x, float* y, std::size_t n) { ref::axpy(alpha, x, y, n); }
void scale_f32(float alpha, float* x, std::size_t n) { ref::scale(alpha, x, n); }
float sum_f32(const float* x, std::size_t n) { return ref::sum(x, n); }
float max_f32(const float* x, std::size_t n) { return ref::max(x, n); }
float sq_dev_sum_f32(const float* x, float mean, std::size_t n) { return ref::sq_dev_sum(x, mean, n); }

}  // namespace

const KernelsF32& scalar_kernels() {
  static const KernelsF32 table{dot_f32, axpy_f32, scale_f32, sum_f32, max_f32, sq_dev_sum_f32};
  return table;
}

}  // namespace kdforge::simd
