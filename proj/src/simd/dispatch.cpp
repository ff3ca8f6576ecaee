// SPDX-License-Identifier: Apache-2.0
#include <atomic>
#include <cstdlib>
#include <string>

#include "kdforge/error.hpp"
#include "kdforge/simd/kernels.hpp"

namespace kdforge::simd {

#ifndef KDFORGE_HAVE_AVX2
const KernelsF32* avx2_kernels() { return nullptr; }
#endif

bool cpu_supports(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
#if defined(KDFORGE_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
  }
  return false;
}

std::string_view isa_name(Isa isa) {
  return isa == Isa::avx2 ? "avx2" : "scalar";
}

namespace {

Isa initial_isa() {
  if (const char* env = std::getenv("KDFORGE_SIMD")) {
    if (std::string(env) == "scalar") return Isa::scalar;
  }
  return cpu_supports(Isa::avx2) ? Isa::avx2 : Isa::scalar;
}

const KernelsF32& table_for(Isa isa) {
  return isa == Isa::avx2 ? *avx2_kernels() : scalar_kernels();
}

struct Active {
  std::atomic<Isa> isa;
  std::atomic<const KernelsF32*> table;
  Active() : isa(initial_isa()), table(&table_for(isa.load())) {}
};

Active& active() {
  static Active a;
  return a;
}

}  // namespace

Isa active_isa() { return active().isa.load(std::memory_order_relaxed); }

void set_isa(Isa isa) {
  if (!cpu_supports(isa))
    throw Error(ErrorKind::config, "instruction set " + std::string(isa_name(isa)) +
                                       " is not available on this machine");
  active().isa.store(isa);
  active().table.store(&table_for(isa));
}

const KernelsF32& kernels() { return *active().table.load(std::memory_order_relaxed); }

}  // namespace kdforge::simd
