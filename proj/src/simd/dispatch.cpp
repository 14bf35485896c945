#include <atomic>
#include <cstdlib>
#include <string>

#include "kernels.hpp"
#include "masr/error.hpp"

namespace masr::simd {
namespace {

bool cpu_has(Isa isa) {
  switch (isa) {
    case Isa::scalar: return true;
    case Isa::avx2:
#if defined(MASR_HAVE_AVX2_KERNELS)
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Isa::neon:
#if defined(MASR_HAVE_NEON_KERNELS)
      return true;
#else
      return false;
#endif
  }
  return false;
}

const KernelTable* initial_table() {
  if (const char* env = std::getenv("MASR_SIMD")) {
    const std::string name(env);
    for (Isa isa : {Isa::scalar, Isa::avx2, Isa::neon})
      if (name == to_string(isa))
        if (const KernelTable* t = kernels_for(isa)) return t;
  }
  return kernels_for(best_supported());
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> table{initial_table()};
  return table;
}

}  // namespace

std::string_view to_string(Isa isa) {
  switch (isa) {
    case Isa::scalar: return "scalar";
    case Isa::avx2: return "avx2";
    case Isa::neon: return "neon";
  }
  return "unknown";
}

const KernelTable& scalar_kernels() { return detail::kScalarTable; }

const KernelTable* kernels_for(Isa isa) {
  if (!cpu_has(isa)) return nullptr;
  switch (isa) {
    case Isa::scalar: return &detail::kScalarTable;
#if defined(MASR_HAVE_AVX2_KERNELS)
    case Isa::avx2: return &detail::kAvx2Table;
#endif
#if defined(MASR_HAVE_NEON_KERNELS)
    case Isa::neon: return &detail::kNeonTable;
#endif
    default: return nullptr;
  }
}

Isa best_supported() {
  if (cpu_has(Isa::avx2)) return Isa::avx2;
  if (cpu_has(Isa::neon)) return Isa::neon;
  return Isa::scalar;
}

const KernelTable& active() { return *current().load(std::memory_order_relaxed); }

void select(Isa isa) {
  const KernelTable* t = kernels_for(isa);
  if (t == nullptr)
    fail(ErrorKind::unsupported, "simd variant '" + std::string(to_string(isa)) + "' is not available");
  current().store(t, std::memory_order_relaxed);
}

ScopedIsa::ScopedIsa(Isa isa) : previous_(active().isa) { select(isa); }
ScopedIsa::~ScopedIsa() { select(previous_); }

}  // namespace masr::simd
