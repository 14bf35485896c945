#pragma once

#include "masr/simd.hpp"

namespace masr::simd::detail {

extern const KernelTable kScalarTable;
#if defined(MASR_HAVE_AVX2_KERNELS)
extern const KernelTable kAvx2Table;
#endif
#if defined(MASR_HAVE_NEON_KERNELS)
extern const KernelTable kNeonTable;
#endif

}  // namespace masr::simd::detail
