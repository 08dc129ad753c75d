#pragma once

#if defined(__SSE2__)
#include <pmmintrin.h>
#include <xmmintrin.h>
#endif

namespace etad {

// Flush-to-zero / denormals-are-zero for the calling thread. Subnormal
// intermediates inside the dense kernels otherwise trap to microcode and
// dominate the runtime; flushing them is value-irrelevant at the tolerances
// this project asserts (>= 1e-12) and keeps runs deterministic.
inline void use_fast_fp_subnormals() {
#if defined(__SSE2__)
  _MM_SET_FLUSH_ZERO_MODE(_MM_FLUSH_ZERO_ON);
  _MM_SET_DENORMALS_ZERO_MODE(_MM_DENORMALS_ZERO_ON);
#endif
}

}  // namespace etad
