#include "tnr/runtime.hpp"

#include <cstdlib>

#if defined(__GLIBC__)
#include <malloc.h>
#endif
#if defined(__SSE__) || defined(_M_X64)
#include <xmmintrin.h>
#define TNR_HAVE_MXCSR 1
#endif

namespace tnr {

void tune_runtime() {
#if defined(__GLIBC__)
    // big activations otherwise go through mmap/munmap on every step
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
#ifdef TNR_HAVE_MXCSR
    _mm_setcsr(_mm_getcsr() | 0x8040);  // FTZ | DAZ
#endif
}

FloatEnv FloatEnv::current() {
#ifdef TNR_HAVE_MXCSR
    return {_mm_getcsr()};
#else
    return {};
#endif
}

void FloatEnv::install() const {
#ifdef TNR_HAVE_MXCSR
    _mm_setcsr(bits);
#endif
}

}  // namespace tnr
