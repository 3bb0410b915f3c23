#pragma once

namespace tnr {

/// Process-wide settings for training workloads: flush denormals to zero and
/// keep freed tensor buffers in the heap instead of returning them to the OS.
/// Call once from main before any work; results stay deterministic.
void tune_runtime();

/// Floating-point control state of the calling thread (MXCSR on x86).
struct FloatEnv {
    unsigned bits = 0;
    static FloatEnv current();
    void install() const;
};

}  // namespace tnr
