#pragma once
// OpenBLAS picks its compute kernels from the CPU model at load time; on
// CPUs it cannot identify (common inside VMs) it falls back to a
// conservative AVX2 target even when AVX-512 is available, which costs
// ~40% on the dgemm-heavy training path. The choice can only be overridden
// through OPENBLAS_CORETYPE, which is read before main() runs, so the fix
// is to set it and re-exec the binary once.
#include <cstdlib>
#include <unistd.h>

namespace sitar::sys {

// Call first thing in main(). If the CPU supports AVX-512 and the caller
// has not pinned a core type, re-execs the process with
// OPENBLAS_CORETYPE=SKYLAKEX; otherwise (or in the re-executed child, or if
// exec fails) returns and the program proceeds with the default kernels.
inline void select_blas_kernels(char** argv) {
  if (std::getenv("OPENBLAS_CORETYPE") != nullptr) return;
  if (std::getenv("SITAR_BLAS_REEXEC") != nullptr) return;
  if (!__builtin_cpu_supports("avx512f")) return;
  ::setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 1);
  ::setenv("SITAR_BLAS_REEXEC", "1", 1);
  ::execv("/proc/self/exe", argv);
}

}  // namespace sitar::sys
