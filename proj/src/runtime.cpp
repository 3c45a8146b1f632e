#include "mgd/runtime.hpp"

#include <unistd.h>

#include <cstdlib>

#include "mgd/tensor.hpp"

namespace mgd {

void select_blas_kernels(char** argv) {
  if (std::getenv("OPENBLAS_CORETYPE") || std::getenv("MGD_NO_REEXEC")) return;
#if defined(__x86_64__)
  const char* core = nullptr;
  if (__builtin_cpu_supports("avx512f")) core = "SkylakeX";
  else if (__builtin_cpu_supports("avx2")) core = "Haswell";
  if (!core) return;
  setenv("OPENBLAS_CORETYPE", core, 1);
  execv("/proc/self/exe", argv);
  // exec failed: carry on with whatever kernels were detected
#else
  (void)argv;
#endif
}

void configure_runtime(char** argv) {
  select_blas_kernels(argv);
  configure_threads_from_env();
}

}  // namespace mgd
