#pragma once

namespace mgd {

/// OpenBLAS picks its kernels when the library loads and misdetects some
/// virtualized CPUs as very old cores. When OPENBLAS_CORETYPE is unset and
/// the CPU supports AVX2 or AVX-512, this sets it and re-executes the
/// current binary with the same arguments. Returns normally otherwise.
/// Set MGD_NO_REEXEC=1 to disable.
void select_blas_kernels(char** argv);

/// Applies MGD_THREADS (default 1) to the BLAS thread pool.
void configure_runtime(char** argv);

}  // namespace mgd
