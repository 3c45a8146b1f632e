"""Masked generative distillation: bindings to the C++ core."""

import os


def _pick_blas_kernels():
    # OpenBLAS misdetects some virtual CPUs and falls back to slow kernels.
    if "OPENBLAS_CORETYPE" in os.environ:
        return
    try:
        with open("/proc/cpuinfo") as f:
            flags = next((line for line in f if line.startswith("flags")), "").split()
    except OSError:
        return
    if "avx512f" in flags:
        os.environ["OPENBLAS_CORETYPE"] = "SkylakeX"
    elif "avx2" in flags:
        os.environ["OPENBLAS_CORETYPE"] = "Haswell"


_pick_blas_kernels()

from ._mgd import (  # noqa: E402
    ConfigError,
    GenerativeBlock,
    Model,
    ShapeError,
    accuracy,
    check_config,
    compare,
    run_experiment,
    sample_mask,
)

__all__ = [
    "ConfigError",
    "GenerativeBlock",
    "Model",
    "ShapeError",
    "accuracy",
    "check_config",
    "compare",
    "run_experiment",
    "sample_mask",
]
