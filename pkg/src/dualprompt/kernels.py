"""Kernel selection: compiled extension when importable, numpy fallback otherwise.

Set ``DUALPROMPT_KERNEL=python`` to force the fallback (or ``=compiled`` to
fail loudly when the extension is missing).
"""

import os

import numpy as np

from . import _kernels_py
from ._kernels_py import MODES

_choice = os.environ.get("DUALPROMPT_KERNEL", "auto").lower()

try:
    from . import _kernels as _compiled
except ImportError:
    _compiled = None
    if _choice == "compiled":
        raise

if _choice == "python" or _compiled is None:
    BACKEND = "python"
    _impl = _kernels_py.fused_aggregate_asl
else:
    BACKEND = "compiled"
    _impl = _compiled.fused_aggregate_asl


def available_backends() -> list[str]:
    return ["python"] + (["compiled"] if _compiled is not None else [])


def get_kernel(backend: str | None = None):
    if backend is None:
        return _impl
    if backend == "python":
        return _kernels_py.fused_aggregate_asl
    if backend == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernel extension is not built")
        return _compiled.fused_aggregate_asl
    raise ValueError(f"unknown kernel backend {backend!r}")


def fused_aggregate_asl(pos, neg, labels, aggregation, spatial_temp, tau, gamma_pos, gamma_neg, margin,
                        backend=None):
    fn = get_kernel(backend)
    return fn(np.ascontiguousarray(pos, dtype=np.float64), np.ascontiguousarray(neg, dtype=np.float64),
              np.ascontiguousarray(labels, dtype=np.int8), MODES[aggregation], float(spatial_temp),
              float(tau), float(gamma_pos), float(gamma_neg), float(margin))
