"""Global element-width mode for the engine.

Training runs in float32 (the production setting); float64 exists so that
gradient checks against central finite differences have enough headroom.
The mode selects the dtype used when new dense tensors are created
(parameter init, adjacency values, dequantized buffers). Kernels themselves
preserve the dtype of their inputs.
"""

from contextlib import contextmanager

import numpy as np

_ALIASES = {
    "fp32": np.float32,
    "fp64": np.float64,
    "float32": np.float32,
    "float64": np.float64,
}

_active = np.dtype(np.float32)


def default_dtype() -> np.dtype:
    """Dtype new engine tensors are created with."""
    return _active


def set_default_dtype(dtype) -> None:
    global _active
    if isinstance(dtype, str):
        if dtype not in _ALIASES:
            raise ValueError(f"unknown precision {dtype!r}, expected fp32 or fp64")
        dtype = _ALIASES[dtype]
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"engine dtype must be float32 or float64, got {dt}")
    _active = dt


@contextmanager
def engine_dtype(dtype):
    """Temporarily switch the engine dtype (used by the oracle-mode tests)."""
    previous = _active
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)
