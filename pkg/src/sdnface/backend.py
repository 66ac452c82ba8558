"""Kernel backend selection.

The compiled Cython kernels are preferred when the extension built; the
numpy kernels are the drop-in fallback.  Both expose the same functions
(`conv2d_forward`, `conv2d_backward`, `maxpool2x2_forward`,
`maxpool2x2_backward`) with identical contracts.  Results agree to float
rounding but are not bit-identical across backends (GEMM accumulates in a
different order than the sequential loops), so reproducibility guarantees
hold per backend.

Selection: ``SDNFACE_BACKEND`` env var ("compiled" / "numpy"), else
compiled when available.
"""
import os

from . import _kernels_np


def _load_compiled():
    try:
        from . import _kernels
        return _kernels
    except ImportError:
        return None


_compiled = _load_compiled()
_active = None


def select(name="auto"):
    """Pick the kernel backend; returns the active module."""
    global _active
    if name == "auto":
        name = os.environ.get("SDNFACE_BACKEND", "").strip() or \
            ("compiled" if _compiled is not None else "numpy")
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available in this install")
        _active = _compiled
    elif name == "numpy":
        _active = _kernels_np
    else:
        raise ValueError(f"unknown backend {name!r} (expected 'compiled', 'numpy' or 'auto')")
    return _active


def active():
    global _active
    if _active is None:
        select("auto")
    return _active


def name():
    return "compiled" if active().COMPILED else "numpy"


def available():
    return ("compiled", "numpy") if _compiled is not None else ("numpy",)
